"""Test-time refinement of interior activations from partially known outputs.

Three procedures share one building block, gradient descent on an interior
value with the known-label loss:

* :func:`single_layer_feedback` optimizes one activation (or the input).
* :func:`layer_wise_feedback` optimizes a list of activations one after
  another, freezing each before re-initializing the next from it.
* :func:`residual_feedback` optimizes zero-initialized additive residuals at
  all pivots jointly, one backward pass per iteration.

Model parameters are never written; all state lives in the session.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .autograd import Tape, backward_to, forward_from, forward_full
from .errors import PivotOrderError
from .losses import ClassWeights, EvidencePartition, partial_loss
from .model import Model, PivotSet
from .tensor import Tensor

PLACEMENTS = ("post", "pre")


@dataclass(frozen=True)
class SGD:
    name = "sgd"


@dataclass(frozen=True)
class Momentum:
    beta: float = 0.9
    name = "momentum"


@dataclass(frozen=True)
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    name = "adam"


Rule = Union[SGD, Momentum, Adam]


def rule_from_name(name: str, **kwargs) -> Rule:
    rules = {"sgd": SGD, "momentum": Momentum, "adam": Adam}
    if name not in rules:
        raise ValueError(f"unknown update rule {name!r} (choose from {sorted(rules)})")
    return rules[name](**kwargs)


def rule_step(rule: Rule, value: np.ndarray, grad: np.ndarray, state, rate: float):
    if isinstance(rule, SGD):
        return value - rate * grad, state
    if isinstance(rule, Momentum):
        buf = grad if state is None else rule.beta * state + grad
        return value - rate * buf, buf
    if isinstance(rule, Adam):
        t, m, v = state if state is not None else (0, np.zeros_like(grad), np.zeros_like(grad))
        t += 1
        m = rule.beta1 * m + (1.0 - rule.beta1) * grad
        v = rule.beta2 * v + (1.0 - rule.beta2) * grad * grad
        m_hat = m / (1.0 - rule.beta1 ** t)
        v_hat = v / (1.0 - rule.beta2 ** t)
        return value - rate * m_hat / (np.sqrt(v_hat) + rule.eps), (t, m, v)
    raise TypeError(f"unsupported rule {rule!r}")


def update_step(rule: Rule, value: Tensor, gradient: Tensor, state=None, rate: float = 1e-3):
    """One optimizer step; returns ``(new value, new state)``. ``state=None`` starts fresh."""
    if value.shape != gradient.shape:
        raise ValueError(f"value {list(value.shape)} and gradient {list(gradient.shape)} differ")
    new, state = rule_step(rule, value.array, gradient.array, state, rate)
    return Tensor.wrap(np.array(new, dtype=np.float64)), state


@dataclass(frozen=True)
class FeedbackConfig:
    pivots: Sequence[str] = ()
    rate: float = 1e-3
    iterations: int = 20
    rule: Rule = field(default_factory=SGD)
    residual_placement: str = "post"
    layer_rates: Mapping[str, float] = field(default_factory=dict)
    max_grad_norm: float | None = None
    weighted: bool = True

    def __post_init__(self):
        if isinstance(self.pivots, PivotSet):
            object.__setattr__(self, "pivots", self.pivots.names)
        else:
            object.__setattr__(self, "pivots", tuple(self.pivots))
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.rate <= 0:
            raise ValueError("update rate must be > 0")
        if self.residual_placement not in PLACEMENTS:
            raise ValueError(f"residual_placement must be one of {PLACEMENTS}")

    def rate_for(self, layer: str) -> float:
        return float(self.layer_rates.get(layer, self.rate))


@dataclass
class FeedbackTrace:
    """Per-iteration record of one feedback session.

    ``losses`` holds the known-label loss before each update (``T`` entries per
    pivot segment; one segment for single-layer and residual feedback) and
    ``final_losses`` the loss after the last update of each segment. For a
    batched session every entry is an array with one value per sample.
    ``values`` maps each pivot node to its optimized activation (residual for
    residual feedback) and ``stats`` counts backward node evaluations.
    """

    method: str
    pivots: tuple[str, ...]
    losses: list = field(default_factory=list)
    final_losses: list = field(default_factory=list)
    iteration_ms: list = field(default_factory=list)
    outputs: Tensor | None = None
    scores: Tensor | None = None
    degenerate: bool = False
    values: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def segments(self) -> list[np.ndarray]:
        """Loss trajectory per segment, final loss included."""
        if not self.final_losses:
            return []
        T = len(self.losses) // len(self.final_losses)
        out = []
        for k, final in enumerate(self.final_losses):
            out.append(np.array(self.losses[k * T : (k + 1) * T] + [final]))
        return out

    def descent_counts(self) -> tuple[int, int]:
        """(#steps where the loss strictly decreased, #steps)."""
        down = total = 0
        for seg in self.segments():
            diffs = np.diff(seg, axis=0)
            down += int(np.sum(diffs < 0))
            total += diffs.size
        return down, total


def resolve_pivot(model: Model, name: str, placement: str = "post") -> str:
    """Map a pivot name to the tape node that carries its activation.

    With ``post`` placement a conv/dense layer directly followed by a relu
    layer resolves to the relu, so the activation includes the nonlinearity.
    """
    i = model.layer_index(name)
    if placement == "post" and i >= 0 and model.layers[i].kind in ("conv2d", "dense"):
        if i + 1 < len(model.layers) and model.layers[i + 1].kind == "relu":
            return model.layers[i + 1].name
    return name


def _ordered_nodes(model: Model, pivots: Sequence[str], placement: str) -> list[str]:
    if not pivots:
        raise ValueError("at least one pivot layer is required")
    positions = [model.layer_index(p) for p in pivots]
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise PivotOrderError(f"pivots {list(pivots)} are not in front-to-back order")
    nodes = [resolve_pivot(model, p, placement) for p in pivots]
    return list(dict.fromkeys(nodes))


def _known_weights(model: Model, weights: ClassWeights | None, config: FeedbackConfig):
    if not config.weighted or weights is None:
        return None
    if len(weights) != model.output_dim:
        raise ValueError(f"{len(weights)} class weights for {model.output_dim} outputs")
    return weights


def _per_sample_loss(f: np.ndarray, evidence: EvidencePartition, weights: ClassWeights | None):
    idx = np.asarray(evidence.known_indices, dtype=np.int64)
    z = f[..., idx]
    y = evidence.known_values
    lam = np.ones(idx.size) if weights is None else weights.lam[idx]
    per = y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    loss = (per * lam).sum(axis=-1)
    return float(loss) if np.ndim(loss) == 0 else loss


def _clip(grad: np.ndarray, max_norm: float | None, batch_dims: int) -> np.ndarray:
    if max_norm is None:
        return grad
    axes = tuple(range(batch_dims, grad.ndim))
    norm = np.sqrt(np.sum(grad * grad, axis=axes, keepdims=True))
    return grad * np.minimum(1.0, max_norm / np.maximum(norm, 1e-300))


def _finish(trace: FeedbackTrace, outputs: Tensor, evidence: EvidencePartition):
    trace.outputs = outputs
    idx = np.asarray(evidence.unknown, dtype=np.int64)
    trace.scores = Tensor.wrap(np.ascontiguousarray(outputs.array[..., idx]))
    return trace.scores, trace


def _descend(tape: Tape, node: str, a: Tensor, evidence, weights, config: FeedbackConfig,
             trace: FeedbackTrace, rate: float) -> tuple[Tensor, Tape]:
    """Run ``T`` updates of the activation at ``node``; return it and the final replay."""
    state = None
    for _ in range(config.iterations):
        t0 = time.perf_counter()
        sub = forward_from(tape, node, a)
        loss = partial_loss(sub, evidence, weights)
        trace.losses.append(_per_sample_loss(sub.output.array, evidence, weights))
        g = backward_to(sub, loss, [sub.start_id], trace.stats)[sub.start_id].array
        g = _clip(g, config.max_grad_norm, tape.batch_dims)
        new, state = rule_step(config.rule, a.array, g, state, rate)
        a = Tensor.wrap(new)
        trace.iteration_ms.append((time.perf_counter() - t0) * 1e3)
    final = forward_from(tape, node, a)
    trace.values[node] = a
    trace.final_losses.append(_per_sample_loss(final.output.array, evidence, weights))
    return a, final


def single_layer_feedback(model: Model, input: Tensor, evidence: EvidencePartition, layer: str,
                          config: FeedbackConfig | None = None, weights: ClassWeights | None = None):
    """Optimize the activation at ``layer`` (``"input"`` for the image itself).

    Returns ``(unknown-label scores, trace)``.
    """
    config = config or FeedbackConfig(pivots=(layer,))
    node = resolve_pivot(model, layer, config.residual_placement)
    weights = _known_weights(model, weights, config)
    tape = forward_full(model, input)
    evidence.check_range(model.output_dim)
    trace = FeedbackTrace("single", (layer,))
    if evidence.is_empty:
        trace.degenerate = True
        return _finish(trace, tape.output, evidence)
    _, final = _descend(tape, node, tape.value(node), evidence, weights, config, trace, config.rate_for(layer))
    return _finish(trace, final.output, evidence)


def layer_wise_feedback(model: Model, input: Tensor, evidence: EvidencePartition,
                        config: FeedbackConfig, weights: ClassWeights | None = None):
    """Layer-by-layer feedback over ``config.pivots`` (front-to-back order required).

    Each pivot is initialized by a truncated forward pass from the frozen,
    already-optimized previous pivot, then descended for ``T`` iterations
    with a fresh optimizer state.
    """
    nodes = _ordered_nodes(model, config.pivots, config.residual_placement)
    rates = {resolve_pivot(model, p, config.residual_placement): config.rate_for(p) for p in config.pivots}
    weights = _known_weights(model, weights, config)
    tape = forward_full(model, input)
    evidence.check_range(model.output_dim)
    trace = FeedbackTrace("lf", tuple(config.pivots))
    if evidence.is_empty:
        trace.degenerate = True
        return _finish(trace, tape.output, evidence)
    frozen: tuple[str, Tensor] | None = None
    final = tape
    for node in nodes:
        if frozen is None:
            a = tape.value(node)
        else:
            a = forward_from(tape, frozen[0], frozen[1]).value(node)
        a, final = _descend(tape, node, a, evidence, weights, config, trace, rates[node])
        frozen = (node, a)
    return _finish(trace, final.output, evidence)


@dataclass
class ResidualSet:
    """Additive residual per pivot node, with matching optimizer state."""

    residuals: dict[str, Tensor]
    state: dict[str, object] = field(default_factory=dict)

    @classmethod
    def zeros(cls, tape: Tape, nodes: Sequence[str]) -> "ResidualSet":
        return cls({n: Tensor.wrap(np.zeros(tape.value(n).shape)) for n in nodes},
                   {n: None for n in nodes})


def residual_feedback(model: Model, input: Tensor, evidence: EvidencePartition,
                      config: FeedbackConfig, weights: ClassWeights | None = None):
    """Joint optimization of zero-initialized residuals added at every pivot.

    One truncated forward from the earliest pivot and one backward pass to
    all residuals per iteration, regardless of the number of pivots.
    """
    nodes = _ordered_nodes(model, config.pivots, config.residual_placement)
    rates = {resolve_pivot(model, p, config.residual_placement): config.rate_for(p) for p in config.pivots}
    weights = _known_weights(model, weights, config)
    tape = forward_full(model, input)
    evidence.check_range(model.output_dim)
    trace = FeedbackTrace("rf", tuple(config.pivots))
    if evidence.is_empty:
        trace.degenerate = True
        return _finish(trace, tape.output, evidence)
    start = nodes[0]
    a_start = tape.value(start)
    rs = ResidualSet.zeros(tape, nodes)
    for _ in range(config.iterations):
        t0 = time.perf_counter()
        sub = forward_from(tape, start, a_start, rs.residuals)
        loss = partial_loss(sub, evidence, weights)
        trace.losses.append(_per_sample_loss(sub.output.array, evidence, weights))
        ids = [sub.residuals[n] for n in nodes]
        grads = backward_to(sub, loss, ids, trace.stats)
        for n, rid in zip(nodes, ids):
            g = _clip(grads[rid].array, config.max_grad_norm, tape.batch_dims)
            new, rs.state[n] = rule_step(config.rule, rs.residuals[n].array, g, rs.state[n], rates[n])
            rs.residuals[n] = Tensor.wrap(new)
        trace.iteration_ms.append((time.perf_counter() - t0) * 1e3)
    final = forward_from(tape, start, a_start, rs.residuals)
    trace.values.update(rs.residuals)
    trace.final_losses.append(_per_sample_loss(final.output.array, evidence, weights))
    return _finish(trace, final.output, evidence)


def run_method(method: str, model: Model, input: Tensor, evidence: EvidencePartition,
               config: FeedbackConfig, weights: ClassWeights | None = None):
    """Dispatch by method name: ``none``, ``single``, ``lf`` or ``rf``."""
    if method == "none":
        tape = forward_full(model, input)
        evidence.check_range(model.output_dim)
        return _finish(FeedbackTrace("none", ()), tape.output, evidence)
    if method == "single":
        if len(config.pivots) != 1:
            raise ValueError("single-layer feedback takes exactly one pivot")
        return single_layer_feedback(model, input, evidence, config.pivots[0], config, weights)
    if method == "lf":
        return layer_wise_feedback(model, input, evidence, config, weights)
    if method == "rf":
        return residual_feedback(model, input, evidence, config, weights)
    raise ValueError(f"unknown method {method!r}")
