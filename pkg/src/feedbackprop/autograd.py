"""Define-by-run reverse-mode differentiation with truncated replay.

A :class:`Tape` is an append-only, topologically ordered list of
:class:`GraphNode` records. Each node remembers the op that produced it and
its hyperparameters, so any suffix of the tape can be replayed from a
substituted interior value (:func:`forward_from`) and gradients can be pulled
back only as far as the earliest requested node (:func:`backward_to`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import GraphError, PivotOrderError, ShapeError, UnknownLayerError
from .model import INPUT, Model
from .tensor import Tensor


class Op(NamedTuple):
    forward: Callable
    backward: Callable  # (parent arrays, output array, grad, needs, **hp) -> list


def _conv_fwd(x, w, b, stride=1, pad=0):
    return T.conv2d_forward(x, w, stride, pad) + b[:, None, None]


def _conv_bwd(vals, out, g, needs, stride=1, pad=0):
    x, w, _ = vals
    gx, gw = T.conv2d_backward(x, w, g, stride, pad, need_x=needs[0], need_k=needs[1])
    gb = g.reshape(-1, *g.shape[-3:]).sum(axis=(0, 2, 3)) if needs[2] else None
    return [gx, gw, gb]


def _dense_bwd(vals, out, g, needs):
    x, w, _ = vals
    gx, gw, gb = T.dense_backward(x, w, g, need_x=needs[0], need_params=needs[1] or needs[2])
    return [gx, gw, gb]


def _flatten_fwd(x, sample_rank):
    return x.reshape(x.shape[: x.ndim - sample_rank] + (-1,))


def _bce_fwd(f, targets, weights, indices, scale=1.0):
    z = f[..., indices]
    # y*softplus(-z) + (1-y)*softplus(z), both terms finite for any finite z
    per = targets * np.logaddexp(0.0, -z) + (1.0 - targets) * np.logaddexp(0.0, z)
    return np.array([scale * np.add.reduce((per * weights).reshape(-1))])


def _bce_bwd(vals, out, g, needs, targets, weights, indices, scale=1.0):
    f = vals[0]
    gf = np.zeros(f.shape)
    gf[..., indices] = (g[0] * scale) * weights * (T.sigmoid(f[..., indices]) - targets)
    return [gf]


def _sum_bwd(vals, out, g, needs):
    return [np.full(vals[0].shape, g[0])]


def _mean_bwd(vals, out, g, needs):
    return [np.full(vals[0].shape, g[0] / vals[0].size)]


def _sigmoid_bwd(vals, out, g, needs):
    return [g * out * (1.0 - out)]


OPS: dict[str, Op] = {
    "conv2d": Op(_conv_fwd, _conv_bwd),
    "dense": Op(T.dense_forward, _dense_bwd),
    "sigmoid-head": Op(T.dense_forward, _dense_bwd),
    "relu": Op(T.relu, lambda vals, out, g, needs: [g * (vals[0] > 0)]),
    "sigmoid": Op(T.sigmoid, _sigmoid_bwd),
    "maxpool": Op(lambda x, size=2: T.maxpool_forward(x, size),
                  lambda vals, out, g, needs, size=2: [T.maxpool_backward(vals[0], g, size)]),
    "flatten": Op(_flatten_fwd, lambda vals, out, g, needs, sample_rank: [g.reshape(vals[0].shape)]),
    "add": Op(lambda a, b: a + b, lambda vals, out, g, needs: [g, g]),
    "matmul": Op(lambda a, b: a @ b, lambda vals, out, g, needs: [g @ vals[1].T, vals[0].T @ g]),
    "sum": Op(lambda x: np.array([np.add.reduce(x.reshape(-1))]), _sum_bwd),
    "mean": Op(lambda x: np.array([np.add.reduce(x.reshape(-1)) / x.size]), _mean_bwd),
    "weighted_bce": Op(_bce_fwd, _bce_bwd),
}


@dataclass(eq=False)
class GraphNode:
    id: int
    op: str  # "leaf" for inputs, parameters and residuals
    parents: tuple[int, ...]
    value: Tensor
    hp: dict = field(default_factory=dict)
    name: str | None = None


class Tape:
    """Recorded computation for one input (or one batch of independent inputs)."""

    def __init__(self, batch_dims: int = 0):
        self.nodes: list[GraphNode] = []
        self.pivots: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.residuals: dict[str, int] = {}
        self.output_id: int | None = None
        self.start_id: int | None = None
        self.batch_dims = batch_dims

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value: Tensor, name: str | None = None) -> int:
        node = GraphNode(len(self.nodes), "leaf", (), value, {}, name)
        self.nodes.append(node)
        return node.id

    def apply(self, op: str, parents: Sequence[int], name: str | None = None, **hp) -> int:
        if op not in OPS:
            raise ValueError(f"unknown op {op!r}")
        vals = [self.nodes[p].value.array for p in parents]
        out = Tensor.wrap(np.asarray(OPS[op].forward(*vals, **hp), dtype=np.float64))
        node = GraphNode(len(self.nodes), op, tuple(parents), out, hp, name)
        self.nodes.append(node)
        return node.id

    def node_id(self, ref) -> int:
        if isinstance(ref, str):
            if ref not in self.pivots:
                raise UnknownLayerError(ref, self.pivots)
            return self.pivots[ref]
        return int(ref)

    def value(self, ref) -> Tensor:
        return self.nodes[self.node_id(ref)].value

    @property
    def output(self) -> Tensor:
        return self.nodes[self.output_id].value

    def replay(self) -> "Tape":
        """Recompute every non-leaf node from the stored leaves."""
        return _replay(self, 0, {})


def _record_layers(tape: Tape, model: Model, x_id: int) -> int:
    cur = x_id
    sample_rank = len(model.input_shape)
    for layer in model.layers:
        hp = {}
        parents = [cur]
        if layer.kind == "conv2d":
            hp = {"stride": int(layer.hyperparams.get("stride", 1)), "pad": int(layer.hyperparams.get("pad", 0))}
        elif layer.kind == "maxpool":
            hp = {"size": int(layer.hyperparams.get("size", 2))}
        elif layer.kind == "flatten":
            hp = {"sample_rank": sample_rank}
        if layer.has_params:
            parents += [tape.params[f"{layer.name}.weight"], tape.params[f"{layer.name}.bias"]]
        cur = tape.apply(layer.kind, parents, name=layer.name, **hp)
        tape.pivots[layer.name] = cur
        sample_rank = len(model.activation_shape(layer.name))
    return cur


def forward_full(model: Model, input: Tensor) -> Tape:
    """Record the full forward pass of ``model`` on ``input``.

    ``input`` has the model's input shape, optionally with one leading batch axis.
    """
    extra = input.rank - len(model.input_shape)
    if extra not in (0, 1) or input.shape[extra:] != model.input_shape:
        raise ShapeError(f"layer {INPUT!r}: expected shape {list(model.input_shape)}, "
                         f"got {list(input.shape)}")
    tape = Tape(batch_dims=extra)
    # parameter leaves first so that truncated replays can share them
    for key in model.param_keys():
        tape.params[key] = tape.leaf(model.params[key], key)
    x_id = tape.leaf(input, INPUT)
    tape.pivots[INPUT] = x_id
    tape.output_id = _record_layers(tape, model, x_id)
    return tape


def _replay(tape: Tape, start: int, overrides: Mapping[int, Tensor],
            residuals: Mapping[int, Tensor] | None = None) -> Tape:
    """Copy ``tape`` with nodes before ``start`` shared and the rest recomputed.

    ``overrides`` replaces node values (the node becomes a leaf). ``residuals``
    maps a node id to an additive tensor injected right after that node.
    """
    residuals = residuals or {}
    new = Tape(tape.batch_dims)
    new.nodes = tape.nodes[:start]
    new.params = dict(tape.params)
    remap = {i: i for i in range(start)}
    for node in tape.nodes[start:]:
        if node.id in overrides:
            nid = new.leaf(overrides[node.id], node.name)
            new.start_id = nid
        elif node.op == "leaf":
            nid = new.leaf(node.value, node.name)
        else:
            nid = new.apply(node.op, [remap[p] for p in node.parents], name=node.name, **node.hp)
        if node.id in residuals:
            rid = new.leaf(residuals[node.id], f"residual:{node.name}")
            new.residuals[node.name] = rid
            nid = new.apply("add", [nid, rid], name=node.name)
        remap[node.id] = nid
    for name, pid in tape.pivots.items():
        new.pivots[name] = remap[pid]
    for key, pid in tape.params.items():
        new.params[key] = remap[pid]
    new.output_id = remap[tape.output_id] if tape.output_id is not None else None
    return new


def forward_from(tape: Tape, layer: str, activation: Tensor,
                 residuals: Mapping[str, Tensor] | None = None) -> Tape:
    """Replay ``tape`` from ``layer`` with a substituted activation.

    Only nodes downstream of ``layer`` are recomputed. ``residuals`` maps
    layer names (at or after ``layer``) to tensors added to that layer's
    output; a residual at ``layer`` itself is added to ``activation``.
    The returned tape exposes the substituted activation as ``start_id`` and
    each residual leaf under ``residuals[name]``.
    """
    start = tape.node_id(layer)
    stored = tape.nodes[start].value
    if activation.shape != stored.shape:
        raise ShapeError(f"layer {layer!r}: activation shape {list(activation.shape)} "
                         f"differs from stored {list(stored.shape)}")
    res_ids = {}
    for name, r in (residuals or {}).items():
        rid = tape.node_id(name)
        if rid < start:
            raise PivotOrderError(f"residual at {name!r} is upstream of start layer {layer!r}")
        if r.shape != tape.nodes[rid].value.shape:
            raise ShapeError(f"residual for {name!r} has shape {list(r.shape)}, "
                             f"activation is {list(tape.nodes[rid].value.shape)}")
        res_ids[rid] = r
    return _replay(tape, start, {start: activation}, res_ids)


def _ancestors(tape: Tape, node_id: int) -> set[int]:
    seen = {node_id}
    stack = [node_id]
    while stack:
        for p in tape.nodes[stack.pop()].parents:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def backward_to(tape: Tape, loss: int, targets: Sequence[int], stats: dict | None = None) -> dict[int, Tensor]:
    """Gradients of the scalar node ``loss`` with respect to each target node.

    The reverse sweep visits only nodes between the earliest target and the
    loss, and only propagates into parents that lie on a path from a target.
    ``stats["vjp_calls"]`` (when given) counts node backward evaluations.
    """
    loss_node = tape.nodes[loss]
    if loss_node.value.size != 1:
        raise GraphError(f"loss node {loss} is not scalar (shape {list(loss_node.value.shape)})")
    targets = [int(t) for t in targets]
    if not targets:
        return {}
    anc = _ancestors(tape, loss)
    stray = [t for t in targets if t not in anc]
    if stray:
        raise GraphError(f"nodes {stray} are not ancestors of loss node {loss}")
    lo = min(targets)
    tset = set(targets)
    # reach[i]: node i is a target or depends on one
    reach = {}
    for node in tape.nodes[lo : loss + 1]:
        reach[node.id] = node.id in tset or any(reach.get(p, False) for p in node.parents)
    grads: dict[int, np.ndarray] = {loss: np.ones(loss_node.value.shape)}
    for nid in range(loss, lo - 1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.op == "leaf" or nid not in anc:
            continue
        needs = [reach.get(p, False) for p in node.parents]
        if not any(needs):
            continue
        vals = [tape.nodes[p].value.array for p in node.parents]
        parts = OPS[node.op].backward(vals, node.value.array, g, needs, **node.hp)
        if stats is not None:
            stats["vjp_calls"] = stats.get("vjp_calls", 0) + 1
        for p, need, gp in zip(node.parents, needs, parts):
            if not need:
                continue
            grads[p] = gp if p not in grads else grads[p] + gp
    out = {}
    for t in targets:
        g = grads.get(t)
        out[t] = Tensor.wrap(np.zeros(tape.nodes[t].value.shape) if g is None else np.array(g, dtype=np.float64))
    return out


def grad_check(f: Callable[[Tape, int], int], point: Tensor, epsilon: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(tape, x_id)`` records a computation on ``tape`` starting from leaf
    ``x_id`` and returns the id of a scalar node. The result is the maximum
    over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def evaluate(x: np.ndarray) -> float:
        tape = Tape()
        out = f(tape, tape.leaf(Tensor.wrap(x)))
        return tape.nodes[out].value.item()

    tape = Tape()
    x_id = tape.leaf(point)
    loss = f(tape, x_id)
    analytic = backward_to(tape, loss, [x_id])[x_id].array.reshape(-1)
    base = point.array.reshape(-1)
    worst = 0.0
    for i in range(base.size):
        up = base.copy()
        up[i] += epsilon
        down = base.copy()
        down[i] -= epsilon
        numeric = (evaluate(up.reshape(point.shape)) - evaluate(down.reshape(point.shape))) / (2 * epsilon)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
