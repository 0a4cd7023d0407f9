"""Evidence-amount sweep and per-layer usefulness analysis.

Both experiments pick update hyperparameters on the validation split, then
evaluate once on the test split. Known-label sets are drawn uniformly without
replacement from the known pool, seeded per ``(amount, repetition)`` so every
method sees the same sets. Cells whose known set repeats (for example when
the amount equals the pool size) are computed once and reused.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import SpecError
from ..feedback import FeedbackConfig, rule_from_name
from ..losses import ClassWeights
from ..metrics import mean_ap
from ..model import INPUT, Model, load_class_weights, load_model
from ..tensor import load_tensor
from .data import Dataset, load_split
from .evaluate import infer_split, predict
from .report import Report, pivot_label
from .training import safe_class_weights

log = logging.getLogger(__name__)

METHODS = ("lf", "rf")


@dataclass(frozen=True)
class ExperimentSpec:
    model: str
    data_dir: str
    unknown: tuple[int, ...]
    known_amounts: tuple[int, ...]
    pivots: tuple[tuple[str, ...], ...]
    known_pool: tuple[int, ...] | None = None
    methods: tuple[str, ...] = METHODS
    grid: Mapping[str, Sequence] = field(default_factory=lambda: {"rate": [1e-3]})
    config: Mapping[str, object] = field(default_factory=dict)
    repetitions: int = 1
    seed: int = 0
    select_known: int | None = None
    val_samples: int | None = None
    test_samples: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "unknown", tuple(int(i) for i in self.unknown))
        object.__setattr__(self, "known_amounts", tuple(int(a) for a in self.known_amounts))
        object.__setattr__(self, "pivots", tuple(tuple(p) for p in self.pivots))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.known_pool is not None:
            object.__setattr__(self, "known_pool", tuple(int(i) for i in self.known_pool))
        self.validate()

    def validate(self) -> None:
        if not self.unknown:
            raise SpecError("the unknown-label set is empty")
        if len(set(self.unknown)) != len(self.unknown):
            raise SpecError("duplicate unknown labels")
        if self.known_pool is not None:
            overlap = sorted(set(self.known_pool) & set(self.unknown))
            if overlap:
                raise SpecError(f"known and unknown sets overlap at labels {overlap}")
        if any(a < 0 for a in self.known_amounts):
            raise SpecError("known amounts must be >= 0")
        if self.known_pool is not None and self.known_amounts and max(self.known_amounts) > len(self.known_pool):
            raise SpecError(f"known amount {max(self.known_amounts)} exceeds the pool of {len(self.known_pool)}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise SpecError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.repetitions < 1:
            raise SpecError("repetitions must be >= 1")
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise SpecError("the feedback grid needs at least one value per key")

    @classmethod
    def from_json(cls, doc: Mapping, base_dir=None) -> "ExperimentSpec":
        doc = dict(doc)
        base = Path(base_dir) if base_dir is not None else None
        for key in ("model", "data_dir"):
            if key in doc and base is not None and not Path(doc[key]).is_absolute():
                doc[key] = str(base / doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SpecError(f"invalid experiment spec: {exc}") from None

    @property
    def selection_amount(self) -> int:
        if self.select_known is not None:
            return self.select_known
        return max(self.known_amounts) if self.known_amounts else 0

    def pool(self, d: int) -> tuple[int, ...]:
        out_of_range = [i for i in self.unknown + (self.known_pool or ()) if not 0 <= i < d]
        if out_of_range:
            raise SpecError(f"labels {out_of_range} do not exist in a model with {d} outputs")
        if self.known_pool is not None:
            return self.known_pool
        taken = set(self.unknown)
        return tuple(i for i in range(d) if i not in taken)

    def configs(self) -> list[FeedbackConfig]:
        """Cartesian product of the grid, in key order then value order."""
        keys = list(self.grid)
        base = dict(self.config)
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            out.append(_make_config({**base, **dict(zip(keys, combo))}))
        return out


def _make_config(fields: Mapping) -> FeedbackConfig:
    fields = dict(fields)
    rule = fields.pop("rule", "sgd")
    if isinstance(rule, str):
        rule = rule_from_name(rule)
    try:
        return FeedbackConfig(rule=rule, **fields)
    except TypeError as exc:
        raise SpecError(f"invalid feedback config: {exc}") from None


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentSpec.from_json(doc, base_dir=path.parent)


SELECTION_REP = -1


def draw_known(pool: Sequence[int], amount: int, seed: int, rep: int) -> tuple[int, ...]:
    """Uniform draw of ``amount`` labels from ``pool`` without replacement.

    ``rep = SELECTION_REP`` gives the validation-time draw, a separate stream.
    """
    if amount > len(pool):
        raise SpecError(f"cannot draw {amount} known labels from a pool of {len(pool)}")
    stream = [seed, amount, 1] if rep == SELECTION_REP else [seed, amount, 0, rep]
    rng = np.random.default_rng(stream)
    picked = rng.choice(np.asarray(pool), size=amount, replace=False)
    return tuple(sorted(int(i) for i in picked))


def _describe(config: FeedbackConfig) -> str:
    return f"rate={config.rate!r} iters={config.iterations} rule={config.rule.name}"


@dataclass
class _Context:
    spec: ExperimentSpec
    model: Model
    val: Dataset
    test: Dataset
    weights: ClassWeights
    cache: dict = field(default_factory=dict)

    def run(self, split: str, method: str, known, config: FeedbackConfig) -> tuple[float, float]:
        """(unknown-set mAP, wall ms) for one cell, memoized on its inputs."""
        key = (split, method, tuple(known), repr(config))
        if key not in self.cache:
            data = self.val if split == "val" else self.test
            t0 = time.perf_counter()
            scores, _ = infer_split(self.model, data.images, data.labels, method, known,
                                    self.spec.unknown, config, self.weights)
            value = mean_ap(scores, data.labels[:, list(self.spec.unknown)])
            self.cache[key] = (value, (time.perf_counter() - t0) * 1e3)
        return self.cache[key]

    def select(self, method: str, pivots: tuple[str, ...], known) -> tuple[FeedbackConfig, float]:
        """Grid point with the best validation mAP (first one on ties)."""
        best = None
        for config in self.spec.configs():
            config = replace(config, pivots=pivots)
            value, _ = self.run("val", method, known, config)
            log.info("val %s %s %s -> %.4f", method, pivot_label(pivots), _describe(config), value)
            if best is None or value > best[1]:
                best = (config, value)
        return best


def _capped(data: Dataset, cap: int | None) -> Dataset:
    return data if cap is None or cap >= len(data) else data.subset(slice(0, cap))


def _train_weights(data_dir: Path, model_path: Path, d: int) -> ClassWeights:
    labels_file = data_dir / "train_labels.fbpt"
    if labels_file.exists():
        weights, _ = safe_class_weights(load_tensor(labels_file).array)
        return weights
    lam = load_class_weights(model_path)
    return ClassWeights(lam) if lam is not None else ClassWeights.uniform(d)


def _context(spec: ExperimentSpec) -> _Context:
    model = load_model(spec.model)
    data_dir = Path(spec.data_dir)
    val = _capped(load_split(data_dir, "val"), spec.val_samples)
    test = _capped(load_split(data_dir, "test"), spec.test_samples)
    weights = _train_weights(data_dir, Path(spec.model), model.output_dim)
    spec.pool(model.output_dim)
    return _Context(spec, model, val, test, weights)


def _baseline(ctx: _Context, split: str) -> tuple[float, float]:
    data = ctx.val if split == "val" else ctx.test
    t0 = time.perf_counter()
    scores = predict(ctx.model, data.images)[:, list(ctx.spec.unknown)]
    return mean_ap(scores, data.labels[:, list(ctx.spec.unknown)]), (time.perf_counter() - t0) * 1e3


def run_sweep(spec: ExperimentSpec) -> Report:
    """Unknown-set test mAP for every (method, pivots, known amount, repetition).

    Besides the ``map`` rows, each (method, pivots) pair gets ``val_map``,
    ``rate`` and ``iterations`` rows (repetition -1) describing the chosen grid
    point. The ``none`` baseline is repeated at every amount and repetition.
    """
    ctx = _context(spec)
    pool = spec.pool(ctx.model.output_dim)
    report = Report()
    base, base_ms = _baseline(ctx, "test")
    for amount in spec.known_amounts:
        for rep in range(spec.repetitions):
            report.add("none", "", amount, rep, "map", base, base_ms)
    sel_amount = spec.selection_amount
    sel_known = draw_known(pool, sel_amount, spec.seed, SELECTION_REP)
    for pivots in spec.pivots:
        label = pivot_label(pivots)
        for method in spec.methods:
            config, val_map = ctx.select(method, pivots, sel_known)
            report.add(method, label, sel_amount, SELECTION_REP, "val_map", val_map)
            report.add(method, label, sel_amount, SELECTION_REP, "rate", config.rate)
            report.add(method, label, sel_amount, SELECTION_REP, "iterations", float(config.iterations))
            for amount in spec.known_amounts:
                for rep in range(spec.repetitions):
                    known = draw_known(pool, amount, spec.seed, rep)
                    value, ms = ctx.run("test", method, known, config)
                    report.add(method, label, amount, rep, "map", value, ms)
                log.info("test %s %s known=%d mean %.4f", method, label, amount,
                         np.mean(report.values(method=method, pivots=label, known=amount, metric="map")))
    return report


def layer_analysis(spec: ExperimentSpec) -> Report:
    """Best-validation and test mAP with a single pivot at the input and at every layer.

    Pivots are placed on layer outputs as listed (``pre`` placement), so a
    convolution and its relu count as two separate candidates. The known set
    is fixed: one draw of the selection amount.
    """
    ctx = _context(spec)
    pool = spec.pool(ctx.model.output_dim)
    amount = spec.selection_amount
    known = draw_known(pool, amount, spec.seed, SELECTION_REP)
    report = Report()
    for split, metric in (("val", "val_map"), ("test", "map")):
        value, ms = _baseline(ctx, split)
        report.add("none", "", amount, 0, metric, value, ms)
    placed = replace(spec, config={**spec.config, "residual_placement": "pre"})
    ctx.spec = placed
    for layer in (INPUT,) + ctx.model.layer_names:
        for method in spec.methods:
            config, val_map = ctx.select(method, (layer,), known)
            value, ms = ctx.run("test", method, known, config)
            report.add(method, layer, amount, 0, "val_map", val_map)
            report.add(method, layer, amount, 0, "rate", config.rate)
            report.add(method, layer, amount, 0, "map", value, ms)
    return report


def count_inversions(curve: Mapping[int, float]) -> int:
    """Number of consecutive amounts at which the mean strictly decreases."""
    vals = [curve[k] for k in sorted(curve)]
    return sum(1 for a, b in zip(vals, vals[1:]) if b < a)
