"""Per-image wall-clock timing of layer-wise vs residual feedback.

A schedule is an ordered list of pivot layers. Entry ``s`` of the benchmark
updates pivot ``s`` together with every later pivot in the schedule, so the
pivot count runs from ``len(schedule)`` down to 1. Each inference handles a
single image; LF and RF calls are interleaved so that slow drift in machine
speed affects both methods equally.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..feedback import FeedbackConfig, SGD, run_method
from ..losses import ClassWeights, EvidencePartition
from ..model import Model
from ..tensor import Tensor
from .report import Report, pivot_label


@dataclass(frozen=True)
class BenchSpec:
    schedule: tuple[str, ...]
    known: tuple[int, ...]
    unknown: tuple[int, ...]
    rate: float = 1e-3
    iterations: int = 5
    timed: int = 200
    warmup: int = 20
    residual_placement: str = "post"

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        object.__setattr__(self, "known", tuple(int(i) for i in self.known))
        object.__setattr__(self, "unknown", tuple(int(i) for i in self.unknown))
        if self.iterations < 1:
            raise ValueError("timing needs at least one iteration")
        if self.timed < 1 or self.warmup < 0:
            raise ValueError("timed must be >= 1 and warmup >= 0")


def _evidence(labels: np.ndarray, i: int, spec: BenchSpec) -> EvidencePartition:
    return EvidencePartition(spec.known, labels[i, list(spec.known)].astype(np.float64), spec.unknown)


def benchmark_timing(model: Model, images: np.ndarray, labels: np.ndarray, spec: BenchSpec,
                     weights: ClassWeights | None = None) -> Report:
    """Mean per-image per-iteration milliseconds for LF and RF at each schedule suffix.

    Rows carry metric ``ms_per_iter`` (total time over ``timed * T``) and
    ``vjp_per_iter`` (backward node evaluations per iteration).
    """
    report = Report()
    n = images.shape[0]
    for s in range(len(spec.schedule)):
        pivots = spec.schedule[s:]
        config = FeedbackConfig(pivots=pivots, rate=spec.rate, iterations=spec.iterations, rule=SGD(),
                                residual_placement=spec.residual_placement)
        label = pivot_label(pivots)
        for k in range(spec.warmup):
            for method in ("lf", "rf"):
                run_method(method, model, Tensor(images[k % n]), _evidence(labels, k % n, spec), config, weights)
        total = {"lf": 0.0, "rf": 0.0}
        vjps = {"lf": 0, "rf": 0}
        for k in range(spec.timed):
            i = (spec.warmup + k) % n
            x = Tensor(images[i])
            ev = _evidence(labels, i, spec)
            for method in ("lf", "rf"):
                t0 = time.perf_counter()
                _, trace = run_method(method, model, x, ev, config, weights)
                total[method] += time.perf_counter() - t0
                vjps[method] += trace.stats.get("vjp_calls", 0)
        per = spec.timed * spec.iterations
        for method in ("lf", "rf"):
            wall = total[method] * 1e3
            report.add(method, label, len(spec.known), 0, "ms_per_iter", wall / per, wall)
            report.add(method, label, len(spec.known), 0, "vjp_per_iter", vjps[method] / per, wall)
            report.add(method, label, len(spec.known), 0, "pivot_count", float(len(pivots)), wall)
    return report
