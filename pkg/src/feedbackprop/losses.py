"""Class-weighted logistic loss and its partial (known-label) restriction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tape
from .errors import EvidenceError, ExcludedLabelError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ClassWeights:
    lam: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(lam)) and np.all(lam > 0)):
            raise ValueError("class weights must be finite and positive")
        lam.flags.writeable = False
        object.__setattr__(self, "lam", lam)

    @classmethod
    def uniform(cls, d: int) -> "ClassWeights":
        return cls(np.ones(d))

    def __len__(self):
        return self.lam.size


def class_weights(labels) -> ClassWeights:
    """Per-label weight ``(#negatives) / (#positives)`` over the rows of ``labels``."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ShapeError(f"labels must be an N x d matrix with N >= 1, got shape {list(y.shape)}")
    pos = y.sum(axis=0)
    neg = (1.0 - y).sum(axis=0)
    missing = np.flatnonzero(pos == 0)
    if missing.size:
        raise ExcludedLabelError(missing)
    # a label positive in every sample would get weight 0; keep it usable
    return ClassWeights(np.maximum(neg, 0.5) / pos)


@dataclass(frozen=True)
class EvidencePartition:
    """Known output indices with their true values, plus the unknown indices.

    ``known_values`` has shape ``[k]`` for one sample or ``[B, k]`` when the
    partition is applied to a batch of samples sharing the same index split.
    """

    known_indices: tuple[int, ...]
    known_values: np.ndarray
    unknown: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.known_indices)
        unk = tuple(int(i) for i in self.unknown)
        vals = np.array(self.known_values, dtype=np.float64)
        if vals.ndim not in (1, 2) or vals.shape[-1] != len(idx):
            raise ShapeError(f"known values of shape {list(vals.shape)} for {len(idx)} known indices")
        if len(set(idx)) != len(idx) or len(set(unk)) != len(unk):
            raise EvidenceError("duplicate indices in evidence partition")
        overlap = set(idx) & set(unk)
        if overlap:
            raise EvidenceError(f"known and unknown sets overlap at {sorted(overlap)}")
        if not np.all((vals == 0) | (vals == 1)):
            raise EvidenceError("known values must be 0 or 1")
        vals.flags.writeable = False
        object.__setattr__(self, "known_indices", idx)
        object.__setattr__(self, "unknown", unk)
        object.__setattr__(self, "known_values", vals)

    @classmethod
    def from_known(cls, known: Mapping[int, float], unknown: Sequence[int]) -> "EvidencePartition":
        items = sorted(known.items())
        return cls(tuple(k for k, _ in items), np.array([v for _, v in items], dtype=np.float64), tuple(unknown))

    @property
    def known(self) -> dict[int, float]:
        if self.known_values.ndim != 1:
            raise ValueError("known mapping is only defined for a single-sample partition")
        return {i: float(v) for i, v in zip(self.known_indices, self.known_values)}

    @property
    def is_empty(self) -> bool:
        return len(self.known_indices) == 0

    def check_range(self, d: int) -> None:
        bad = [i for i in self.known_indices + self.unknown if not 0 <= i < d]
        if bad:
            raise EvidenceError(f"indices {bad} outside output range [0, {d})")


def weighted_bce(scores: Tensor, targets, weights: ClassWeights, subset: Sequence[int] | None = None) -> Tensor:
    """Class-weighted logistic loss on raw scores, summed over ``subset`` (default: all)."""
    f = scores.array.reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if y.shape != f.shape or len(weights) != f.size:
        raise ShapeError(f"scores {f.size}, targets {y.size}, weights {len(weights)} disagree")
    idx = np.arange(f.size) if subset is None else np.asarray(list(subset), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= f.size):
        raise EvidenceError(f"subset indices outside [0, {f.size})")
    z, t, lam = f[idx], y[idx], weights.lam[idx]
    per = t * np.logaddexp(0.0, -z) + (1.0 - t) * np.logaddexp(0.0, z)
    return Tensor.wrap(np.array([np.add.reduce(lam * per)]))


def partial_loss(tape: Tape, evidence: EvidencePartition, weights: ClassWeights | None = None,
                 output: int | None = None, scale: float = 1.0) -> int | None:
    """Append the known-label loss to ``tape`` and return its node id.

    Returns ``None`` for empty evidence so callers can skip the feedback loop.
    ``weights=None`` gives the unweighted loss.
    """
    out_id = tape.output_id if output is None else output
    f = tape.nodes[out_id].value
    d = f.shape[-1]
    evidence.check_range(d)
    if evidence.is_empty:
        return None
    idx = np.asarray(evidence.known_indices, dtype=np.int64)
    lam = np.ones(idx.size) if weights is None else weights.lam[idx]
    targets = evidence.known_values
    if f.rank == 2 and targets.ndim == 1:
        targets = np.broadcast_to(targets, (f.shape[0], idx.size))
    return tape.apply("weighted_bce", [out_id], name="partial_loss",
                      targets=targets, weights=lam, indices=idx, scale=scale)
