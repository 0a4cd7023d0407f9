"""Run plain or feedback inference over a whole split.

Samples are processed in fixed-size chunks (the batched form of the
per-sample loop). Chunks may run on a thread pool capped by
``FBPROP_THREADS``; results are stitched back in index order, and since the
chunk boundaries never depend on the pool size the output is identical for
any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from ..autograd import forward_full
from ..feedback import FeedbackConfig, run_method
from ..losses import ClassWeights, EvidencePartition
from ..model import Model
from ..tensor import Tensor

CHUNK = 100


def worker_count() -> int:
    cap = os.environ.get("FBPROP_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def _chunks(n: int, size: int):
    return [slice(a, min(a + size, n)) for a in range(0, n, size)]


def _map_chunks(fn, n: int, chunk: int):
    parts = _chunks(n, chunk)
    workers = min(worker_count(), len(parts))
    if workers <= 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


def predict(model: Model, images: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
    """Raw output scores, shape [N, d]."""
    outs = _map_chunks(lambda s: forward_full(model, Tensor.wrap(images[s].copy())).output.array,
                       images.shape[0], chunk)
    return np.concatenate(outs, axis=0)


def infer_split(model: Model, images: np.ndarray, labels: np.ndarray, method: str,
                known: Sequence[int], unknown: Sequence[int], config: FeedbackConfig,
                weights: ClassWeights | None = None, chunk: int = CHUNK):
    """Unknown-label scores [N, |unknown|] after ``method`` with the true values of ``known``.

    Returns ``(scores, traces)`` with one trace per chunk.
    """
    known = tuple(int(i) for i in known)

    def run(s):
        ev = EvidencePartition(known, labels[s][:, list(known)].astype(np.float64), tuple(unknown))
        scores, trace = run_method(method, model, Tensor.wrap(images[s].copy()), ev, config, weights)
        return scores.array, trace

    results = _map_chunks(run, images.shape[0], chunk)
    return np.concatenate([r[0] for r in results], axis=0), [r[1] for r in results]
