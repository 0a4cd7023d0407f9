"""Minibatch training of the multi-label model on the class-weighted logistic loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..autograd import backward_to, forward_full
from ..errors import DivergenceError, ExcludedLabelError
from ..feedback import rule_step, rule_from_name
from ..losses import ClassWeights, EvidencePartition, class_weights, partial_loss
from ..model import Model
from ..tensor import Tensor
from .evaluate import predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch: int = 32
    rate: float = 0.01
    rule: str = "momentum"
    seed: int = 0


def safe_class_weights(labels) -> tuple[ClassWeights, tuple[int, ...]]:
    """Class weights with zero-positive labels dropped (weight 1, excluded from the loss)."""
    try:
        return class_weights(labels), ()
    except ExcludedLabelError as exc:
        keep = [j for j in range(labels.shape[1]) if j not in exc.indices]
        lam = np.ones(labels.shape[1])
        lam[keep] = class_weights(labels[:, keep]).lam
        log.warning("dropping labels without positives: %s", list(exc.indices))
        return ClassWeights(lam), exc.indices


def dataset_loss(model: Model, images, labels, weights: ClassWeights, subset=None) -> float:
    """Mean over samples of the weighted logistic loss summed over labels."""
    f = predict(model, images)
    y = labels.astype(np.float64)
    idx = np.arange(y.shape[1]) if subset is None else np.asarray(subset)
    z, t = f[:, idx], y[:, idx]
    per = t * np.logaddexp(0.0, -z) + (1.0 - t) * np.logaddexp(0.0, z)
    return float((per * weights.lam[idx]).sum() / y.shape[0])


def train(model: Model, train_set, val_set=None, config: TrainConfig = TrainConfig(),
          weights: ClassWeights | None = None):
    """Return ``(trained model, curve)``; the curve has one dict per epoch."""
    rule = rule_from_name(config.rule)
    labels = train_set.labels
    dropped: tuple[int, ...] = ()
    if weights is None:
        weights, dropped = safe_class_weights(labels)
    subset = tuple(j for j in range(labels.shape[1]) if j not in dropped)
    rng = np.random.default_rng(config.seed)
    params = {k: np.array(v.array) for k, v in model.params.items()}
    state = {k: None for k in params}
    n = len(train_set)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for a in range(0, n, config.batch):
            idx = order[a : a + config.batch]
            current = model.with_params({k: Tensor.wrap(v.copy()) for k, v in params.items()})
            tape = forward_full(current, Tensor.wrap(train_set.images[idx]))
            ev = EvidencePartition(subset, labels[idx][:, list(subset)].astype(np.float64), ())
            loss = partial_loss(tape, ev, weights, scale=1.0 / idx.size)
            if not np.isfinite(tape.nodes[loss].value.item()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {a // config.batch}")
            ids = [tape.params[k] for k in params]
            grads = backward_to(tape, loss, ids)
            for key, nid in zip(params, ids):
                params[key], state[key] = rule_step(rule, params[key], grads[nid].array, state[key], config.rate)
        model = model.with_params({k: Tensor.wrap(v.copy()) for k, v in params.items()})
        row = {"epoch": epoch + 1, "train_loss": dataset_loss(model, train_set.images, labels, weights, subset)}
        if val_set is not None:
            row["val_loss"] = dataset_loss(model, val_set.images, val_set.labels, weights, subset)
        if not np.isfinite(row["train_loss"]):
            raise DivergenceError(f"training diverged at epoch {epoch + 1}")
        log.info("epoch %d train %.4f val %s", row["epoch"], row["train_loss"], row.get("val_loss"))
        curve.append(row)
    return model, curve
