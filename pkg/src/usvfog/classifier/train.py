"""Mini-batch SGD with momentum over (scalogram, label) pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from usvfog.classifier.model import Weights
from usvfog.classifier.network import NetworkConfig, backward, cross_entropy, forward_logits, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainParams:
    lr: float = 0.01
    epochs: int = 100
    batch: int = 8
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float = 5.0


def dataset_loss(weights: Weights, x: np.ndarray, y: np.ndarray, batch: int = 16) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``weights`` over a dataset."""
    total, correct = 0.0, 0
    for i in range(0, len(x), batch):
        logits = forward_logits(weights.tensors, weights.config, x[i:i + batch])
        loss, _ = cross_entropy(logits.astype(np.float64), y[i:i + batch])
        total += loss * len(logits)
        correct += int((logits.argmax(axis=1) == y[i:i + batch]).sum())
    return total / len(x), correct / len(x)


def train(
    x: np.ndarray,
    y: np.ndarray,
    hyper: TrainParams = TrainParams(),
    config: NetworkConfig | None = None,
    init: Weights | None = None,
    progress=None,
) -> Weights:
    """Fit the network; deterministic for a given seed.

    ``x`` is (N, 6, 150, 192), ``y`` integer labels. The returned weights
    carry the full-dataset loss after the last epoch as ``final_loss`` and the
    per-epoch running loss in ``history``.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if len(x) != len(y):
        raise ValueError("scalogram and label counts differ")
    config = config or NetworkConfig()
    if y.min() < 0 or y.max() >= config.n_classes:
        raise ValueError(f"labels must lie in 0..{config.n_classes - 1}")
    params = (
        {k: v.copy() for k, v in init.tensors.items()} if init is not None
        else init_params(config, hyper.seed)
    )
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(hyper.seed)
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(x))
        running = 0.0
        for start in range(0, len(x), hyper.batch):
            idx = order[start:start + hyper.batch]
            logits, cache = forward_logits(params, config, x[idx], keep=True)
            loss, dlogits = cross_entropy(logits.astype(np.float64), y[idx])
            grads = backward(params, config, cache, dlogits.astype(np.float32))
            norm = np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            scale = min(1.0, hyper.clip_norm / norm) if norm > 0 else 1.0
            for k, g in grads.items():
                v = velocity[k]
                v *= hyper.momentum
                v -= (hyper.lr * scale) * g
                params[k] += v
            running += loss * len(idx)
        history.append(running / len(x))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
        if progress is not None:
            progress(epoch, history[-1])
    weights = Weights(config, params, seed=hyper.seed, epochs=hyper.epochs, history=history)
    weights.final_loss, _ = dataset_loss(weights, x, y)
    return weights
