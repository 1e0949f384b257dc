"""Finite-difference verification of the backward pass in float64."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from usvfog.classifier.network import (
    BlockSpec,
    NetworkConfig,
    backward,
    forward_logits,
    init_params,
    softmax,
)

# Same layer types and strides as the full network, narrower channels.
SMALL_CONFIG = NetworkConfig(
    height=10,
    width=12,
    stem_channels=4,
    blocks=(
        BlockSpec(2, 4, 1),
        BlockSpec(2, 6, 2),
        BlockSpec(2, 6, 1, residual=True),
        BlockSpec(2, 8, 2),
    ),
)
KINK_MARGIN = 1e-3


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against target distributions, with its logit gradient."""
    probs = softmax(logits)
    n = logits.shape[0]
    loss = float(-(targets * np.log(np.maximum(probs, 1e-300))).sum() / n)
    return loss, (probs - targets) / n


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: dict[str, float]
    analytic: np.ndarray
    numeric: np.ndarray


def _kink_distance(cache) -> float:
    """Smallest distance of any ReLU6 pre-activation from 0 or 6."""
    pre = [cache["stem"][2]]
    for key, entry in cache.items():
        if key.startswith("block"):
            pre += [entry[2], entry[5]]
    return min(float(np.min(np.minimum(np.abs(a), np.abs(a - 6.0)))) for a in pre)


def _problem(config: NetworkConfig, seed: int, margin: float = KINK_MARGIN, max_tries: int = 200):
    """Random parameters, input and label with every pre-activation clear of the ReLU6 kinks.

    Central differences are only meaningful where the loss is smooth, so
    draws that put a unit within ``margin`` of 0 or 6 are rejected.
    """
    for attempt in range(max_tries):
        rng = np.random.default_rng([seed, attempt])
        params = init_params(config, int(rng.integers(2**31)), dtype=np.float64)
        # move scales and biases off their init values so every path carries gradient
        for k, v in params.items():
            if k.endswith((".scale", ".bias", ".b")):
                v += rng.normal(0.0, 0.1, size=v.shape)
        x = rng.uniform(0.0, 1.0, size=(1, config.in_channels, config.height, config.width))
        labels = rng.integers(0, config.n_classes, size=1)
        _, cache = forward_logits(params, config, x, keep=True)
        if _kink_distance(cache) > margin:
            return params, x, np.eye(config.n_classes)[labels]
    raise RuntimeError(f"no kink-free draw for seed {seed} after {max_tries} tries")


def loss_and_grads(params, config, x, targets):
    logits, cache = forward_logits(params, config, x, keep=True)
    loss, d = soft_cross_entropy(logits, targets)
    return loss, backward(params, config, cache, d)


def grad_check_detail(
    config: NetworkConfig = SMALL_CONFIG,
    seed: int = 0,
    h: float = 1e-4,
    per_group: int | None = None,
    targets: np.ndarray | None = None,
) -> GradCheckResult:
    """Compare backprop against central differences for every parameter group.

    ``per_group`` limits the check to that many randomly chosen entries per
    tensor; by default every entry is perturbed.

    Relative error per entry is |a - n| / max(|a| + |n|, 1e-8).
    """
    params, x, default_targets = _problem(config, seed)
    targets = default_targets if targets is None else targets
    _, grads = loss_and_grads(params, config, x, targets)
    rng = np.random.default_rng(seed + 1)

    def loss_at():
        logits = forward_logits(params, config, x)
        return soft_cross_entropy(logits, targets)[0]

    analytic, numeric, groups = [], [], {}
    for name, p in params.items():
        flat = p.reshape(-1)
        if per_group is None or per_group >= flat.size:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=per_group, replace=False)
        errs = []
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            analytic.append(ana)
            numeric.append(num)
            errs.append(abs(ana - num) / max(abs(ana) + abs(num), 1e-8))
        groups[name] = float(max(errs))
    return GradCheckResult(max(groups.values()), groups, np.array(analytic), np.array(numeric))


def grad_check(config: NetworkConfig = SMALL_CONFIG, seed: int = 0, h: float = 1e-4) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    return grad_check_detail(config, seed, h).max_rel_error


def matched_target_gradient_norm(config: NetworkConfig = SMALL_CONFIG, seed: int = 0) -> float:
    """Gradient norm when the target distribution equals the current prediction."""
    params, x, _ = _problem(config, seed)
    targets = softmax(forward_logits(params, config, x))
    _, grads = loss_and_grads(params, config, x, targets)
    return float(np.sqrt(sum(np.vdot(g, g) for g in grads.values())))
