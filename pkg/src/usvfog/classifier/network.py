"""Miniature inverted-residual CNN over 6x150x192 scalograms.

Activations are kept channels-last (N, H, W, C) internally so the depthwise
kernels vectorize over channels; the public input is a channel-major
scalogram batch (N, C, H, W). Batch norm is folded into a per-channel
``scale``/``bias`` pair that is trained directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from usvfog.classifier import kernels

N_CLASSES = 4


@dataclass(frozen=True)
class BlockSpec:
    expansion: int
    out_channels: int
    stride: int
    residual: bool = False


DEFAULT_BLOCKS = (
    BlockSpec(6, 16, 1),
    BlockSpec(6, 24, 2),
    BlockSpec(6, 24, 1, residual=True),
    BlockSpec(6, 32, 2),
)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description; its hash travels with every weight file."""

    in_channels: int = 6
    height: int = 150
    width: int = 192
    stem_channels: int = 16
    blocks: tuple[BlockSpec, ...] = field(default=DEFAULT_BLOCKS)
    n_classes: int = N_CLASSES

    def __post_init__(self):
        c = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.residual and not (b.stride == 1 and b.out_channels == c):
                raise ValueError(
                    f"block {i}: residual needs stride 1 and equal channels"
                )
            c = b.out_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)

    def config_hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Ordered parameter names and shapes.

        Dense kernels are (out, in, 3, 3), depthwise (C, 3, 3), pointwise
        (out, in).
        """
        shapes: dict[str, tuple[int, ...]] = {}
        c = self.stem_channels
        shapes["stem.w"] = (c, self.in_channels, 3, 3)
        shapes["stem.scale"] = (c,)
        shapes["stem.bias"] = (c,)
        for i, b in enumerate(self.blocks):
            e = c * b.expansion
            p = f"block{i}"
            shapes[f"{p}.expand.w"] = (e, c)
            shapes[f"{p}.expand.scale"] = (e,)
            shapes[f"{p}.expand.bias"] = (e,)
            shapes[f"{p}.dw.w"] = (e, 3, 3)
            shapes[f"{p}.dw.scale"] = (e,)
            shapes[f"{p}.dw.bias"] = (e,)
            shapes[f"{p}.project.w"] = (b.out_channels, e)
            shapes[f"{p}.project.scale"] = (b.out_channels,)
            shapes[f"{p}.project.bias"] = (b.out_channels,)
            c = b.out_channels
        shapes["head.w"] = (self.n_classes, c)
        shapes["head.b"] = (self.n_classes,)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def init_params(config: NetworkConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal conv weights, unit scales, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".scale"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".b")):
            arr = np.zeros(shape)
        else:
            fan_in = 9 if name.endswith("dw.w") else int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = arr.astype(dtype)
    # residual branches start near identity
    for i, b in enumerate(config.blocks):
        if b.residual:
            params[f"block{i}.project.scale"][:] = 0.1
    return params


def out_size(n: int, stride: int) -> int:
    """Spatial output length of a 3x3 convolution with padding 1."""
    return (n + 2 - 3) // stride + 1


# ---------------------------------------------------------------- layers (NHWC)


def conv3x3_forward(x, w, stride):
    """Dense 3x3 convolution, padding 1. ``w`` is (out, in, 3, 3).

    Returns the output and the im2col matrix needed by the backward pass.
    """
    n, h, wd, c = x.shape
    ho, wo = out_size(h, stride), out_size(wd, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, ho, wo, 3, 3, c), dtype=x.dtype)
    for a in range(3):
        for b in range(3):
            cols[:, :, :, a, b] = xp[:, a:a + stride * (ho - 1) + 1:stride,
                                     b:b + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(n * ho * wo, 9 * c)
    wmat = w.transpose(2, 3, 1, 0).reshape(9 * c, w.shape[0])
    return (cols @ wmat).reshape(n, ho, wo, w.shape[0]), cols


def conv3x3_backward_w(dout, cols, w_shape):
    o, c = w_shape[:2]
    dwmat = cols.T @ dout.reshape(-1, o)
    return dwmat.reshape(3, 3, c, o).transpose(3, 2, 0, 1).copy()


def depthwise_forward(x, w, stride):
    """Per-channel 3x3 convolution, padding 1; ``w`` is (C, 3, 3)."""
    n, h, wd, c = x.shape
    wk = np.ascontiguousarray(w.transpose(1, 2, 0))
    return kernels.depthwise_forward(x, wk, stride, out_size(h, stride), out_size(wd, stride))


def depthwise_backward(dout, x, w, stride):
    wk = np.ascontiguousarray(w.transpose(1, 2, 0))
    dx, dwk = kernels.depthwise_backward(np.ascontiguousarray(dout), x, wk, stride)
    return dx, np.ascontiguousarray(dwk.transpose(2, 0, 1))


def pointwise_forward(x, w):
    return x @ w.T


def pointwise_backward(dout, x, w):
    o, c = w.shape
    d = dout.reshape(-1, o)
    dw = d.T @ x.reshape(-1, c)
    dx = (d @ w).reshape(x.shape)
    return dx, dw


def relu6(x):
    return np.clip(x, 0.0, 6.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- network


def forward_logits(params: dict, config: NetworkConfig, x: np.ndarray, keep: bool = False):
    """Batched forward pass over (N, C, H, W) input.

    With ``keep=True`` also returns the activation cache for :func:`backward`.
    """
    if x.ndim != 4 or x.shape[1:] != (config.in_channels, config.height, config.width):
        raise ValueError(
            f"input shape {x.shape[1:]} does not match "
            f"{(config.in_channels, config.height, config.width)}"
        )
    x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if not keep:
        return _forward_infer(params, config, x)
    cache = {}
    z, cols = conv3x3_forward(x, params["stem.w"], 2)
    a = z * params["stem.scale"] + params["stem.bias"]
    h = relu6(a)
    cache["stem"] = (cols, z, a)
    for i, b in enumerate(config.blocks):
        p = f"block{i}"
        h_in = h
        z1 = pointwise_forward(h_in, params[f"{p}.expand.w"])
        a1 = z1 * params[f"{p}.expand.scale"] + params[f"{p}.expand.bias"]
        h1 = relu6(a1)
        z2 = depthwise_forward(h1, params[f"{p}.dw.w"], b.stride)
        a2 = z2 * params[f"{p}.dw.scale"] + params[f"{p}.dw.bias"]
        h2 = relu6(a2)
        z3 = pointwise_forward(h2, params[f"{p}.project.w"])
        h = z3 * params[f"{p}.project.scale"] + params[f"{p}.project.bias"]
        if b.residual:
            h = h + h_in
        cache[p] = (h_in, z1, a1, h1, z2, a2, h2, z3)
    pooled = h.mean(axis=(1, 2))
    logits = pooled @ params["head.w"].T + params["head.b"]
    cache["head"] = (h.shape, pooled)
    return logits, cache


def _affine_relu6_(z, scale, bias):
    z *= scale
    z += bias
    return np.clip(z, 0.0, 6.0, out=z)


def _forward_infer(params, config, x):
    """Same arithmetic as the training path, in place and without a cache."""
    z, _ = conv3x3_forward(x, params["stem.w"], 2)
    h = _affine_relu6_(z, params["stem.scale"], params["stem.bias"])
    for i, b in enumerate(config.blocks):
        p = f"block{i}"
        h1 = _affine_relu6_(pointwise_forward(h, params[f"{p}.expand.w"]),
                            params[f"{p}.expand.scale"], params[f"{p}.expand.bias"])
        h2 = _affine_relu6_(depthwise_forward(h1, params[f"{p}.dw.w"], b.stride),
                            params[f"{p}.dw.scale"], params[f"{p}.dw.bias"])
        out = pointwise_forward(h2, params[f"{p}.project.w"])
        out *= params[f"{p}.project.scale"]
        out += params[f"{p}.project.bias"]
        if b.residual:
            out += h
        h = out
    pooled = h.mean(axis=(1, 2))
    return pooled @ params["head.w"].T + params["head.b"]


def _relu6_grad(dy, a):
    return dy * ((a > 0.0) & (a < 6.0))


def _affine_grads(dy, z, grads, prefix):
    c = dy.shape[-1]
    grads[f"{prefix}.scale"] = np.einsum("pc,pc->c", dy.reshape(-1, c), z.reshape(-1, c))
    grads[f"{prefix}.bias"] = dy.reshape(-1, c).sum(axis=0)


def backward(params: dict, config: NetworkConfig, cache: dict, dlogits: np.ndarray) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits."""
    grads = {}
    h_shape, pooled = cache["head"]
    grads["head.w"] = dlogits.T @ pooled
    grads["head.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["head.w"]
    hw = h_shape[1] * h_shape[2]
    dh = np.broadcast_to((dpooled / hw)[:, None, None, :], h_shape).astype(dlogits.dtype)
    for i in reversed(range(len(config.blocks))):
        b = config.blocks[i]
        p = f"block{i}"
        h_in, z1, a1, h1, z2, a2, h2, z3 = cache[p]
        _affine_grads(dh, z3, grads, f"{p}.project")
        dz3 = dh * params[f"{p}.project.scale"]
        dh2, grads[f"{p}.project.w"] = pointwise_backward(dz3, h2, params[f"{p}.project.w"])
        da2 = _relu6_grad(dh2, a2)
        _affine_grads(da2, z2, grads, f"{p}.dw")
        dz2 = da2 * params[f"{p}.dw.scale"]
        dh1, grads[f"{p}.dw.w"] = depthwise_backward(dz2, h1, params[f"{p}.dw.w"], b.stride)
        da1 = _relu6_grad(dh1, a1)
        _affine_grads(da1, z1, grads, f"{p}.expand")
        dz1 = da1 * params[f"{p}.expand.scale"]
        dh_in, grads[f"{p}.expand.w"] = pointwise_backward(dz1, h_in, params[f"{p}.expand.w"])
        if b.residual:
            dh_in = dh_in + dh
        dh = dh_in
    cols, z, a = cache["stem"]
    da = _relu6_grad(dh, a)
    _affine_grads(da, z, grads, "stem")
    dz = da * params["stem.scale"]
    grads["stem.w"] = conv3x3_backward_w(dz, cols, params["stem.w"].shape)
    return {k: grads[k] for k in params}


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. logits."""
    probs = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.log(np.maximum(probs[idx, labels], 1e-300)).mean())
    d = probs.copy()
    d[idx, labels] -= 1.0
    return loss, d / n
