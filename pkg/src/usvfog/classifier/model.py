"""Weights container, inference entry point and the MNV2 weight file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from usvfog.classifier.network import NetworkConfig, forward_logits, init_params, softmax

MAGIC = b"MNV2"
VERSION = 1


class WeightFileError(ValueError):
    """Weight file is malformed or was written for a different network config."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Weights:
    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0
    epochs: int = 0
    final_loss: float = float("nan")
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        shapes = self.config.param_shapes()
        if list(self.tensors) != list(shapes):
            missing = set(shapes) ^ set(self.tensors)
            raise ValueError(f"tensor names do not match config: {sorted(missing) or 'order'}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ValueError(f"{name}: non-finite values")

    @classmethod
    def initial(cls, config: NetworkConfig | None = None, seed: int = 0) -> "Weights":
        config = config or NetworkConfig()
        return cls(config, init_params(config, seed), seed=seed)

    @classmethod
    def zeros(cls, config: NetworkConfig | None = None) -> "Weights":
        config = config or NetworkConfig()
        shapes = config.param_shapes()
        return cls(config, {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()})

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


def forward(weights: Weights, scalogram: np.ndarray) -> np.ndarray:
    """Class probabilities (Bow, Port, Starboard, None) for one (6, 150, 192) scalogram."""
    x = np.asarray(scalogram)
    if x.ndim == 3:
        x = x[None]
    x = x.astype(next(iter(weights.tensors.values())).dtype, copy=False)
    logits = forward_logits(weights.tensors, weights.config, x)
    probs = softmax(logits.astype(np.float64))
    return probs[0] if np.asarray(scalogram).ndim == 3 else probs


def predict(weights: Weights, scalograms: np.ndarray, batch: int = 16) -> np.ndarray:
    """Probabilities for a stack of scalograms, (N, 4)."""
    out = [forward(weights, scalograms[i:i + batch]) for i in range(0, len(scalograms), batch)]
    return np.concatenate(out) if out else np.zeros((0, weights.config.n_classes))


# ---------------------------------------------------------------- file format
#
# magic "MNV2" | u16 version | 32-byte config hash | u32 seed | u32 epochs |
# f64 final loss | u32 config-json length | config json | u32 tensor count |
# per tensor: u16 name length, name, u8 ndim, u32 dims, little-endian f32 data.
# All integers are little-endian.


def save_weights(weights: Weights, path) -> None:
    cfg = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        weights.config.config_hash(),
        struct.pack("<IId", weights.seed, weights.epochs, weights.final_loss),
        struct.pack("<I", len(cfg)),
        cfg,
        struct.pack("<I", len(weights.tensors)),
    ]
    for name, arr in weights.tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightFileError(what, f"file truncated (need {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path, config: NetworkConfig | None = None) -> Weights:
    """Read a weight file; if ``config`` is given its hash must match the file's."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("magic", "not an MNV2 weight file")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise WeightFileError("version", f"unsupported version {version}")
    file_hash = r.take(32, "config_hash")
    seed, epochs, loss = r.unpack("<IId", "metadata")
    (cfg_len,) = r.unpack("<I", "config")
    try:
        file_config = NetworkConfig.from_dict(json.loads(r.take(cfg_len, "config")))
    except (ValueError, TypeError, KeyError) as exc:
        raise WeightFileError("config", f"unreadable config ({exc})") from None
    if file_config.config_hash() != file_hash:
        raise WeightFileError("config_hash", "stored config does not match stored hash")
    if config is not None and config.config_hash() != file_hash:
        raise WeightFileError("config_hash", "weights were trained for a different network config")
    config = file_config
    (count,) = r.unpack("<I", "tensor_count")
    shapes = config.param_shapes()
    if count != len(shapes):
        raise WeightFileError("tensor_count", f"{count} tensors, config expects {len(shapes)}")
    tensors = {}
    for expected in shapes:
        (nlen,) = r.unpack("<H", "tensor_name")
        name = r.take(nlen, "tensor_name").decode(errors="replace")
        if name != expected:
            raise WeightFileError("tensor_name", f"expected {expected!r}, found {name!r}")
        (ndim,) = r.unpack("<B", name)
        dims = r.unpack(f"<{ndim}I", name)
        if tuple(dims) != shapes[name]:
            raise WeightFileError(name, f"shape {dims} != {shapes[name]}")
        data = r.take(4 * int(np.prod(dims)), name)
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.blob):
        raise WeightFileError("trailer", f"{len(r.blob) - r.pos} unexpected trailing bytes")
    return Weights(config, tensors, seed=seed, epochs=epochs, final_loss=loss)
