"""IMU samples, sliding-window segmentation and the synthetic voyage generator."""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import signal as sps

RATE_HZ = 100
WINDOW_S = 5
OFFSET_S = 3
WINDOW_SAMPLES = WINDOW_S * RATE_HZ


class StreamIntegrityError(ValueError):
    """Timestamps in a sample stream are not strictly increasing."""


class SampleFileError(ValueError):
    """A sample file record could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ImpactLabel(enum.IntEnum):
    Bow = 0
    Port = 1
    Starboard = 2
    None_ = 3

    @property
    def display(self) -> str:
        return "None" if self is ImpactLabel.None_ else self.name

    @classmethod
    def parse(cls, value) -> "ImpactLabel":
        """Accept an encoding (0..3), a label, or a name such as ``"None"``."""
        if isinstance(value, ImpactLabel):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return cls(int(value))
        if isinstance(value, str):
            key = "None_" if value == "None" else value
            try:
                return cls[key]
            except KeyError:
                pass
        raise ValueError(f"unknown impact label {value!r}")


LABEL_NAMES = tuple(lbl.display for lbl in ImpactLabel)


@dataclass(frozen=True)
class ImuSample:
    t_ns: int
    lin_acc: tuple[float, float, float]
    ang_vel: tuple[float, float, float]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.lin_acc, *self.ang_vel)):
            raise ValueError(f"non-finite IMU reading at t_ns={self.t_ns}")

    def as_row(self) -> tuple[float, ...]:
        return (*self.lin_acc, *self.ang_vel)


@dataclass(frozen=True)
class SampleWindow:
    """Fixed-length window of samples; ``data`` is (500, 6) float64."""

    device_id: int
    window_seq: int
    start_t_ns: int
    rate_hz: int
    t_ns: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != (WINDOW_SAMPLES, 6) or self.t_ns.shape != (WINDOW_SAMPLES,):
            raise ValueError(f"window must hold {WINDOW_SAMPLES} samples, got {self.data.shape}")

    @property
    def samples(self) -> list[ImuSample]:
        return [
            ImuSample(int(t), tuple(row[:3]), tuple(row[3:]))
            for t, row in zip(self.t_ns, self.data)
        ]

    def channels(self) -> np.ndarray:
        """(6, 500) array: lin_acc x,y,z then ang_vel x,y,z."""
        return self.data.T


@dataclass(frozen=True)
class ImpactScenario:
    label: ImpactLabel = ImpactLabel.None_
    impact_t_s: float = 2.5
    amplitude: float = 8.0
    decay_s: float = 0.5
    carrier_hz: float = 4.0
    sea_state_sigma: float = 0.3
    duration_s: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label", ImpactLabel.parse(self.label))
        if not 0.0 < self.carrier_hz < 10.0:
            raise ValueError("carrier_hz must lie in (0, 10)")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.duration_s < WINDOW_S:
            raise ValueError(f"duration_s must be >= {WINDOW_S}")
        if self.decay_s <= 0 or self.sea_state_sigma < 0:
            raise ValueError("decay_s must be > 0 and sea_state_sigma >= 0")

    def to_json(self) -> str:
        d = asdict(self)
        d["label"] = self.label.display
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ImpactScenario":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "ImpactScenario":
        return cls.from_json(Path(path).read_text())


# Axis signatures (ax, ay, az, gx, gy, gz) for each impact zone.
IMPACT_PATTERNS = {
    ImpactLabel.Bow: np.array([-1.0, 0.0, 0.15, 0.0, 0.08, 0.0]),
    ImpactLabel.Port: np.array([0.0, 1.0, 0.1, 0.25, 0.0, 0.04]),
    ImpactLabel.Starboard: np.array([0.0, -1.0, 0.1, -0.25, 0.0, -0.04]),
    ImpactLabel.None_: np.zeros(6),
}

_NOISE_SOS = sps.butter(4, 10.0, btype="low", fs=RATE_HZ, output="sos")


def _check_monotonic(t_ns: np.ndarray) -> None:
    if t_ns.size > 1:
        bad = np.flatnonzero(np.diff(t_ns) <= 0)
        if bad.size:
            raise StreamIntegrityError(
                f"timestamp at index {bad[0] + 1} does not increase "
                f"({t_ns[bad[0]]} -> {t_ns[bad[0] + 1]})"
            )


def window_stream(
    samples,
    rate_hz: int = RATE_HZ,
    window_s: float = WINDOW_S,
    offset_s: float = OFFSET_S,
    device_id: int = 0,
) -> list[SampleWindow]:
    """Cut a stream into overlapping windows; trailing partial windows are dropped.

    ``samples`` is either a sequence of :class:`ImuSample` or a pair
    ``(t_ns, data)`` of arrays shaped (S,) and (S, 6).
    """
    t_ns, data = _as_arrays(samples)
    _check_monotonic(t_ns)
    size = int(round(window_s * rate_hz))
    stride = int(round(offset_s * rate_hz))
    if size != WINDOW_SAMPLES:
        raise ValueError(f"window must hold {WINDOW_SAMPLES} samples")
    windows = []
    for k, start in enumerate(range(0, len(t_ns) - size + 1, stride)):
        windows.append(
            SampleWindow(
                device_id=device_id,
                window_seq=k,
                start_t_ns=int(t_ns[start]),
                rate_hz=rate_hz,
                t_ns=t_ns[start:start + size],
                data=data[start:start + size],
            )
        )
    return windows


def window_count(n_samples: int, size: int = WINDOW_SAMPLES, stride: int = OFFSET_S * RATE_HZ) -> int:
    if n_samples < size:
        return 0
    return (n_samples - size) // stride + 1


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        t_ns, data = samples
        return np.asarray(t_ns, dtype=np.int64), np.asarray(data, dtype=np.float64).reshape(-1, 6)
    samples = list(samples)
    t_ns = np.array([s.t_ns for s in samples], dtype=np.int64)
    data = np.array([s.as_row() for s in samples], dtype=np.float64).reshape(-1, 6)
    return t_ns, data


def to_samples(t_ns: np.ndarray, data: np.ndarray) -> list[ImuSample]:
    return [ImuSample(int(t), tuple(map(float, r[:3])), tuple(map(float, r[3:]))) for t, r in zip(t_ns, data)]


def synthesize_arrays(scenario: ImpactScenario, rate_hz: int = RATE_HZ) -> tuple[np.ndarray, np.ndarray]:
    """Generate ``(t_ns, data)`` for a scenario; ``data`` is (S, 6)."""
    n = int(round(scenario.duration_s * rate_hz))
    t_ns = np.arange(n, dtype=np.int64) * (1_000_000_000 // rate_hz)
    rng = np.random.default_rng(scenario.rng_seed)
    data = np.zeros((n, 6))
    if scenario.sea_state_sigma > 0:
        white = rng.standard_normal((n, 6))
        shaped = sps.sosfiltfilt(_NOISE_SOS, white, axis=0)
        shaped -= shaped.mean(axis=0)
        shaped /= shaped.std(axis=0)
        # angular-rate noise is an order of magnitude weaker than acceleration
        data += scenario.sea_state_sigma * shaped * np.array([1, 1, 1, 0.1, 0.1, 0.1])
    if scenario.label is not ImpactLabel.None_ and scenario.amplitude > 0:
        t = np.arange(n) / rate_hz
        dt = t - scenario.impact_t_s
        on = dt >= 0
        transient = np.zeros(n)
        transient[on] = (
            scenario.amplitude
            * np.exp(-dt[on] / scenario.decay_s)
            * np.sin(2 * np.pi * scenario.carrier_hz * dt[on])
        )
        data += transient[:, None] * IMPACT_PATTERNS[scenario.label][None, :]
    return t_ns, data


def window_labels(scenario: ImpactScenario, windows: Iterable[SampleWindow], rate_hz: int = RATE_HZ) -> list[ImpactLabel]:
    """Ground truth per window: the scenario label iff the impact time falls inside."""
    labels = []
    impact_ns = scenario.impact_t_s * 1e9
    span_ns = WINDOW_SAMPLES * (1_000_000_000 // rate_hz)
    for w in windows:
        inside = w.start_t_ns <= impact_ns < w.start_t_ns + span_ns
        labels.append(scenario.label if inside else ImpactLabel.None_)
    return labels


def synthesize_voyage(scenario: ImpactScenario, rate_hz: int = RATE_HZ) -> tuple[list[ImuSample], list[ImpactLabel]]:
    """Samples for a scenario plus the ground-truth label of each window."""
    t_ns, data = synthesize_arrays(scenario, rate_hz)
    windows = window_stream((t_ns, data), rate_hz)
    return to_samples(t_ns, data), window_labels(scenario, windows, rate_hz)


# ---------------------------------------------------------------- sample files


def write_sample_file(path, t_ns: np.ndarray, data: np.ndarray) -> None:
    with open(path, "w") as fh:
        for t, row in zip(t_ns, data):
            fh.write(f"{int(t)}," + ",".join(repr(float(v)) for v in row) + "\n")


def parse_sample_line(line: str, line_no: int) -> ImuSample:
    parts = line.strip().split(",")
    if len(parts) != 7:
        raise SampleFileError(line_no, f"expected 7 fields, got {len(parts)}")
    try:
        t = int(parts[0])
        vals = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise SampleFileError(line_no, str(exc)) from None
    try:
        return ImuSample(t, tuple(vals[:3]), tuple(vals[3:]))
    except ValueError as exc:
        raise SampleFileError(line_no, str(exc)) from None


def replay_file(path, speedup: float = math.inf, rate_hz: int = RATE_HZ) -> Iterator[ImuSample]:
    """Yield samples from a sample file, sleeping ``(1/rate_hz)/speedup`` between them.

    ``speedup=1`` is real time; ``math.inf`` disables pacing. Records are
    parsed before anything is emitted, so a malformed file raises without
    yielding partial output.
    """
    samples = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                samples.append(parse_sample_line(line, i))
    period = 0.0 if math.isinf(speedup) else 1.0 / (rate_hz * speedup)
    t0 = time.perf_counter()
    for k, s in enumerate(samples):
        if period:
            # schedule against the start time so sleep jitter does not accumulate
            delay = t0 + k * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        yield s


def parse_pacing(text: str) -> float:
    """``realtime`` -> 1, ``xN`` -> N, ``max`` -> inf."""
    if text == "realtime":
        return 1.0
    if text == "max":
        return math.inf
    if text.startswith("x"):
        n = float(text[1:])
        if n <= 0:
            raise ValueError("pacing multiplier must be positive")
        return n
    raise ValueError(f"bad pacing {text!r}; use realtime, xN or max")
