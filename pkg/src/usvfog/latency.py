"""Per-link latency profiles and truncated-Gaussian delay injection."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LinkDelay:
    mean_ms: float = 0.0
    std_ms: float = 0.0

    def __post_init__(self):
        if self.mean_ms < 0 or self.std_ms < 0:
            raise ValueError("mean_ms and std_ms must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.mean_ms == 0 and self.std_ms == 0

    @classmethod
    def parse(cls, text: str) -> "LinkDelay":
        """``"MEAN_MS,STD_MS"`` as used on the command line."""
        mean, _, std = text.partition(",")
        return cls(float(mean), float(std or 0.0))


@dataclass(frozen=True)
class LatencyProfile:
    iot_to_edge: LinkDelay = field(default_factory=LinkDelay)
    edge_cloud: LinkDelay = field(default_factory=LinkDelay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyProfile":
        return cls(LinkDelay(**d.get("iot_to_edge", {})), LinkDelay(**d.get("edge_cloud", {})))

    @classmethod
    def load(cls, path) -> "LatencyProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Delay profiles measured across regions in the original deployment.
MEASURED_PROFILES = {
    "iot_edge_vn_au": LinkDelay(282.96, 100.79),
    "edge_cloud_au_au": LinkDelay(210.15, 47.79),
    "edge_cloud_au_sg": LinkDelay(583.66, 152.11),
}


class DelayInjector:
    """Draws delays from N(mean, std) truncated at zero (by rejection) and sleeps them."""

    def __init__(self, delay: LinkDelay, seed: int | None = None):
        self.delay = delay
        self._rng = np.random.default_rng(seed)
        self._lock = threading.Lock()
        self.drawn_ms: list[float] = []

    def draw_ms(self) -> float:
        if self.delay.is_zero:
            return 0.0
        with self._lock:
            while True:
                v = self._rng.normal(self.delay.mean_ms, self.delay.std_ms)
                if v >= 0.0:
                    break
            self.drawn_ms.append(float(v))
        return float(v)

    def sleep(self) -> float:
        ms = self.draw_ms()
        if ms > 0:
            precise_sleep(ms / 1000.0)
        return ms


def precise_sleep(seconds: float) -> None:
    """Sleep with sub-millisecond accuracy by spinning through the last stretch."""
    end = time.perf_counter() + seconds
    while True:
        left = end - time.perf_counter()
        if left <= 0:
            return
        time.sleep(left - 0.001 if left > 0.002 else 0)
