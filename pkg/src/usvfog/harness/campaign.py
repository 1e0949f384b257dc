"""Labeled synthetic campaigns and their trip through IoT -> Edge -> Cloud on loopback."""

from __future__ import annotations

import io
import json
import logging
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from usvfog.classifier.model import Weights
from usvfog.cloud_node import CloudServer
from usvfog.edge_node import DecisionPolicy, EdgeServer
from usvfog.events import make_event_id
from usvfog.iot_node import EdgeLink
from usvfog.latency import LatencyProfile
from usvfog.signal_core import (
    WINDOW_S,
    ImpactLabel,
    ImpactScenario,
    synthesize_arrays,
    window_labels,
    window_stream,
)
from usvfog.wavelet import window_scalogram

log = logging.getLogger(__name__)

RUN_LOG_SCHEMA = "usvfog.runlog/1"


class TierStartError(RuntimeError):
    def __init__(self, tier: str, cause: BaseException):
        super().__init__(f"{tier} tier failed to start: {cause}")
        self.tier = tier


@dataclass(frozen=True)
class ScenarioRanges:
    """Uniform sampling ranges for randomized trials.

    Each impact zone has its own carrier band. A scalogram keeps only CWT
    magnitudes, so the mirror-image Port and Starboard signatures would be
    indistinguishable if they shared one; the bands stand in for the
    side-dependent hull response of an off-centre sensor.
    """

    impact_t_s: tuple[float, float] = (0.75, 4.25)
    amplitude: tuple[float, float] = (5.0, 11.0)
    decay_s: tuple[float, float] = (0.3, 0.8)
    sea_state_sigma: tuple[float, float] = (0.15, 0.45)
    carrier_hz: dict = field(default_factory=lambda: {
        "Bow": (3.5, 4.5),
        "Port": (5.5, 7.0),
        "Starboard": (2.0, 3.0),
        "None": (3.0, 5.0),
    })

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioRanges":
        d = dict(d)
        for k in ("impact_t_s", "amplitude", "decay_s", "sea_state_sigma"):
            if k in d:
                d[k] = tuple(d[k])
        if "carrier_hz" in d:
            d["carrier_hz"] = {k: tuple(v) for k, v in d["carrier_hz"].items()}
        return cls(**d)


@dataclass(frozen=True)
class CampaignConfig:
    per_class: int = 10
    total: int = 0
    seed: int = 0
    ranges: ScenarioRanges = field(default_factory=ScenarioRanges)
    profile: LatencyProfile = field(default_factory=LatencyProfile)
    device_id: int = 1
    policy: DecisionPolicy = field(default_factory=DecisionPolicy)

    @property
    def n_trials(self) -> int:
        return max(self.total, 4 * self.per_class)

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "total": self.total,
            "seed": self.seed,
            "ranges": self.ranges.to_dict(),
            "profile": self.profile.to_dict(),
            "device_id": self.device_id,
            "policy": asdict(self.policy),
        }


def campaign_scenarios(config: CampaignConfig) -> list[ImpactScenario]:
    """Balanced, shuffled, single-window scenarios; every label gets at least ``per_class``."""
    rng = np.random.default_rng(config.seed)
    labels = [ImpactLabel(i % 4) for i in range(config.n_trials)]
    rng.shuffle(labels)
    r = config.ranges
    out = []
    for lbl in labels:
        out.append(ImpactScenario(
            label=lbl,
            impact_t_s=float(rng.uniform(*r.impact_t_s)),
            amplitude=float(rng.uniform(*r.amplitude)),
            decay_s=float(rng.uniform(*r.decay_s)),
            carrier_hz=float(rng.uniform(*r.carrier_hz[lbl.display])),
            sea_state_sigma=float(rng.uniform(*r.sea_state_sigma)),
            duration_s=float(WINDOW_S),
            rng_seed=int(rng.integers(2**32)),
        ))
    return out


def scenario_window(scenario: ImpactScenario):
    """The single window of a campaign scenario and its ground-truth label."""
    t_ns, data = synthesize_arrays(scenario)
    windows = window_stream((t_ns, data))
    return windows[0], window_labels(scenario, windows)[0]


def training_set(per_class: int = 40, seed: int = 1000, ranges: ScenarioRanges | None = None):
    """Scalograms and labels for a generated campaign, (N, 6, 150, 192) float32 and (N,)."""
    cfg = CampaignConfig(per_class=per_class, seed=seed, ranges=ranges or ScenarioRanges())
    xs, ys = [], []
    for sc in campaign_scenarios(cfg):
        w, truth = scenario_window(sc)
        xs.append(window_scalogram(w.channels()))
        ys.append(int(truth))
    return np.stack(xs), np.array(ys, dtype=np.int64)


def run_campaign(config: CampaignConfig, weights: Weights, workdir=None, host: str = "127.0.0.1",
                 progress=None) -> dict:
    """Send every trial window through live IoT, Edge and Cloud tiers and collect a run log.

    Trials run one at a time. All tiers share this host's monotonic clock, so
    IoT -> Edge latency is a true one-way figure; Edge <-> Cloud is an RTT.
    """
    scenarios = campaign_scenarios(config)
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="usvfog-campaign-")
        workdir = tmp.name
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    started = []
    try:
        try:
            cloud = CloudServer((host, 0), workdir / "cloud", config.profile.edge_cloud,
                                delay_seed=config.seed + 1)
            cloud.start()
            started.append(cloud)
        except Exception as exc:
            raise TierStartError("cloud", exc) from exc
        try:
            edge_log = io.StringIO()
            edge = EdgeServer((host, 0), weights, cloud.url, config.policy,
                              spool_path=workdir / "spool.jsonl", log_stream=edge_log)
            edge.start()
            started.append(edge)
        except Exception as exc:
            raise TierStartError("edge", exc) from exc
        try:
            link = EdgeLink(edge.address, config.device_id, retries=3,
                            delay=config.profile.iot_to_edge, delay_seed=config.seed + 2)
            link.connect()
        except Exception as exc:
            raise TierStartError("iot", exc) from exc

        trials = []
        t_start = time.monotonic()
        for i, sc in enumerate(scenarios):
            window, truth = scenario_window(sc)
            t_acq = time.monotonic_ns()
            sent = link.deliver(window, t_acq, seq=i)
            rec = edge.wait_for(make_event_id(config.device_id, i, t_acq))
            trials.append({
                "trial": i,
                "scenario": json.loads(sc.to_json()),
                "truth": truth.display,
                "pred": rec.label,
                "probs": rec.probs,
                "alert": rec.alert,
                "event_id": rec.event_id,
                "iot_processing_ms": sent.processing_ms,
                "injected_iot_to_edge_ms": sent.injected_ms,
                "iot_to_edge_ms": rec.iot_to_edge_ms,
                "cwt_ms": rec.cwt_ms,
                "cnn_ms": rec.cnn_ms,
                "edge_ms": rec.edge_ms,
            })
            if progress is not None:
                progress(i, trials[-1])
        link.close()
        edge.forwarder.drain(timeout=120)
        by_id = {r.event_id: r for r in edge.forwarder.results}
        for t in trials:
            res = by_id.get(t["event_id"])
            t["edge_cloud_rtt_ms"] = res.rtt_ms if res is not None and res.delivered else None
            t["delivered"] = bool(res is not None and res.delivered)
        stored = len(cloud.store)
        wall_s = time.monotonic() - t_start
    finally:
        for tier in reversed(started):
            tier.stop()
        if tmp is not None:
            tmp.cleanup()
    return {
        "schema": RUN_LOG_SCHEMA,
        "config": config.to_dict(),
        "weights": {"seed": weights.seed, "epochs": weights.epochs, "final_loss": weights.final_loss},
        "trials": trials,
        "cloud": {"stored_events": stored},
        "wall_time_s": wall_s,
    }


def save_run_log(run_log: dict, path) -> None:
    Path(path).write_text(json.dumps(run_log, indent=1, sort_keys=True))


def load_run_log(path) -> dict:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != RUN_LOG_SCHEMA:
        raise ValueError(f"{path}: not a {RUN_LOG_SCHEMA} run log")
    return d
