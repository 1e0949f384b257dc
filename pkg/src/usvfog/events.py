"""CollisionEvent record exchanged between Edge and Cloud, with its JSON schema."""

from __future__ import annotations

import math
import uuid
from dataclasses import asdict, dataclass

from usvfog.signal_core import LABEL_NAMES

EVENT_NAMESPACE = uuid.UUID("5b0e7d1a-6a43-4c8e-9d52-0c3f51b2a9e4")

# field -> (accepted types, required)
EVENT_FIELDS = {
    "event_id": (str, True),
    "device_id": (int, True),
    "window_seq": (int, True),
    "t_window_start_ns": (int, True),
    "label": (str, True),
    "probs": (list, True),
    "scalogram_digest": (str, True),
    "edge_processing_ms": ((int, float), True),
    "human_validation": ((str, type(None)), False),
    "scalogram_scg1_b64": ((str, type(None)), False),
}


class SchemaError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def make_event_id(device_id: int, window_seq: int, t_acquired_ns: int) -> str:
    """Stable id for one acquired window, so resends map to the same event."""
    return uuid.uuid5(EVENT_NAMESPACE, f"{device_id}:{window_seq}:{t_acquired_ns}").hex


@dataclass
class CollisionEvent:
    event_id: str
    device_id: int
    window_seq: int
    t_window_start_ns: int
    label: str
    probs: list[float]
    scalogram_digest: str
    edge_processing_ms: float
    human_validation: str | None = None
    scalogram_scg1_b64: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["scalogram_scg1_b64"] is None:
            del d["scalogram_scg1_b64"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CollisionEvent":
        validate_event(d)
        return cls(**{k: d.get(k) for k in EVENT_FIELDS})


def validate_event(d) -> None:
    """Raise SchemaError naming the first offending field."""
    if not isinstance(d, dict):
        raise SchemaError("body", "expected a JSON object")
    for name, (types, required) in EVENT_FIELDS.items():
        if name not in d:
            if required:
                raise SchemaError(name, "missing required field")
            continue
        value = d[name]
        if isinstance(value, bool) or not isinstance(value, types):
            raise SchemaError(name, f"wrong type {type(value).__name__}")
    unknown = set(d) - set(EVENT_FIELDS)
    if unknown:
        raise SchemaError(sorted(unknown)[0], "unknown field")
    try:
        uuid.UUID(hex=d["event_id"])
    except ValueError:
        raise SchemaError("event_id", "not a 128-bit hex id") from None
    for name in ("device_id", "window_seq", "t_window_start_ns"):
        if d[name] < 0:
            raise SchemaError(name, "must be >= 0")
    if d["label"] not in LABEL_NAMES:
        raise SchemaError("label", f"must be one of {LABEL_NAMES}")
    probs = d["probs"]
    if len(probs) != len(LABEL_NAMES) or not all(
        isinstance(p, (int, float)) and not isinstance(p, bool) and math.isfinite(p) and 0 <= p <= 1 for p in probs
    ):
        raise SchemaError("probs", "expected 4 probabilities in [0, 1]")
    if abs(sum(probs) - 1.0) > 1e-6:
        raise SchemaError("probs", "probabilities must sum to 1")
    top = max(range(len(probs)), key=lambda i: (probs[i], -i))
    if LABEL_NAMES[top] != d["label"]:
        raise SchemaError("label", "label must be the argmax of probs")
    if len(d["scalogram_digest"]) != 64:
        raise SchemaError("scalogram_digest", "expected a 256-bit hex digest")
    try:
        int(d["scalogram_digest"], 16)
    except ValueError:
        raise SchemaError("scalogram_digest", "expected a 256-bit hex digest") from None
    if not math.isfinite(d["edge_processing_ms"]) or d["edge_processing_ms"] < 0:
        raise SchemaError("edge_processing_ms", "must be a finite value >= 0")


EVENT_JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "CollisionEvent",
    "type": "object",
    "additionalProperties": False,
    "required": [k for k, (_, req) in EVENT_FIELDS.items() if req],
    "properties": {
        "event_id": {"type": "string", "pattern": "^[0-9a-f]{32}$"},
        "device_id": {"type": "integer", "minimum": 0},
        "window_seq": {"type": "integer", "minimum": 0},
        "t_window_start_ns": {"type": "integer", "minimum": 0},
        "label": {"enum": list(LABEL_NAMES)},
        "probs": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                  "minItems": 4, "maxItems": 4},
        "scalogram_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "edge_processing_ms": {"type": "number", "minimum": 0},
        "human_validation": {"type": ["string", "null"]},
        "scalogram_scg1_b64": {"type": ["string", "null"]},
    },
}
