"""Cloud tier: HTTP ingestion and query of collision events over an append-only JSON-lines store.

Endpoints::

    POST  /events                    201 {"event_id"} | 200 on duplicate | 400 | 503
    GET   /events?device=&label=&since=&until=&limit=
    GET   /stats
    PATCH /events/{id}/validation    {"human_validation": text}
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from usvfog.events import SchemaError, validate_event
from usvfog.latency import DelayInjector, LinkDelay
from usvfog.signal_core import LABEL_NAMES

log = logging.getLogger(__name__)

STORE_FILE = "events.jsonl"
DEFAULT_LIMIT = 1000


class StoreError(OSError):
    pass


class EventStore:
    """Append-only log of event and validation records with an in-memory index.

    Every write is flushed and fsynced before it is acknowledged; the index is
    rebuilt by replaying the log on startup.
    """

    def __init__(self, data_dir):
        self.path = Path(data_dir) / STORE_FILE
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._events: list[dict] = []
        self._index: dict[str, int] = {}
        self._replay()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _replay(self) -> None:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    # a torn final write is the only expected corruption
                    log.warning("%s:%d: skipping unreadable record", self.path, line_no)
                    continue
                self._apply(rec)

    def _apply(self, rec: dict) -> None:
        if rec["op"] == "event":
            ev = rec["event"]
            if ev["event_id"] not in self._index:
                self._index[ev["event_id"]] = len(self._events)
                self._events.append(ev)
        elif rec["op"] == "validation":
            ev = self._events[self._index[rec["event_id"]]]
            ev["human_validation"] = rec["human_validation"]
            ev.setdefault("validation_audit", []).append(rec["t_audit_ns"])

    def _append(self, rec: dict) -> None:
        try:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())
        except OSError as exc:
            raise StoreError(str(exc)) from exc

    def add(self, event: dict, source: str) -> bool:
        """Persist an event; False if its id is already stored."""
        with self._lock:
            if event["event_id"] in self._index:
                return False
            stored = dict(event)
            stored.setdefault("human_validation", None)
            stored["t_received_ns"] = time.time_ns()
            stored["source"] = source
            rec = {"op": "event", "event": stored}
            self._append(rec)
            self._apply(rec)
            return True

    def set_validation(self, event_id: str, text: str) -> dict | None:
        with self._lock:
            if event_id not in self._index:
                return None
            rec = {"op": "validation", "event_id": event_id, "human_validation": text,
                   "t_audit_ns": time.time_ns()}
            self._append(rec)
            self._apply(rec)
            return dict(self._events[self._index[event_id]])

    def get(self, event_id: str) -> dict | None:
        with self._lock:
            i = self._index.get(event_id)
            return None if i is None else dict(self._events[i])

    def query(self, device=None, label=None, since=None, until=None, limit=DEFAULT_LIMIT) -> list[dict]:
        with self._lock:
            events = list(self._events)
        out = []
        for ev in sorted(events, key=lambda e: e["t_received_ns"]):
            if device is not None and ev["device_id"] != device:
                continue
            if label is not None and ev["label"] != label:
                continue
            if since is not None and ev["t_received_ns"] < since:
                continue
            if until is not None and ev["t_received_ns"] > until:
                continue
            out.append(dict(ev))
            if len(out) >= limit:
                break
        return out

    def stats(self) -> dict:
        with self._lock:
            events = list(self._events)
        counts = {name: 0 for name in LABEL_NAMES}
        for ev in events:
            counts[ev["label"]] += 1
        mean_ms = None
        if events:
            mean_ms = float(sum(float(ev["edge_processing_ms"]) for ev in events) / len(events))
        per_hour = None
        if len(events) >= 2:
            ts = [ev["t_received_ns"] for ev in events]
            span_h = (max(ts) - min(ts)) / 3.6e12
            if span_h > 0:
                per_hour = len(events) / span_h
        return {"total": len(events), "counts": counts, "events_per_hour": per_hour,
                "mean_edge_processing_ms": mean_ms}

    def __len__(self) -> int:
        return len(self._events)

    def close(self) -> None:
        self._fh.close()


class _Handler(BaseHTTPRequestHandler):
    server: "CloudServer"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - " + fmt, self.address_string(), *args)

    def _send(self, status: int, body) -> None:
        self.server.hold()
        raw = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def _error(self, status: int, message: str, field: str | None = None) -> None:
        body = {"error": message}
        if field is not None:
            body["field"] = field
        self._send(status, body)

    def _body(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        return json.loads(raw or b"null")

    def do_POST(self):
        if urlparse(self.path).path != "/events":
            return self._error(404, "not found")
        try:
            event = self._body()
            validate_event(event)
        except json.JSONDecodeError as exc:
            return self._error(400, f"invalid JSON: {exc}", "body")
        except SchemaError as exc:
            return self._error(400, str(exc), exc.field)
        try:
            created = self.server.store.add(event, f"{self.client_address[0]}:{self.client_address[1]}")
        except StoreError as exc:
            return self._error(503, f"storage failure: {exc}")
        self._send(201 if created else 200, {"event_id": event["event_id"]})

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/stats":
            return self._send(200, self.server.store.stats())
        if url.path.startswith("/events/"):
            ev = self.server.store.get(url.path.split("/")[2])
            return self._send(200, ev) if ev else self._error(404, "unknown event id")
        if url.path != "/events":
            return self._error(404, "not found")
        q = parse_qs(url.query, keep_blank_values=True)
        try:
            args = _query_args(q)
        except ValueError as exc:
            return self._error(400, str(exc), exc.args[1] if len(exc.args) > 1 else None)
        self._send(200, self.server.store.query(**args))

    def do_PATCH(self):
        parts = urlparse(self.path).path.strip("/").split("/")
        if len(parts) != 3 or parts[0] != "events" or parts[2] != "validation":
            return self._error(404, "not found")
        try:
            body = self._body()
        except json.JSONDecodeError as exc:
            return self._error(400, f"invalid JSON: {exc}", "body")
        if not isinstance(body, dict) or not isinstance(body.get("human_validation"), str):
            return self._error(400, "human_validation must be a string", "human_validation")
        try:
            ev = self.server.store.set_validation(parts[1], body["human_validation"])
        except StoreError as exc:
            return self._error(503, f"storage failure: {exc}")
        if ev is None:
            return self._error(404, "unknown event id")
        self._send(200, ev)


def _query_args(q: dict) -> dict:
    def one(name):
        vals = q.get(name)
        if not vals:
            return None
        if len(vals) > 1:
            raise ValueError(f"{name} given more than once", name)
        return vals[0]

    unknown = set(q) - {"device", "label", "since", "until", "limit"}
    if unknown:
        name = sorted(unknown)[0]
        raise ValueError(f"unknown query parameter {name}", name)
    args = {}
    for name in ("device", "since", "until", "limit"):
        v = one(name)
        if v is None:
            continue
        try:
            n = int(v)
        except ValueError:
            raise ValueError(f"{name} must be an integer", name) from None
        if n < 0 or (name == "limit" and n == 0):
            raise ValueError(f"{name} out of range", name)
        args[name] = n
    label = one("label")
    if label is not None:
        if label not in LABEL_NAMES:
            raise ValueError(f"label must be one of {LABEL_NAMES}", "label")
        args["label"] = label
    return args


class CloudServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], data_dir, delay: LinkDelay | None = None,
                 delay_seed: int | None = None):
        self.store = EventStore(data_dir)
        self.injector = DelayInjector(delay or LinkDelay(), delay_seed)
        super().__init__(address, _Handler)

    def hold(self) -> None:
        """Emulated network delay before each response."""
        self.injector.sleep()

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, args=(0.05,), name="cloud-node", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        self.store.close()
