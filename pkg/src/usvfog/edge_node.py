"""Edge tier: classify incoming windows, raise alerts and forward events to the Cloud."""

from __future__ import annotations

import base64
import collections
import http.client
import json
import logging
import queue
import socket
import socketserver
import sys
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from urllib.parse import urlparse

import numpy as np

from usvfog import protocol
from usvfog.classifier.model import Weights, forward
from usvfog.events import CollisionEvent, make_event_id
from usvfog.signal_core import ImpactLabel
from usvfog.wavelet import morlet_cwt_batch, scalogram_bytes, scalogram_digest, to_scalogram

log = logging.getLogger(__name__)

FORWARD_RETRIES = 3
RETRY_SPACING_S = 0.2
FORWARD_QUEUE = 256


@dataclass(frozen=True)
class StageTimings:
    cwt_ms: float
    cnn_ms: float

    @property
    def total_ms(self) -> float:
        return self.cwt_ms + self.cnn_ms


@dataclass(frozen=True)
class DecisionPolicy:
    confidence_threshold: float = 0.5
    debounce_windows: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if self.debounce_windows < 0:
            raise ValueError("debounce_windows must be >= 0")


def argmax_label(probs) -> ImpactLabel:
    """Most probable label; ties go to the lowest encoding."""
    return ImpactLabel(int(np.argmax(np.asarray(probs))))


def classify_scalogram_timed(weights: Weights, channels: np.ndarray):
    t0 = time.perf_counter()
    scal = to_scalogram(morlet_cwt_batch(channels))
    t1 = time.perf_counter()
    probs = forward(weights, scal)
    t2 = time.perf_counter()
    return probs, scal, StageTimings((t1 - t0) * 1e3, (t2 - t1) * 1e3)


def classify_window(weights: Weights, window) -> tuple[np.ndarray, StageTimings]:
    """Probabilities for a window plus CWT and CNN stage times.

    ``window`` may be a SampleWindow, a WindowPacket or a (6, 500) array.
    """
    channels = window.channels() if hasattr(window, "channels") else np.asarray(window)
    probs, _, timings = classify_scalogram_timed(weights, channels)
    return probs, timings


def decide(probs, policy: DecisionPolicy = DecisionPolicy(), recent=()) -> ImpactLabel | None:
    """Alert label or None.

    ``recent`` holds the argmax labels of earlier windows from the same
    device, oldest first; with debounce K the last K must match the current one.
    """
    probs = np.asarray(probs)
    top = argmax_label(probs)
    if top is ImpactLabel.None_ or probs[top] < policy.confidence_threshold:
        return None
    k = policy.debounce_windows
    if k:
        recent = list(recent)
        if len(recent) < k or any(ImpactLabel(r) is not top for r in recent[-k:]):
            return None
    return top


# ---------------------------------------------------------------- cloud forwarding


@dataclass
class ForwardResult:
    event_id: str
    delivered: bool
    attempts: int
    status: int | None = None
    rtt_ms: float | None = None
    spooled: bool = False


def post_event(base_url: str, event: dict, timeout: float = 10.0) -> tuple[int, float]:
    """POST one event; returns (status, RTT ms from first request byte to full response)."""
    url = urlparse(base_url)
    conn = http.client.HTTPConnection(url.hostname, url.port or 80, timeout=timeout)
    body = json.dumps(event).encode()
    try:
        conn.connect()
        conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        t0 = time.monotonic_ns()
        conn.request("POST", url.path.rstrip("/") + "/events", body,
                     {"Content-Type": "application/json"})
        resp = conn.getresponse()
        resp.read()
        t1 = time.monotonic_ns()
        return resp.status, (t1 - t0) / 1e6
    finally:
        conn.close()


class Spool:
    """JSON-lines file of events the Cloud could not take."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, event: dict) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()

    def pending(self) -> list[dict]:
        with self._lock:
            if not self.path.exists():
                return []
            with open(self.path, encoding="utf-8") as fh:
                return [json.loads(line) for line in fh if line.strip()]

    def flush(self, base_url: str, timeout: float = 10.0) -> int:
        """Try to deliver every spooled event once; keep the failures. Returns delivered count."""
        with self._lock:
            if not self.path.exists():
                return 0
            with open(self.path, encoding="utf-8") as fh:
                events = [json.loads(line) for line in fh if line.strip()]
            keep = []
            for ev in events:
                try:
                    status, _ = post_event(base_url, ev, timeout)
                except (OSError, http.client.HTTPException):
                    status = None
                if status is None or status >= 300:
                    keep.append(ev)
            tmp = self.path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.writelines(json.dumps(ev, sort_keys=True) + "\n" for ev in keep)
            tmp.replace(self.path)
            return len(events) - len(keep)


def forward_event(event: CollisionEvent | dict, base_url: str, retries: int = FORWARD_RETRIES,
                  spacing_s: float = RETRY_SPACING_S, timeout: float = 10.0,
                  spool: Spool | None = None) -> ForwardResult:
    """Deliver an event to the Cloud, retrying on 5xx, timeouts and connection errors.

    Undeliverable events go to ``spool`` when one is given.
    """
    payload = event.to_dict() if isinstance(event, CollisionEvent) else dict(event)
    result = ForwardResult(payload["event_id"], False, 0)
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(spacing_s)
        result.attempts += 1
        try:
            status, rtt = post_event(base_url, payload, timeout)
        except (OSError, http.client.HTTPException) as exc:
            log.warning("event %s: attempt %d failed: %s", result.event_id, result.attempts, exc)
            continue
        result.status, result.rtt_ms = status, rtt
        log.info("event %s: attempt %d -> %d (%.1f ms)", result.event_id, result.attempts, status, rtt)
        if status < 500:
            result.delivered = 200 <= status < 300
            break
    if not result.delivered and spool is not None:
        spool.append(payload)
        result.spooled = True
    return result


class Forwarder:
    """Background dispatcher so Cloud stalls never block classification."""

    def __init__(self, base_url: str | None, spool: Spool, capacity: int = FORWARD_QUEUE):
        self.base_url = base_url
        self.spool = spool
        self.results: list[ForwardResult] = []
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._run, name="edge-forwarder", daemon=True)
        self._thread.start()

    def submit(self, event: CollisionEvent) -> None:
        payload = event.to_dict()
        if self.base_url is None:
            self.spool.append(payload)
            return
        try:
            self._q.put_nowait(payload)
        except queue.Full:
            log.warning("forward queue full; spooling %s", payload["event_id"])
            self.spool.append(payload)
            with self._lock:
                self.results.append(ForwardResult(payload["event_id"], False, 0, spooled=True))

    def _run(self) -> None:
        while True:
            payload = self._q.get()
            if payload is None:
                self._q.task_done()
                return
            try:
                res = forward_event(payload, self.base_url, spool=self.spool)
            except Exception:  # keep the dispatcher alive
                log.exception("forwarding %s failed", payload.get("event_id"))
                self.spool.append(payload)
                res = ForwardResult(payload["event_id"], False, 0, spooled=True)
            with self._lock:
                self.results.append(res)
            self._q.task_done()

    def drain(self, timeout: float | None = None) -> bool:
        """Wait until every queued event is delivered or spooled."""
        end = None if timeout is None else time.monotonic() + timeout
        while self._q.unfinished_tasks:
            if end is not None and time.monotonic() > end:
                return False
            time.sleep(0.005)
        return True

    def close(self) -> None:
        self._q.put(None)
        self._thread.join()


# ---------------------------------------------------------------- server


@dataclass
class WindowRecord:
    device_id: int
    window_seq: int
    event_id: str
    t_sent_ns: int
    t_arrival_ns: int
    cwt_ms: float
    cnn_ms: float
    edge_ms: float
    label: str
    probs: list[float]
    alert: str | None

    @property
    def iot_to_edge_ms(self) -> float:
        """One-way latency; meaningful only when IoT and Edge share a monotonic clock."""
        return (self.t_arrival_ns - self.t_sent_ns) / 1e6


class _ConnHandler(socketserver.BaseRequestHandler):
    server: "EdgeServer"

    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        peer = "%s:%d" % self.client_address[:2]
        recent: dict[int, collections.deque] = {}
        while not self.server.stopping.is_set():
            try:
                body = protocol.read_frame(sock)
                t_arrival = time.monotonic_ns()
                if body is None:
                    return
                packet = protocol.decode_packet(body)
            except (protocol.FramingError, protocol.IncompleteFrameError) as exc:
                log.warning("%s: dropping connection: %s", peer, exc)
                self.server.dropped_connections.append((peer, str(exc)))
                return
            except OSError as exc:
                log.warning("%s: connection error: %s", peer, exc)
                return
            # acknowledge only once the window is classified and queued for the
            # Cloud, so a crash in between makes the IoT node resend it
            if self.server.claim(packet):
                hist = recent.setdefault(packet.device_id, collections.deque(maxlen=64))
                try:
                    self.server.process(packet, t_arrival, hist)
                finally:
                    self.server.release()
            try:
                sock.sendall(protocol.encode_ack(packet.window_seq))
            except OSError as exc:
                log.warning("%s: ack failed: %s", peer, exc)


class EdgeServer(socketserver.ThreadingTCPServer):
    """Accepts IoT connections; one handler thread per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, weights: Weights, cloud_url: str | None = None,
                 policy: DecisionPolicy = DecisionPolicy(), spool_path="spool.jsonl",
                 send_scalograms: bool = False, log_stream=None):
        self.weights = weights
        self.policy = policy
        self.send_scalograms = send_scalograms
        self.log_stream = log_stream if log_stream is not None else sys.stdout
        self.spool = Spool(spool_path)
        self.forwarder = Forwarder(cloud_url, self.spool)
        self.records: list[WindowRecord] = []
        self.dropped_connections: list[tuple[str, str]] = []
        self.duplicates = 0
        self._inflight = 0
        self.stopping = threading.Event()
        self._seen: dict[int, collections.OrderedDict] = {}
        self._lock = threading.Lock()
        self._processed = threading.Condition(self._lock)
        self._log_lock = threading.Lock()
        super().__init__(address, _ConnHandler)

    @property
    def cloud_url(self) -> str | None:
        return self.forwarder.base_url

    def claim(self, packet: protocol.WindowPacket) -> bool:
        """True the first time a (device, seq, acquisition time) triple is seen."""
        key = (packet.window_seq, packet.t_acquired_ns)
        with self._lock:
            seen = self._seen.setdefault(packet.device_id, collections.OrderedDict())
            if key in seen:
                self.duplicates += 1
                return False
            seen[key] = True
            if len(seen) > 4096:
                seen.popitem(last=False)
            self._inflight += 1
            return True

    def release(self) -> None:
        with self._processed:
            self._inflight -= 1
            self._processed.notify_all()

    def process(self, packet: protocol.WindowPacket, t_arrival_ns: int, recent: collections.deque) -> WindowRecord:
        probs, scal, timings = classify_scalogram_timed(self.weights, packet.channels())
        label = argmax_label(probs)
        alert = decide(probs, self.policy, recent)
        recent.append(int(label))
        event = CollisionEvent(
            event_id=make_event_id(packet.device_id, packet.window_seq, packet.t_acquired_ns),
            device_id=packet.device_id,
            window_seq=packet.window_seq,
            t_window_start_ns=packet.start_t_ns,
            label=label.display,
            probs=[float(p) for p in probs],
            scalogram_digest=scalogram_digest(scal),
            edge_processing_ms=timings.total_ms,
            scalogram_scg1_b64=base64.b64encode(scalogram_bytes(scal)).decode() if self.send_scalograms else None,
        )
        rec = WindowRecord(
            packet.device_id, packet.window_seq, event.event_id, packet.t_sent_ns, t_arrival_ns,
            timings.cwt_ms, timings.cnn_ms, timings.total_ms, label.display, event.probs,
            alert.display if alert is not None else None,
        )
        with self._processed:
            self.records.append(rec)
            self._processed.notify_all()
        self._log(rec)
        self.forwarder.submit(event)
        return rec

    def wait_for(self, event_id: str, timeout: float = 30.0) -> WindowRecord:
        """Block until the window behind ``event_id`` has been processed."""
        end = time.monotonic() + timeout
        with self._processed:
            while True:
                for rec in reversed(self.records):
                    if rec.event_id == event_id:
                        return rec
                left = end - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"edge never processed {event_id}")
                self._processed.wait(left)

    def _log(self, rec: WindowRecord) -> None:
        line = dict(asdict(rec), iot_to_edge_ms=rec.iot_to_edge_ms)
        with self._log_lock:
            self.log_stream.write(json.dumps(line) + "\n")
            self.log_stream.flush()

    def warm_up(self) -> None:
        """Run one throwaway classification so JIT compilation and FFT plans
        are not billed to the first real window."""
        classify_scalogram_timed(self.weights, np.zeros((6, 500)))

    def start(self) -> threading.Thread:
        self.warm_up()
        t = threading.Thread(target=self.serve_forever, args=(0.05,), name="edge-node", daemon=True)
        t.start()
        return t

    def stop(self, flush_timeout: float = 30.0) -> None:
        """Stop accepting, finish forwarding, then retry anything spooled."""
        self.stopping.set()
        self.shutdown()
        self.server_close()
        with self._processed:
            self._processed.wait_for(lambda: self._inflight == 0, flush_timeout)
        self.forwarder.drain(flush_timeout)
        self.forwarder.close()
        if self.cloud_url is not None:
            delivered = self.spool.flush(self.cloud_url)
            if delivered:
                log.info("flushed %d spooled events", delivered)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]
