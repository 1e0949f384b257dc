"""IoT tier: window a sample stream and ship framed packets to the Edge over TCP."""

from __future__ import annotations

import collections
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from usvfog import protocol
from usvfog.latency import DelayInjector, LinkDelay
from usvfog.signal_core import (
    OFFSET_S,
    RATE_HZ,
    WINDOW_SAMPLES,
    ImuSample,
    SampleWindow,
    StreamIntegrityError,
)

log = logging.getLogger(__name__)

BACKOFF_START_S = 0.5
BACKOFF_CAP_S = 8.0
QUEUE_CAPACITY = 16


class RetryExhausted(ConnectionError):
    def __init__(self, attempts: int, unsent: int):
        super().__init__(f"edge unreachable after {attempts} reconnect attempts; {unsent} windows unsent")
        self.attempts = attempts
        self.unsent = unsent


@dataclass
class SentRecord:
    window_seq: int
    t_acquired_ns: int
    t_sent_ns: int
    injected_ms: float

    @property
    def processing_ms(self) -> float:
        return (self.t_sent_ns - self.t_acquired_ns) / 1e6


@dataclass
class SessionStats:
    produced: int = 0
    sent: list[SentRecord] = field(default_factory=list)
    dropped: int = 0
    reconnects: int = 0
    unsent: int = 0

    @property
    def processing_ms(self) -> list[float]:
        return [r.processing_ms for r in self.sent]


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


class StreamWindower:
    """Incremental 5 s / 3 s windowing over samples arriving one at a time."""

    def __init__(self, device_id: int = 0, rate_hz: int = RATE_HZ):
        self.device_id = device_id
        self.rate_hz = rate_hz
        self.stride = OFFSET_S * rate_hz
        self._t: collections.deque = collections.deque()
        self._rows: collections.deque = collections.deque()
        self._last_t: int | None = None
        self._seq = 0

    def push(self, sample: ImuSample) -> SampleWindow | None:
        if self._last_t is not None and sample.t_ns <= self._last_t:
            raise StreamIntegrityError(f"timestamp {sample.t_ns} does not increase (previous {self._last_t})")
        self._last_t = sample.t_ns
        self._t.append(sample.t_ns)
        self._rows.append(sample.as_row())
        if len(self._t) < WINDOW_SAMPLES:
            return None
        window = SampleWindow(
            device_id=self.device_id,
            window_seq=self._seq,
            start_t_ns=self._t[0],
            rate_hz=self.rate_hz,
            t_ns=np.fromiter(self._t, dtype=np.int64, count=WINDOW_SAMPLES),
            data=np.array(self._rows, dtype=np.float64),
        )
        self._seq += 1
        for _ in range(self.stride):
            self._t.popleft()
            self._rows.popleft()
        return window


class EdgeLink:
    """Stop-and-wait sender: each packet is resent until the Edge acknowledges it.

    Connection failures trigger reconnects with exponential backoff (0.5 s
    doubling, capped at 8 s); ``retries`` bounds the reconnect attempts per
    outage.
    """

    def __init__(self, address: tuple[str, int], device_id: int, retries: int = 5,
                 delay: LinkDelay | None = None, delay_seed: int | None = None,
                 connect_timeout: float = 2.0, ack_timeout: float = 30.0):
        self.address = address
        self.device_id = device_id
        self.retries = retries
        self.injector = DelayInjector(delay or LinkDelay(), delay_seed)
        self.connect_timeout = connect_timeout
        self.ack_timeout = ack_timeout
        self.sock: socket.socket | None = None
        self.reconnects = 0
        self._connected_once = False

    def _connect_once(self) -> None:
        sock = socket.create_connection(self.address, timeout=self.connect_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(self.ack_timeout)
        self.sock = sock

    def connect(self, pending: int = 0) -> None:
        """Connect, backing off between attempts; raises RetryExhausted."""
        try:
            self._connect_once()
        except OSError as exc:
            log.warning("connect to %s:%d failed: %s", *self.address, exc)
        else:
            self._mark_connected()
            return
        backoff = BACKOFF_START_S
        for attempt in range(1, self.retries + 1):
            time.sleep(backoff)
            backoff = min(backoff * 2, BACKOFF_CAP_S)
            try:
                self._connect_once()
            except OSError as exc:
                log.warning("reconnect %d/%d failed: %s", attempt, self.retries, exc)
                continue
            self._mark_connected()
            return
        raise RetryExhausted(self.retries, pending)

    def _mark_connected(self) -> None:
        if self._connected_once:
            self.reconnects += 1
        self._connected_once = True

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def deliver(self, window: SampleWindow, t_acquired_ns: int, seq: int | None = None,
                pending: int = 0) -> SentRecord:
        """Send one window and wait for its acknowledgement, reconnecting as needed."""
        seq = window.window_seq if seq is None else seq
        payload = protocol.window_payload(window.t_ns, window.data)
        while True:
            if self.sock is None:
                self.connect(pending + 1)
            t_sent = time.monotonic_ns()
            body = protocol.encode_packet(protocol.WindowPacket(
                self.device_id, seq, t_acquired_ns, t_sent, window.rate_hz, payload))
            # emulated network delay sits between the send stamp and the wire
            injected = self.injector.sleep()
            try:
                self.sock.sendall(protocol.frame(body))
                acked = protocol.read_ack(self.sock)
            except (OSError, protocol.IncompleteFrameError, protocol.FramingError) as exc:
                log.warning("window %d: link lost (%s); reconnecting", seq, exc)
                self.close()
                continue
            if acked != seq:
                log.warning("window %d: ack for %d; resending", seq, acked)
                continue
            return SentRecord(seq, t_acquired_ns, t_sent, injected)


def run_iot(
    samples: Iterable[ImuSample],
    edge: tuple[str, int],
    device_id: int = 0,
    retries: int = 5,
    delay: LinkDelay | None = None,
    delay_seed: int | None = None,
    queue_capacity: int = QUEUE_CAPACITY,
) -> SessionStats:
    """Window ``samples`` and stream every complete window to the Edge.

    Acquisition and sending run on separate threads joined by a bounded queue;
    when the queue is full the oldest unsent window is dropped and counted.
    Raises :class:`RetryExhausted` if the Edge stays unreachable.
    """
    stats = SessionStats()
    queue: collections.deque = collections.deque()
    cond = threading.Condition()
    done = threading.Event()
    failure: list[BaseException] = []

    def acquire():
        windower = StreamWindower(device_id)
        try:
            for s in samples:
                w = windower.push(s)
                if w is None:
                    continue
                t_acq = time.monotonic_ns()
                with cond:
                    stats.produced += 1
                    if len(queue) >= queue_capacity:
                        queue.popleft()
                        stats.dropped += 1
                    queue.append((w, t_acq))
                    cond.notify()
                if failure:
                    return
        except BaseException as exc:  # surfaced on the caller's thread
            failure.append(exc)
        finally:
            done.set()
            with cond:
                cond.notify()

    producer = threading.Thread(target=acquire, name="iot-acquire", daemon=True)
    producer.start()
    link = EdgeLink(edge, device_id, retries, delay, delay_seed)
    try:
        while True:
            with cond:
                while not queue and not done.is_set():
                    cond.wait()
                if not queue:
                    break
                w, t_acq = queue.popleft()
                pending = len(queue)
            try:
                stats.sent.append(link.deliver(w, t_acq, pending=pending))
            except RetryExhausted as exc:
                failure.append(exc)
                producer.join()
                with cond:
                    stats.unsent = 1 + len(queue)
                raise RetryExhausted(exc.attempts, stats.unsent) from None
    finally:
        link.close()
        stats.reconnects = link.reconnects
    producer.join()
    if failure:
        raise failure[0]
    return stats
