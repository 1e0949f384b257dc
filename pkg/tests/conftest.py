import socket
import threading

import numpy as np
import pytest

from usvfog import protocol
from usvfog.classifier.model import Weights
from usvfog.signal_core import SampleWindow


class FrameSink:
    """Minimal Edge stand-in: reads frames, ACKs them and records what it acknowledged.

    ``ack_limit`` makes the sink hang up after that many ACKs; ``drop_before_ack``
    makes it hang up on receipt of that sequence number without acknowledging.
    """

    def __init__(self, port=0, ack_limit=None, drop_before_ack=None):
        self.packets = []
        self.ack_limit = ack_limit
        self.drop_before_ack = drop_before_ack
        self.lsock = socket.create_server(("127.0.0.1", port), reuse_port=False)
        self.lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.port = self.lsock.getsockname()[1]
        self.closed = threading.Event()
        self._conns = []
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        while not self.closed.is_set():
            try:
                conn, _ = self.lsock.accept()
            except OSError:
                return
            if self.closed.is_set():
                conn.close()
                return
            self._conns.append(conn)
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn):
        try:
            while True:
                pkt = protocol.read_packet(conn)
                if pkt is None:
                    return
                if self.drop_before_ack == pkt.window_seq:
                    self.drop_before_ack = None
                    self.close()
                    return
                # record before acknowledging, like the real Edge
                self.packets.append(pkt)
                conn.sendall(protocol.encode_ack(pkt.window_seq))
                if self.ack_limit is not None and len(self.packets) >= self.ack_limit:
                    self.close()
                    return
        except (OSError, protocol.IncompleteFrameError):
            return

    @property
    def seqs(self):
        return [p.window_seq for p in self.packets]

    def close(self):
        self.closed.set()
        try:
            # shutdown wakes a thread blocked in accept(); close alone does not
            self.lsock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.lsock.close()
        except OSError:
            pass
        for c in self._conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()


@pytest.fixture
def sink():
    s = FrameSink()
    yield s
    s.close()


def random_window(rng, seq=0, device=0):
    t0 = int(rng.integers(0, 10**12))
    t_ns = t0 + np.arange(500, dtype=np.int64) * 10_000_000
    return SampleWindow(device, seq, t0, 100, t_ns, rng.standard_normal((500, 6)))


@pytest.fixture(scope="session")
def init_weights():
    return Weights.initial(seed=0)
