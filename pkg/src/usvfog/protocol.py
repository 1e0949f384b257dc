"""IoT -> Edge wire format.

Frame: u32 big-endian length, then a packet.

Packet (37-byte header, then payload)::

    offset size  field
    0      4     magic "USV1" (0x55535631 big-endian)
    4      1     version (u8) = 1
    5      4     device_id (u32 LE)
    9      8     window_seq (u64 LE)
    17     8     t_acquired_ns (u64 LE, IoT monotonic clock)
    25     8     t_sent_ns (u64 LE, IoT monotonic clock)
    33     2     rate_hz (u16 LE)
    35     2     n_samples (u16 LE)
    37     56*n  n rows of 7 little-endian f64: t_s, ax, ay, az, gx, gy, gz

``t_s`` is the sample time in seconds on the stream's own time base, so the
window start is the first row's ``t_s``.

After each packet the receiver answers with a 12-byte acknowledgement,
"ACK1" followed by the u64 LE window_seq.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"USV1"
VERSION = 1
HEADER = struct.Struct("<4sBIQQQHH")
HEADER_SIZE = HEADER.size
ROW_BYTES = 7 * 8
ACK = struct.Struct("<4sQ")
ACK_MAGIC = b"ACK1"
MAX_SAMPLES = 4096


class FramingError(ValueError):
    """Packet bytes violate the wire format."""


class IncompleteFrameError(ConnectionError):
    """The peer closed the stream in the middle of a frame."""


@dataclass(frozen=True)
class WindowPacket:
    device_id: int
    window_seq: int
    t_acquired_ns: int
    t_sent_ns: int
    rate_hz: int
    payload: np.ndarray  # (n_samples, 7) float64

    @property
    def n_samples(self) -> int:
        return self.payload.shape[0]

    @property
    def start_t_ns(self) -> int:
        return int(round(self.payload[0, 0] * 1e9)) if self.n_samples else 0

    def channels(self) -> np.ndarray:
        """(6, n) sensor channels."""
        return self.payload[:, 1:].T


def window_payload(t_ns: np.ndarray, data: np.ndarray) -> np.ndarray:
    return np.column_stack([np.asarray(t_ns, dtype=np.float64) / 1e9, data])


def encode_packet(packet: WindowPacket) -> bytes:
    payload = np.ascontiguousarray(packet.payload, dtype="<f8")
    if payload.ndim != 2 or payload.shape[1] != 7:
        raise FramingError(f"payload must be (n, 7), got {payload.shape}")
    header = HEADER.pack(
        MAGIC, VERSION, packet.device_id, packet.window_seq,
        packet.t_acquired_ns, packet.t_sent_ns, packet.rate_hz, payload.shape[0],
    )
    return header + payload.tobytes()


def decode_packet(data: bytes) -> WindowPacket:
    if len(data) < HEADER_SIZE:
        raise FramingError(f"packet shorter than the {HEADER_SIZE}-byte header")
    magic, version, device_id, seq, t_acq, t_sent, rate, n = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if len(data) != HEADER_SIZE + n * ROW_BYTES:
        raise FramingError(f"payload is {len(data) - HEADER_SIZE} bytes, header declares {n} rows")
    payload = np.frombuffer(data, dtype="<f8", offset=HEADER_SIZE).reshape(n, 7).astype(np.float64)
    return WindowPacket(device_id, seq, t_acq, t_sent, rate, payload)


def frame(packet_bytes: bytes) -> bytes:
    return struct.pack(">I", len(packet_bytes)) + packet_bytes


def _recv_exact(sock: socket.socket, n: int, allow_eof: bool = False) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise IncompleteFrameError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """Next frame body, or None on a clean close between frames."""
    prefix = _recv_exact(sock, 4, allow_eof=True)
    if prefix is None:
        return None
    (length,) = struct.unpack(">I", prefix)
    if length < HEADER_SIZE or length > HEADER_SIZE + MAX_SAMPLES * ROW_BYTES:
        raise FramingError(f"implausible frame length {length}")
    return _recv_exact(sock, length)


def read_packet(sock: socket.socket) -> WindowPacket | None:
    body = read_frame(sock)
    return None if body is None else decode_packet(body)


def encode_ack(window_seq: int) -> bytes:
    return ACK.pack(ACK_MAGIC, window_seq)


def read_ack(sock: socket.socket) -> int:
    raw = _recv_exact(sock, ACK.size)
    magic, seq = ACK.unpack(raw)
    if magic != ACK_MAGIC:
        raise FramingError(f"bad ack magic {magic!r}")
    return seq
