import io
import json
import os
import signal
import socket
import subprocess
import sys
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from conftest import random_window
from usvfog import protocol
from usvfog.classifier.model import Weights, forward, save_weights
from usvfog.cloud_node import CloudServer
from usvfog.edge_node import (
    DecisionPolicy,
    EdgeServer,
    Spool,
    classify_window,
    decide,
    forward_event,
)
from usvfog.events import make_event_id
from usvfog.iot_node import run_iot
from usvfog.signal_core import ImpactLabel, ImpactScenario, synthesize_voyage
from usvfog.wavelet import to_scalogram

from test_cloud import make_event


# ---------------------------------------------------------------- decision rule


def test_decide_examples():
    assert decide([0.7, 0.1, 0.1, 0.1]) is ImpactLabel.Bow
    assert decide([0.05, 0.025, 0.025, 0.9]) is None
    assert decide([0.5, 0.5, 0.0, 0.0], DecisionPolicy(0.5)) is ImpactLabel.Bow
    assert decide([0.4, 0.3, 0.3, 0.0], DecisionPolicy(0.5)) is None


def test_decide_debounce():
    p = DecisionPolicy(0.5, debounce_windows=2)
    bow = [0.8, 0.1, 0.05, 0.05]
    assert decide(bow, p, []) is None
    assert decide(bow, p, [0]) is None
    assert decide(bow, p, [1, 0]) is None
    assert decide(bow, p, [1, 0, 0]) is ImpactLabel.Bow


def test_threshold_monotonicity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        probs = rng.dirichlet(np.ones(4))
        lo, hi = sorted(rng.uniform(0, 1, 2))
        if decide(probs, DecisionPolicy(lo)) is None:
            assert decide(probs, DecisionPolicy(hi)) is None


def test_policy_validation():
    with pytest.raises(ValueError):
        DecisionPolicy(1.5)
    with pytest.raises(ValueError):
        DecisionPolicy(0.5, -1)


# ---------------------------------------------------------------- classification


def test_zero_window_composition(init_weights):
    probs, timings = classify_window(init_weights, np.zeros((6, 500)))
    np.testing.assert_array_equal(probs, forward(init_weights, to_scalogram(np.zeros((6, 150, 500)))))
    assert timings.cwt_ms >= 0 and timings.cnn_ms >= 0
    assert timings.total_ms == pytest.approx(timings.cwt_ms + timings.cnn_ms)


def test_identical_window_identical_probs(init_weights):
    w = random_window(np.random.default_rng(1))
    a, _ = classify_window(init_weights, w)
    b, _ = classify_window(init_weights, w)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- forwarding


class FlakyCloud(BaseHTTPRequestHandler):
    statuses: list = []
    seen: list = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        self.rfile.read(int(self.headers["Content-Length"]))
        status = self.statuses.pop(0) if self.statuses else 201
        self.seen.append(status)
        self.send_response(status)
        self.send_header("Content-Length", "2")
        self.end_headers()
        self.wfile.write(b"{}")


@pytest.fixture
def flaky():
    FlakyCloud.statuses, FlakyCloud.seen = [], []
    server = ThreadingHTTPServer(("127.0.0.1", 0), FlakyCloud)
    threading.Thread(target=server.serve_forever, args=(0.05,), daemon=True).start()
    yield server
    server.shutdown()
    server.server_close()


def test_retry_500_500_200(flaky):
    FlakyCloud.statuses = [500, 500, 200]
    url = "http://127.0.0.1:%d" % flaky.server_address[1]
    res = forward_event(make_event(), url)
    assert res.delivered and res.attempts == 3 and res.status == 200
    assert FlakyCloud.seen == [500, 500, 200]


def test_retries_exhausted_spools(flaky, tmp_path):
    FlakyCloud.statuses = [503] * 10
    url = "http://127.0.0.1:%d" % flaky.server_address[1]
    spool = Spool(tmp_path / "spool.jsonl")
    t0 = time.monotonic()
    res = forward_event(make_event(), url, spool=spool)
    assert not res.delivered and res.spooled and res.attempts == 4
    assert time.monotonic() - t0 >= 3 * 0.2
    assert [e["event_id"] for e in spool.pending()] == [make_event()["event_id"]]


def test_client_error_not_retried(flaky):
    FlakyCloud.statuses = [400]
    url = "http://127.0.0.1:%d" % flaky.server_address[1]
    res = forward_event(make_event(), url)
    assert not res.delivered and res.attempts == 1


def test_loopback_rtt_under_50ms(tmp_path):
    cloud = CloudServer(("127.0.0.1", 0), tmp_path)
    cloud.start()
    try:
        rtts = [forward_event(make_event(i), cloud.url).rtt_ms for i in range(20)]
    finally:
        cloud.stop()
    assert max(rtts) < 50


def _free_url():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return f"http://127.0.0.1:{port}"


def _edge(weights, tmp_path, cloud_url=None, **kw):
    server = EdgeServer(("127.0.0.1", 0), weights, cloud_url, spool_path=tmp_path / "spool.jsonl",
                        log_stream=io.StringIO(), **kw)
    server.start()
    return server


def _voyage(n_windows, seed=0, label="Starboard"):
    samples, _ = synthesize_voyage(ImpactScenario(label=label, duration_s=5 + 3 * (n_windows - 1),
                                                  rng_seed=seed))
    return samples


def test_cloud_down_spools_and_keeps_classifying(init_weights, tmp_path):
    edge = _edge(init_weights, tmp_path, _free_url())
    try:
        stats = run_iot(_voyage(3), edge.address, device_id=1)
        assert len(stats.sent) == 3
        assert len(edge.records) == 3
        edge.forwarder.drain(30)
    finally:
        edge.stop(flush_timeout=30)
    spooled = Spool(tmp_path / "spool.jsonl").pending()
    assert sorted(e["window_seq"] for e in spooled) == [0, 1, 2]


def test_spool_flushed_when_cloud_returns(init_weights, tmp_path):
    spool = Spool(tmp_path / "spool.jsonl")
    spool.append(make_event(0))
    spool.append(make_event(1))
    cloud = CloudServer(("127.0.0.1", 0), tmp_path / "cloud")
    cloud.start()
    try:
        assert spool.flush(cloud.url) == 2
        assert spool.pending() == []
        assert len(cloud.store) == 2
    finally:
        cloud.stop()


def test_two_concurrent_devices(init_weights, tmp_path):
    cloud = CloudServer(("127.0.0.1", 0), tmp_path / "cloud")
    cloud.start()
    edge = _edge(init_weights, tmp_path, cloud.url)
    errors = []

    def device(dev):
        try:
            run_iot(_voyage(10, seed=dev), edge.address, device_id=dev)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    try:
        threads = [threading.Thread(target=device, args=(d,)) for d in (1, 2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(120)
        assert not errors
        edge.forwarder.drain(60)
        stored = cloud.store.query()
    finally:
        edge.stop()
        cloud.stop()
    assert len(stored) == 20
    for dev in (1, 2):
        seqs = [r.window_seq for r in edge.records if r.device_id == dev]
        assert seqs == list(range(10))
    log_lines = [json.loads(l) for l in edge.log_stream.getvalue().splitlines()]
    assert len(log_lines) == 20
    assert {"window_seq", "label", "probs", "cwt_ms", "cnn_ms"} <= set(log_lines[0])


def test_malformed_frame_isolated(init_weights, tmp_path):
    edge = _edge(init_weights, tmp_path)
    try:
        bad = socket.create_connection(edge.address)
        bad.sendall(protocol.frame(b"JUNK" + bytes(60)))
        bad.settimeout(5)
        assert bad.recv(16) == b""  # edge hung up on us
        bad.close()
        stats = run_iot(_voyage(2), edge.address, device_id=5)
        assert len(stats.sent) == 2
        assert [r.window_seq for r in edge.records] == [0, 1]
        assert len(edge.dropped_connections) == 1
        assert "magic" in edge.dropped_connections[0][1]
    finally:
        edge.stop()


def test_resent_packet_processed_once(init_weights, tmp_path):
    edge = _edge(init_weights, tmp_path)
    try:
        w = random_window(np.random.default_rng(3))
        pkt = protocol.WindowPacket(8, 0, 12345, 12346, 100, protocol.window_payload(w.t_ns, w.data))
        blob = protocol.frame(protocol.encode_packet(pkt))
        for _ in range(2):
            s = socket.create_connection(edge.address)
            s.sendall(blob)
            assert protocol.read_ack(s) == 0
            s.close()
        edge.wait_for(make_event_id(8, 0, 12345))
        time.sleep(0.1)
        assert len(edge.records) == 1 and edge.duplicates == 1
    finally:
        edge.stop()


def test_event_fields_and_scalogram_upload(init_weights, tmp_path):
    cloud = CloudServer(("127.0.0.1", 0), tmp_path / "cloud")
    cloud.start()
    edge = _edge(init_weights, tmp_path, cloud.url, send_scalograms=True)
    try:
        run_iot(_voyage(1), edge.address, device_id=6)
        edge.forwarder.drain(30)
        (ev,) = cloud.store.query()
    finally:
        edge.stop()
        cloud.stop()
    assert ev["device_id"] == 6 and ev["window_seq"] == 0 and ev["t_window_start_ns"] == 0
    assert ev["label"] == ["Bow", "Port", "Starboard", "None"][int(np.argmax(ev["probs"]))]
    import base64

    from usvfog.wavelet import scalogram_digest, scalogram_from_bytes

    scal = scalogram_from_bytes(base64.b64decode(ev["scalogram_scg1_b64"]))
    assert scalogram_digest(scal) == ev["scalogram_digest"]


def test_sigterm_flushes_spool_and_exits_zero(tmp_path, init_weights):
    weights = tmp_path / "w.bin"
    save_weights(init_weights, weights)
    spool = tmp_path / "spool.jsonl"
    cloud = CloudServer(("127.0.0.1", 0), tmp_path / "cloud")
    cloud.start()
    try:
        # an event left over from an earlier outage
        Spool(spool).append(make_event(0))
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        proc = subprocess.Popen(
            [sys.executable, "-c", "from usvfog.cli import edge_main; raise SystemExit(edge_main())",
             "--listen", f"127.0.0.1:{port}", "--weights", str(weights), "--cloud", cloud.url,
             "--threshold", "0.5", "--debounce", "0", "--spool", str(spool)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline:
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
                break
            except OSError:
                time.sleep(0.1)
        stats = run_iot(_voyage(2), ("127.0.0.1", port), device_id=2)
        assert len(stats.sent) == 2
        proc.send_signal(signal.SIGTERM)
        out, err = proc.communicate(timeout=60)
        assert proc.returncode == 0, err
        assert len(out.splitlines()) == 2  # one JSON log line per window
        assert Spool(spool).pending() == []
        assert len(cloud.store) == 3
    finally:
        cloud.stop()
