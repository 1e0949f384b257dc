"""Console entry points for the three tiers and the experiment harness."""

from __future__ import annotations

import argparse
import json
import logging
import math
import signal
import sys
import threading
import time
from pathlib import Path

from usvfog.latency import LatencyProfile, LinkDelay
from usvfog.signal_core import (
    ImpactScenario,
    parse_pacing,
    replay_file,
    synthesize_voyage,
)

log = logging.getLogger("usvfog")

EXIT_RETRY_EXHAUSTED = 2


def _logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _paced(samples, speedup: float, rate_hz: int = 100):
    period = 0.0 if math.isinf(speedup) else 1.0 / (rate_hz * speedup)
    t0 = time.perf_counter()
    for k, s in enumerate(samples):
        if period:
            delay = t0 + k * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        yield s


def _until_signalled(stop: threading.Event) -> None:
    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    while not stop.wait(0.2):
        pass


# ---------------------------------------------------------------- iot-node


def iot_main(argv=None) -> int:
    from usvfog.iot_node import RetryExhausted, parse_address, run_iot

    p = argparse.ArgumentParser(prog="iot-node", description="Stream IMU windows to an Edge node.")
    p.add_argument("--edge", required=True, type=parse_address, metavar="HOST:PORT")
    p.add_argument("--device-id", type=int, default=0)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", type=Path, metavar="FILE.json", help="synthesize samples from a scenario")
    src.add_argument("--replay", type=Path, metavar="FILE.csv", help="replay a recorded sample file")
    p.add_argument("--pacing", type=parse_pacing, default=math.inf, metavar="realtime|xN|max")
    p.add_argument("--retries", type=int, default=5)
    p.add_argument("--inject-delay", type=LinkDelay.parse, default=LinkDelay(), metavar="MEAN_MS,STD_MS")
    p.add_argument("--seed", type=int, default=None, help="seed for injected delays")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    _logging(args.verbose)

    if args.scenario is not None:
        samples, _ = synthesize_voyage(ImpactScenario.load(args.scenario))
        stream = _paced(samples, args.pacing)
    else:
        stream = replay_file(args.replay, args.pacing)
    try:
        stats = run_iot(stream, args.edge, args.device_id, args.retries, args.inject_delay, args.seed)
    except RetryExhausted as exc:
        log.error("%s", exc)
        return EXIT_RETRY_EXHAUSTED
    summary = {
        "produced": stats.produced,
        "sent": len(stats.sent),
        "dropped": stats.dropped,
        "reconnects": stats.reconnects,
    }
    print(json.dumps(summary))
    return 0


# ---------------------------------------------------------------- edge-node


def edge_main(argv=None) -> int:
    from usvfog.classifier.model import load_weights
    from usvfog.edge_node import DecisionPolicy, EdgeServer
    from usvfog.iot_node import parse_address

    p = argparse.ArgumentParser(prog="edge-node", description="Classify IoT windows and forward events.")
    p.add_argument("--listen", required=True, type=parse_address, metavar="HOST:PORT")
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--cloud", default=None, metavar="URL", help="omit to spool every event locally")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--debounce", type=int, default=0)
    p.add_argument("--send-scalograms", action="store_true")
    p.add_argument("--spool", type=Path, default=Path("spool.jsonl"))
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    _logging(args.verbose)

    weights = load_weights(args.weights)
    server = EdgeServer(args.listen, weights, args.cloud, DecisionPolicy(args.threshold, args.debounce),
                        spool_path=args.spool, send_scalograms=args.send_scalograms)
    server.start()
    log.info("edge-node listening on %s:%d", *server.address)
    _until_signalled(threading.Event())
    log.info("stopping; flushing forward queue and spool")
    server.stop()
    return 0


# ---------------------------------------------------------------- cloud-node


def cloud_main(argv=None) -> int:
    from usvfog.cloud_node import CloudServer
    from usvfog.iot_node import parse_address

    p = argparse.ArgumentParser(prog="cloud-node", description="Collision event store over HTTP.")
    p.add_argument("--listen", required=True, type=parse_address, metavar="HOST:PORT")
    p.add_argument("--data", required=True, type=Path, metavar="DIR")
    p.add_argument("--inject-delay", type=LinkDelay.parse, default=LinkDelay(), metavar="MEAN_MS,STD_MS")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    _logging(args.verbose)

    server = CloudServer(args.listen, args.data, args.inject_delay, args.seed)
    server.start()
    log.info("cloud-node serving %s (%d stored events)", server.url, len(server.store))
    _until_signalled(threading.Event())
    server.stop()
    return 0


# ---------------------------------------------------------------- harness


def _cmd_train(args) -> int:
    from usvfog.classifier.model import save_weights
    from usvfog.classifier.train import TrainParams, train
    from usvfog.harness.campaign import training_set

    t0 = time.monotonic()
    x, y = training_set(args.per_class, args.seed)
    log.info("training set: %d windows (%.1f s to generate)", len(y), time.monotonic() - t0)
    hyper = TrainParams(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed)

    def progress(epoch, loss):
        log.info("epoch %d/%d loss %.4f", epoch + 1, args.epochs, loss)

    weights = train(x, y, hyper, progress=progress)
    save_weights(weights, args.out)
    print(json.dumps({"out": str(args.out), "windows": int(len(y)), "epochs": weights.epochs,
                      "final_loss": weights.final_loss}))
    return 0


def _cmd_run(args) -> int:
    from usvfog.classifier.model import load_weights
    from usvfog.harness.campaign import CampaignConfig, run_campaign, save_run_log
    from usvfog.harness.report import report_text, write_report

    profile = LatencyProfile.load(args.profile) if args.profile else LatencyProfile()
    config = CampaignConfig(per_class=args.per_class, total=args.total, seed=args.seed, profile=profile,
                            device_id=args.device_id)
    weights = load_weights(args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(i, trial):
        log.info("trial %d/%d truth=%s pred=%s", i + 1, config.n_trials, trial["truth"], trial["pred"])

    run_log = run_campaign(config, weights, workdir=out / "tiers", progress=progress)
    save_run_log(run_log, out / "run_log.json")
    report = write_report(run_log, out, heatmap=not args.no_heatmap)
    sys.stdout.write(report_text(report))
    return 0


def _cmd_metrics(args) -> int:
    from usvfog.harness.campaign import load_run_log
    from usvfog.harness.report import build_report, report_json, report_text, write_report

    run_log = load_run_log(args.log)
    if args.out:
        report = write_report(run_log, args.out, heatmap=not args.no_heatmap)
    else:
        report = build_report(run_log)
    sys.stdout.write(report_json(report) if args.json else report_text(report))
    return 0


def harness_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="harness", description="Campaigns, training and evaluation reports.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train weights on a generated synthetic campaign")
    t.add_argument("--out", required=True, type=Path, metavar="WEIGHTS")
    t.add_argument("--per-class", type=int, default=40)
    t.add_argument("--seed", type=int, default=1000)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--batch", type=int, default=8)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("run", help="run a campaign through IoT, Edge and Cloud on loopback")
    r.add_argument("--per-class", type=int, default=10)
    r.add_argument("--total", type=int, default=0, help="total trials if above 4 x per-class")
    r.add_argument("--profile", type=Path, default=None, metavar="FILE.json")
    r.add_argument("--weights", required=True, type=Path)
    r.add_argument("--out", required=True, type=Path, metavar="DIR")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--device-id", type=int, default=1)
    r.add_argument("--no-heatmap", action="store_true")
    r.set_defaults(func=_cmd_run)

    m = sub.add_parser("metrics", help="report on an existing run log")
    m.add_argument("--log", required=True, type=Path)
    m.add_argument("--out", type=Path, default=None, metavar="DIR", help="also write report files here")
    m.add_argument("--json", action="store_true", help="print the JSON report instead of tables")
    m.add_argument("--no-heatmap", action="store_true")
    m.set_defaults(func=_cmd_metrics)

    args = p.parse_args(argv)
    _logging(args.verbose)
    return args.func(args)
