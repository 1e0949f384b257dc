"""Stream one synthetic voyage through all three tiers on loopback.

Starts a Cloud store and an Edge classifier in this process, then plays the
IoT role: a 20 s voyage with a port-side strike is windowed and sent over
TCP. Each window's verdict is printed as the Edge logs it, followed by what
the Cloud ended up storing.

    python demos/pipeline_walkthrough.py                 # untrained network
    python demos/pipeline_walkthrough.py --weights w.bin # after `harness train`
"""

import argparse
import io
import json
import tempfile
from pathlib import Path

from usvfog.classifier.model import Weights, load_weights
from usvfog.cloud_node import CloudServer
from usvfog.edge_node import EdgeServer
from usvfog.iot_node import run_iot
from usvfog.signal_core import ImpactScenario, synthesize_voyage


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--weights", type=Path, help="trained weight file (random init if omitted)")
    args = ap.parse_args()
    weights = load_weights(args.weights) if args.weights else Weights.initial(seed=0)
    if not args.weights:
        print("no --weights given: labels come from an untrained network\n")

    scenario = ImpactScenario(label="Port", impact_t_s=9.5, carrier_hz=6.2, duration_s=20.0, rng_seed=3)
    samples, truth = synthesize_voyage(scenario)

    with tempfile.TemporaryDirectory() as tmp:
        cloud = CloudServer(("127.0.0.1", 0), Path(tmp) / "cloud")
        cloud.start()
        edge = EdgeServer(("127.0.0.1", 0), weights, cloud.url, spool_path=Path(tmp) / "spool.jsonl",
                          log_stream=io.StringIO())
        edge.start()
        try:
            stats = run_iot(samples, edge.address, device_id=1)
            edge.forwarder.drain(30)
            stored = cloud.store.query()
            cloud_stats = cloud.store.stats()
        finally:
            edge.stop()
            cloud.stop()

    print(f"{'seq':>3}  {'truth':<9} {'edge label':<10} {'alert':<9} {'cwt ms':>7} {'cnn ms':>7} {'one-way ms':>10}")
    for rec, lbl in zip(edge.records, truth):
        print(f"{rec.window_seq:>3}  {lbl.display:<9} {rec.label:<10} {rec.alert or '-':<9} "
              f"{rec.cwt_ms:7.2f} {rec.cnn_ms:7.2f} {rec.iot_to_edge_ms:10.2f}")
    print(f"\nIoT sent {len(stats.sent)} windows, cloud stored {len(stored)} events")
    print("cloud /stats:", json.dumps(cloud_stats))


if __name__ == "__main__":
    main()
