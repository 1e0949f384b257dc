"""Replay the measured cross-region link delays on a single host.

Runs a short campaign twice: once on bare loopback and once with the
Vietnam-to-Australia IoT link and the Australia-to-Singapore cloud link
injected. Because every tier shares one monotonic clock, the one-way column
is a direct measurement rather than half an RTT.

    python demos/latency_profiles.py --per-class 5
"""

import argparse

from usvfog.classifier.model import Weights, load_weights
from usvfog.harness.campaign import CampaignConfig, run_campaign
from usvfog.harness.report import build_report, latency_table
from usvfog.latency import MEASURED_PROFILES, LatencyProfile


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--per-class", type=int, default=5)
    ap.add_argument("--weights", help="trained weight file; timing does not depend on it")
    args = ap.parse_args()
    weights = load_weights(args.weights) if args.weights else Weights.initial(seed=0)

    profiles = {
        "loopback": LatencyProfile(),
        "VN->AU iot, AU->SG cloud": LatencyProfile(MEASURED_PROFILES["iot_edge_vn_au"], MEASURED_PROFILES["edge_cloud_au_sg"]),
    }
    for name, profile in profiles.items():
        log = run_campaign(CampaignConfig(per_class=args.per_class, seed=5, profile=profile), weights)
        print(f"== {name} ({len(log['trials'])} windows, {log['wall_time_s']:.1f} s wall)")
        print(latency_table(build_report(log)["latency"]))


if __name__ == "__main__":
    main()
