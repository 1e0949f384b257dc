"""Turn a campaign run log into JSON, text-table and heatmap reports.

Every output is a pure function of the run log, so regenerating a report from
the same log yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from usvfog.harness.metrics import confusion, latency_stats, metrics
from usvfog.signal_core import LABEL_NAMES

REPORT_SCHEMA = "usvfog.report/1"

# segment name -> (run-log trial key, table row label)
SEGMENTS = {
    "iot_processing": ("iot_processing_ms", "IoT Layer processing"),
    "iot_to_edge": ("iot_to_edge_ms", "IoT-to-Edge latency (one-way)"),
    "edge_processing": ("edge_ms", "Edge Layer processing (CWT + CNN)"),
    "edge_cloud_rtt": ("edge_cloud_rtt_ms", "Edge-to-Cloud RTT"),
}


def classification_section(run_log: dict) -> dict:
    pairs = [(t["truth"], t["pred"]) for t in run_log["trials"]]
    return metrics(confusion(pairs))


def latency_section(run_log: dict) -> dict:
    records = {seg: [t.get(key) for t in run_log["trials"]] for seg, (key, _) in SEGMENTS.items()}
    return latency_stats(records)


def build_report(run_log: dict) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "n_trials": len(run_log["trials"]),
        "classification": classification_section(run_log),
        "latency": latency_section(run_log),
        "config": run_log.get("config"),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def classification_table(cls: dict) -> str:
    lines = [
        f"{'Collision Type':<16}{'Total':>7}{'Correct':>9}{'Precision':>11}{'Recall':>9}{'F1-score':>10}",
    ]
    for name in LABEL_NAMES:
        c = cls["per_class"][name]
        lines.append(f"{name:<16}{c['support']:>7d}{c['correct']:>9d}"
                     f"{c['precision']:>11.3f}{c['recall']:>9.3f}{c['f1']:>10.3f}")
    w = cls["weighted"]
    lines.append(f"{'Overall':<16}{cls['total']:>7d}{cls['correct']:>9d}"
                 f"{w['precision']:>11.3f}{w['recall']:>9.3f}{w['f1']:>10.3f}")
    lines.append(f"Accuracy {cls['accuracy']:.3f} ({cls['correct']}/{cls['total']})")
    if cls["degenerate"]:
        lines.append("Undefined ratios reported as 0: " + ", ".join(cls["degenerate"]))
    lines.append("")
    lines.append("Confusion matrix (rows true, columns predicted)")
    lines.append(" " * 11 + "".join(f"{n:>11}" for n in LABEL_NAMES))
    for name, row in zip(LABEL_NAMES, cls["confusion"]):
        lines.append(f"{name:<11}" + "".join(f"{v:>11d}" for v in row))
    return "\n".join(lines)


def latency_table(lat: dict) -> str:
    lines = [f"{'Segment':<36}{'Mean (ms)':>11}{'Std Dev. (ms)':>15}{'n':>6}"]
    for seg, (_, title) in SEGMENTS.items():
        if seg in lat:
            s = lat[seg]
            lines.append(f"{title:<36}{s['mean_ms']:>11.2f}{s['std_ms']:>15.2f}{s['n']:>6d}")
        else:
            lines.append(f"{title:<36}{'-':>11}{'-':>15}{'<2':>6}")
    return "\n".join(lines)


def report_text(report: dict) -> str:
    return (
        "Classification performance\n\n"
        + classification_table(report["classification"])
        + "\n\nProcessing time and latency\n\n"
        + latency_table(report["latency"])
        + "\n"
    )


def render_heatmap(cls: dict, path) -> None:
    """Confusion-matrix heatmap PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = np.asarray(cls["confusion"])
    fig, ax = plt.subplots(figsize=(4.6, 4.0), dpi=120)
    im = ax.imshow(m, cmap="Blues")
    ax.set_xticks(range(4), LABEL_NAMES)
    ax.set_yticks(range(4), LABEL_NAMES)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    half = m.max() / 2 if m.size and m.max() else 0.5
    for i in range(4):
        for j in range(4):
            ax.text(j, i, str(m[i, j]), ha="center", va="center",
                    color="white" if m[i, j] > half else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(run_log: dict, out_dir, heatmap: bool = True) -> dict:
    """Write report.json, report.txt and optionally confusion.png; returns the report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(run_log)
    (out / "report.json").write_text(report_json(report))
    (out / "report.txt").write_text(report_text(report))
    if heatmap:
        render_heatmap(report["classification"], out / "confusion.png")
    return report
