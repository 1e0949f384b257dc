"""Confusion matrix, per-class precision/recall/F1 and latency summaries."""

from __future__ import annotations

import logging
from typing import Iterable, Mapping

import numpy as np

from usvfog.signal_core import LABEL_NAMES, ImpactLabel

log = logging.getLogger(__name__)

# A 50-trial confusion matrix (rows = true, columns = predicted, order Bow,
# Port, Starboard, None) consistent with the published per-class totals,
# correct counts and precisions: row sums 12/12/15/11, diagonal 11/10/12/10,
# column sums 13/11/15/11. Only these marginals are published; where the
# off-diagonal errors sit is one valid placement, not a reported fact.
PUBLISHED_MATRIX = np.array([
    [11, 0, 1, 0],
    [1, 10, 1, 0],
    [1, 1, 12, 1],
    [0, 0, 1, 10],
])


def confusion(pairs: Iterable[tuple]) -> np.ndarray:
    """4x4 counts with rows = true label and columns = predicted label."""
    m = np.zeros((len(LABEL_NAMES), len(LABEL_NAMES)), dtype=np.int64)
    for true, pred in pairs:
        m[ImpactLabel.parse(true), ImpactLabel.parse(pred)] += 1
    return m


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def metrics(matrix) -> dict:
    """Per-class precision/recall/F1 plus overall accuracy and averages.

    Undefined ratios (zero denominators) are reported as 0.0 and listed in
    ``degenerate``.
    """
    m = np.asarray(matrix, dtype=np.int64)
    total = int(m.sum())
    tp = np.diag(m)
    support = m.sum(axis=1)
    predicted = m.sum(axis=0)
    per_class = {}
    degenerate = []
    for i, name in enumerate(LABEL_NAMES):
        p, p_bad = _ratio(tp[i], predicted[i])
        r, r_bad = _ratio(tp[i], support[i])
        f, f_bad = _ratio(2 * p * r, p + r)
        for flag, what in ((p_bad, "precision"), (r_bad, "recall"), (f_bad, "f1")):
            if flag:
                degenerate.append(f"{name}.{what}")
        per_class[name] = {
            "support": int(support[i]),
            "correct": int(tp[i]),
            "predicted": int(predicted[i]),
            "precision": p,
            "recall": r,
            "f1": f,
        }
    accuracy, acc_bad = _ratio(int(tp.sum()), total)
    if acc_bad:
        degenerate.append("accuracy")
    keys = ("precision", "recall", "f1")
    macro = {k: float(np.mean([per_class[n][k] for n in LABEL_NAMES])) for k in keys}
    if total:
        weighted = {k: float(sum(per_class[n][k] * per_class[n]["support"] for n in LABEL_NAMES) / total)
                    for k in keys}
    else:
        weighted = dict.fromkeys(keys, 0.0)
    micro_p, _ = _ratio(int(tp.sum()), int(predicted.sum()))
    micro_r, _ = _ratio(int(tp.sum()), int(support.sum()))
    return {
        "labels": list(LABEL_NAMES),
        "confusion": m.tolist(),
        "total": total,
        "correct": int(tp.sum()),
        "accuracy": accuracy,
        "per_class": per_class,
        "macro": macro,
        "weighted": weighted,
        "micro": {"precision": micro_p, "recall": micro_r},
        "degenerate": degenerate,
    }


def latency_stats(records: Mapping[str, Iterable[float]]) -> dict:
    """Mean and sample (n-1) standard deviation per segment.

    Segments with fewer than two records are left out with a warning.
    """
    out = {}
    for segment, values in records.items():
        v = np.asarray([x for x in values if x is not None], dtype=np.float64)
        if v.size < 2:
            log.warning("latency segment %r has %d record(s); omitted", segment, v.size)
            continue
        out[segment] = {"mean_ms": float(v.mean()), "std_ms": float(v.std(ddof=1)), "n": int(v.size)}
    return out
