"""Classification metrics (exact rank-based AUC/AP) and result tables."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "UndefinedMetricError",
    "ScoredSet",
    "ResultRow",
    "accuracy",
    "auc_binary",
    "auc_multiclass",
    "f1_binary",
    "average_precision",
    "confusion_binary",
    "render_report",
    "parse_report_csv",
]


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given set (e.g. one class)."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric} undefined: {reason}")
        self.metric = metric


class ScoredSet:
    """Per-example scores, true labels, and stable keys.

    ``scores`` is (N, C); a 1-dim score vector is interpreted as the
    positive-class probability of a binary problem and expanded to
    (1 - p, p).  Keys default to the example index and are used for
    deterministic tie-breaking in ranking metrics.
    """

    def __init__(self, scores, labels, keys=None):
        s = np.asarray(scores, dtype=np.float64)
        if s.ndim == 1:
            s = np.column_stack([1.0 - s, s])
        if s.ndim != 2:
            raise ValueError(f"scores must be (N,) or (N, C), got {s.shape}")
        y = np.asarray(labels, dtype=np.int64).ravel()
        if y.shape[0] != s.shape[0]:
            raise ValueError("labels and scores disagree in length")
        if s.shape[0] == 0:
            raise ValueError("empty scored set")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        if y.min() < 0 or y.max() >= s.shape[1]:
            raise ValueError(f"labels out of range for {s.shape[1]} classes")
        self.scores = s
        self.labels = y
        self.keys = list(range(len(y))) if keys is None else list(keys)
        if len(self.keys) != len(y):
            raise ValueError("keys and labels disagree in length")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    def positive_scores(self) -> np.ndarray:
        """Positive-class score of a binary set (class 1 is positive)."""
        if self.n_classes != 2:
            raise ValueError("positive scores need a binary set")
        return self.scores[:, 1]


def accuracy(s: ScoredSet) -> float:
    """Fraction of argmax-correct predictions (ties to the lowest index)."""
    pred = np.argmax(s.scores, axis=1)
    return float(np.mean(pred == s.labels))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_binary(s: ScoredSet) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    y = s.labels
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc", "needs both classes present")
    scores = s.positive_scores()
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_multiclass(s: ScoredSet):
    """Macro one-vs-rest AUC over the classes present.

    Returns (auc, skipped_classes); classes with no examples are skipped
    and reported rather than silently folded in.
    """
    present = sorted(set(int(c) for c in np.unique(s.labels)))
    if len(present) < 2:
        raise UndefinedMetricError("auc_multiclass", "needs >= 2 classes present")
    skipped = [c for c in range(s.n_classes) if c not in present]
    per_class = []
    for c in present:
        sub = ScoredSet(
            np.column_stack([1.0 - s.scores[:, c], s.scores[:, c]]),
            (s.labels == c).astype(int),
            keys=s.keys,
        )
        per_class.append(auc_binary(sub))
    return float(np.mean(per_class)), skipped


def confusion_binary(s: ScoredSet):
    """(tp, fp, fn, tn) at argmax decisions of a binary set."""
    if s.n_classes != 2:
        raise ValueError("confusion_binary needs a binary set")
    pred = np.argmax(s.scores, axis=1)
    y = s.labels
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    return tp, fp, fn, tn


def f1_binary(s: ScoredSet) -> float:
    """F1 of the positive class at argmax decisions; 0 when degenerate."""
    tp, fp, fn, _ = confusion_binary(s)
    denom_p = tp + fp
    denom_r = tp + fn
    prec = tp / denom_p if denom_p else 0.0
    rec = tp / denom_r if denom_r else 0.0
    if prec + rec == 0.0:
        return 0.0
    return 2.0 * prec * rec / (prec + rec)


def average_precision(s: ScoredSet) -> float:
    """Step-interpolated AP over the score-descending ranking.

    Ties are broken deterministically by (score desc, key asc).
    """
    y = s.labels
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("average_precision", "needs >= 1 positive")
    scores = s.positive_scores()
    order = sorted(range(s.n), key=lambda i: (-scores[i], s.keys[i]))
    ap = 0.0
    tp = 0
    prev_recall = 0.0
    for rank, i in enumerate(order, start=1):
        if y[i] == 1:
            tp += 1
            recall = tp / n_pos
            precision = tp / rank
            ap += (recall - prev_recall) * precision
            prev_recall = recall
    return ap


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    """One (experiment, preprocessing, extractor, mode) cell of a results table."""

    experiment: str
    flags: dict = field(default_factory=dict)  # {"A": bool, "D": bool, "C": bool}
    extractor: str = ""
    mode: str = ""
    metrics: dict = field(default_factory=dict)  # name -> value in [0, 1]
    n_examples: int = 0

    def flag_str(self) -> str:
        return "".join(k for k in ("A", "D", "C") if self.flags.get(k))


CSV_FIELDS = ["experiment", "A", "D", "C", "extractor", "mode", "metric", "value", "n"]

_LAYOUT_METRICS = {
    "table1": ["acc", "auc"],
    "table2": ["acc", "auc", "f1"],
    "table3": ["acc", "auc", "ap"],
    "fig1_sweep": ["acc", "auc"],
}


def _fmt_pct(v) -> str:
    return "-" if v is None else f"{100.0 * v:.1f}"


def render_report(rows, layout: str = "table1"):
    """Render rows as an aligned text table plus a machine-readable CSV.

    Text cells show percentages to one decimal; cells absent from ``rows``
    render as "-".  The CSV carries full-precision values and re-parses to
    the exact metric map.  Returns (text, csv_text).
    """
    if layout not in _LAYOUT_METRICS:
        raise ValueError(f"unknown layout {layout!r}")
    metric_names = _LAYOUT_METRICS[layout]

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        for m, v in sorted(r.metrics.items()):
            writer.writerow(
                {
                    "experiment": r.experiment,
                    "A": int(bool(r.flags.get("A"))),
                    "D": int(bool(r.flags.get("D"))),
                    "C": int(bool(r.flags.get("C"))),
                    "extractor": r.extractor,
                    "mode": r.mode,
                    "metric": m,
                    "value": repr(float(v)),
                    "n": r.n_examples,
                }
            )
    csv_text = buf.getvalue()

    # text pivot: one row per (experiment, flags), one column block per
    # (extractor, mode), metric values side by side within each cell
    col_keys = []
    for r in rows:
        ck = (r.extractor, r.mode)
        if ck not in col_keys:
            col_keys.append(ck)
    row_keys = []
    for r in rows:
        rk = (r.experiment, r.flag_str())
        if rk not in row_keys:
            row_keys.append(rk)
    cells = {}
    for r in rows:
        cells[(r.experiment, r.flag_str(), r.extractor, r.mode)] = r.metrics

    header1 = ["experiment", "flags"] + [f"{e}/{m}" if m else e for e, m in col_keys]
    sub = f"({', '.join(metric_names)})"
    lines = []
    table_rows = []
    for exp, fl in row_keys:
        line = [exp, fl or "-"]
        for e, m in col_keys:
            mm = cells.get((exp, fl, e, m))
            if mm is None:
                line.append("-")
            else:
                line.append(", ".join(_fmt_pct(mm.get(name)) for name in metric_names))
        table_rows.append(line)
    widths = [
        max(len(h), *(len(tr[i]) for tr in table_rows)) if table_rows else len(h)
        for i, h in enumerate(header1)
    ]
    lines.append("  ".join(h.ljust(w) for h, w in zip(header1, widths)))
    lines.append(f"cell = {sub} in %")
    for tr in table_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(tr, widths)))
    return "\n".join(lines) + "\n", csv_text


def parse_report_csv(csv_text: str):
    """Inverse of the CSV side of render_report; exact float round trip."""
    reader = csv.DictReader(io.StringIO(csv_text))
    out = {}
    for rec in reader:
        key = (
            rec["experiment"],
            (int(rec["A"]), int(rec["D"]), int(rec["C"])),
            rec["extractor"],
            rec["mode"],
        )
        out.setdefault(key, {"n": int(rec["n"]), "metrics": {}})
        out[key]["metrics"][rec["metric"]] = float(rec["value"])
    return out
