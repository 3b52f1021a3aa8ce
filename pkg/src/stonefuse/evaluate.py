"""Classification metrics, seed aggregation and comparison tables."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MetricsError

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
TABLE_COLUMNS = ("View", "Accuracy", "Precision", "Recall", "F1")


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[str, dict]
    confusion: list[list[int]]
    n_samples: int
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def check(self) -> None:
        cm = np.asarray(self.confusion)
        if cm.sum() != self.n_samples:
            raise MetricsError("confusion total differs from n_samples")
        if not math.isclose(self.accuracy, np.trace(cm) / self.n_samples, rel_tol=0, abs_tol=1e-12):
            raise MetricsError("accuracy differs from trace(confusion)/n")
        for i, c in enumerate(self.class_names):
            if cm[i].sum() != self.per_class[c]["support"]:
                raise MetricsError(f"confusion row of {c} differs from its support")


def confusion_matrix(predictions, truths, class_names) -> np.ndarray:
    if len(predictions) != len(truths):
        raise MetricsError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if len(truths) == 0:
        raise MetricsError("no samples")
    index = {c: i for i, c in enumerate(class_names)}
    try:
        p = np.fromiter((index[x] for x in predictions), dtype=np.int64, count=len(predictions))
        t = np.fromiter((index[x] for x in truths), dtype=np.int64, count=len(truths))
    except KeyError as exc:
        raise MetricsError(f"unknown label {exc.args[0]!r}") from None
    k = len(class_names)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray, class_names) -> MetricsReport:
    """Rows of ``cm`` are true classes, columns predicted classes."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        rec = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    missing = [c for c, s in zip(class_names, true_tot) if s == 0]
    if missing:
        log.warning("classes with zero support count as 0 in macro averages: %s", missing)
    n = int(cm.sum())
    per_class = {
        c: {"precision": float(prec[i]), "recall": float(rec[i]), "f1": float(f1[i]), "support": int(true_tot[i])}
        for i, c in enumerate(class_names)
    }
    return MetricsReport(
        accuracy=float(tp.sum() / n),
        macro_precision=float(prec.mean()),
        macro_recall=float(rec.mean()),
        macro_f1=float(f1.mean()),
        per_class=per_class,
        confusion=cm.tolist(),
        n_samples=n,
        class_names=list(class_names),
    )


def compute_metrics(predictions: Sequence, truths: Sequence, class_names: Sequence[str]) -> MetricsReport:
    """Accuracy plus unweighted (macro) precision, recall and F1."""
    return metrics_from_confusion(confusion_matrix(predictions, truths, class_names), list(class_names))


@dataclass
class AggregateReport:
    """Mean and sample std (n-1 denominator) of each metric over runs."""

    metrics: dict[str, dict]
    n_runs: int
    source_run_ids: list[str] = field(default_factory=list)

    def mean(self, name: str) -> float:
        return self.metrics[name]["mean"]

    def std(self, name: str) -> float:
        return self.metrics[name]["std"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateReport":
        return cls(**d)


def aggregate_runs(reports: Sequence[MetricsReport], run_ids: Sequence[str] | None = None) -> AggregateReport:
    if not reports:
        raise MetricsError("cannot aggregate an empty list of reports")
    names = reports[0].class_names
    if any(r.class_names != names for r in reports):
        raise MetricsError("reports have mixed class sets")
    n = len(reports)
    out = {}
    for m in METRIC_NAMES:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if n > 1 else 0.0, "n_runs": n}
    return AggregateReport(out, n, list(run_ids) if run_ids is not None else [])


def _fmt(agg: AggregateReport, m: str, sep: str) -> str:
    return f"{agg.mean(m):.3f}{sep}{agg.std(m):.3f}"


def format_table(rows: Sequence[tuple[str, AggregateReport]], fmt: str = "text") -> str:
    if not rows:
        raise MetricsError("table needs at least one row")
    if fmt == "text":
        cells = [list(TABLE_COLUMNS)] + [[name] + [_fmt(a, m, "±") for m in METRIC_NAMES] for name, a in rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(TABLE_COLUMNS))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["View"]
        for col in TABLE_COLUMNS[1:]:
            head += [f"{col}_mean", f"{col}_std"]
        w.writerow(head + ["n_runs"])
        for name, a in rows:
            vals = []
            for m in METRIC_NAMES:
                vals += [repr(a.mean(m)), repr(a.std(m))]
            w.writerow([name] + vals + [a.n_runs])
        return buf.getvalue()
    if fmt == "latex":
        lines = [r"\begin{tabular}{lcccc}", r"\hline", " & ".join(TABLE_COLUMNS) + r" \\", r"\hline"]
        for name, a in rows:
            safe = name.replace("_", r"\_").replace("&", r"\&").replace("%", r"\%")
            lines.append(" & ".join([safe] + [_fmt(a, m, r"$\pm$") for m in METRIC_NAMES]) + r" \\")
        lines += [r"\hline", r"\end{tabular}"]
        return "\n".join(lines) + "\n"
    raise MetricsError(f"unknown table format {fmt!r}")


def emit_table(rows: Sequence[tuple[str, AggregateReport]], out, fmt: str = "text") -> Path:
    text = format_table(rows, fmt)
    out = Path(out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise MetricsError(f"cannot write table to {out}: {exc}") from exc
    return out


def parse_csv_table(text: str) -> list[tuple[str, dict[str, tuple[float, float]]]]:
    reader = csv.reader(io.StringIO(text))
    next(reader)
    rows = []
    for r in reader:
        vals = [float(x) for x in r[1:-1]]
        rows.append((r[0], {m: (vals[2 * i], vals[2 * i + 1]) for i, m in enumerate(METRIC_NAMES)}))
    return rows
