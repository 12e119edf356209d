"""Confusion counts and the macro-averaged metrics reported per cross-validation split."""
from __future__ import annotations

import csv
import io
import json
import statistics
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import GRAZING, NO_ACTIVITY

# column order of the results table: (field name, header)
COLUMNS = (
    ("acc", "Acc"), ("f1", "F1"), ("prec", "Prec"), ("rec", "Rec"),
    ("prec_gz", "Prec-gz"), ("prec_no", "Prec-no"), ("rec_gz", "Rec-gz"), ("rec_no", "Rec-no"),
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with grazing as the positive class."""

    tp_gz: int
    fn_gz: int
    fp_gz: int
    tn_gz: int

    def __post_init__(self):
        if min(self.tp_gz, self.fn_gz, self.fp_gz, self.tn_gz) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp_gz + self.fn_gz + self.fp_gz + self.tn_gz

    def swapped(self) -> "ConfusionMatrix":
        """Same predictions with the class roles exchanged."""
        return ConfusionMatrix(self.tn_gz, self.fp_gz, self.fn_gz, self.tp_gz)


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    f1: float
    prec: float
    rec: float
    prec_gz: float
    prec_no: float
    rec_gz: float
    rec_no: float
    zero_division: bool = False

    def row(self) -> list[float]:
        return [getattr(self, name) for name, _ in COLUMNS]

    def to_json(self) -> dict:
        return asdict(self)


def confusion(predictions, labels) -> ConfusionMatrix:
    p = np.asarray(list(predictions))
    y = np.asarray(list(labels))
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise ValueError("cannot build a confusion matrix from zero samples")
    bad = set(np.unique(np.concatenate([p, y])).tolist()) - {GRAZING, NO_ACTIVITY}
    if bad:
        raise ValueError(f"unexpected class values {sorted(bad)}")
    gz_p, gz_y = p == GRAZING, y == GRAZING
    return ConfusionMatrix(int(np.sum(gz_p & gz_y)), int(np.sum(~gz_p & gz_y)),
                           int(np.sum(gz_p & ~gz_y)), int(np.sum(~gz_p & ~gz_y)))


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def _harmonic(a: float, b: float) -> float:
    return 2 * a * b / (a + b) if a + b > 0 else 0.0


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class and macro precision, recall and F1.

    A precision whose denominator is zero (class never predicted) is reported as 0
    and sets ``zero_division``.
    """
    if cm.tp_gz + cm.fn_gz == 0 or cm.tn_gz + cm.fp_gz == 0:
        raise ValueError("both classes need at least one ground-truth sample")
    prec_gz, z1 = _ratio(cm.tp_gz, cm.tp_gz + cm.fp_gz)
    prec_no, z2 = _ratio(cm.tn_gz, cm.tn_gz + cm.fn_gz)
    if z1 or z2:
        warnings.warn("precision of a never-predicted class set to 0", RuntimeWarning, stacklevel=2)
    rec_gz = cm.tp_gz / (cm.tp_gz + cm.fn_gz)
    rec_no = cm.tn_gz / (cm.tn_gz + cm.fp_gz)
    return MetricsReport(
        acc=(cm.tp_gz + cm.tn_gz) / cm.total,
        f1=(_harmonic(prec_gz, rec_gz) + _harmonic(prec_no, rec_no)) / 2,
        prec=(prec_gz + prec_no) / 2,
        rec=(rec_gz + rec_no) / 2,
        prec_gz=prec_gz, prec_no=prec_no, rec_gz=rec_gz, rec_no=rec_no,
        zero_division=z1 or z2,
    )


def aggregate(reports) -> tuple[MetricsReport, MetricsReport]:
    """Per-metric mean and median over split reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    names = [name for name, _ in COLUMNS]
    cols = {n: [getattr(r, n) for r in reports] for n in names}
    zero = any(r.zero_division for r in reports)
    mean = MetricsReport(**{n: statistics.fmean(v) for n, v in cols.items()}, zero_division=zero)
    median = MetricsReport(**{n: statistics.median(v) for n, v in cols.items()}, zero_division=zero)
    return mean, median


def table_rows(reports, names=None, with_aggregates: bool = True) -> list[tuple[str, MetricsReport]]:
    reports = list(reports)
    names = list(names) if names is not None else [f"Split #{i + 1}" for i in range(len(reports))]
    rows = list(zip(names, reports))
    if with_aggregates:
        mean, median = aggregate(reports)
        rows += [("Mean", mean), ("Median", median)]
    return rows


def to_csv(rows, digits: int = 3) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Split"] + [h for _, h in COLUMNS])
    for name, r in rows:
        w.writerow([name] + [f"{v:.{digits}f}" for v in r.row()])
    return buf.getvalue()


def to_json(rows) -> str:
    return json.dumps([{"split": name, **r.to_json()} for name, r in rows], indent=1) + "\n"


def format_table(rows, digits: int = 3) -> str:
    headers = ["Split"] + [h for _, h in COLUMNS]
    body = [[name] + [f"{v:.{digits}f}" for v in r.row()] for name, r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *body)]
    lines = ["  ".join(str(x).rjust(w) for x, w in zip(line, widths)) for line in [headers] + body]
    return "\n".join(lines)


__all__ = [
    "COLUMNS", "ConfusionMatrix", "MetricsReport", "aggregate", "confusion", "format_table", "metrics",
    "table_rows", "to_csv", "to_json",
]
