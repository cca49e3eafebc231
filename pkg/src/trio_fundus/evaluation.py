"""Confusion metrics, ROC/AUC, report tables and benchmark deltas."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

REPORT_COLUMNS = ("accuracy", "precision", "recall", "f1", "auc")


class UndefinedAUCError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0 or self.n == 0:
            raise ValueError(f"invalid confusion counts {self}")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "Confusion":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        return cls(int((t & p).sum()), int((~t & p).sum()), int((~t & ~p).sum()), int((t & ~p).sum()))


@dataclass(frozen=True)
class MetricsRow:
    disease: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float = float("nan")

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in REPORT_COLUMNS)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2 * precision * recall / s if s > 0 else 0.0


def compute_metrics(c: Confusion, disease: str = "", auc: float = float("nan")) -> MetricsRow:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return MetricsRow(disease, (c.tp + c.tn) / c.n, precision, recall, f1_score(precision, recall), auc)


@dataclass(frozen=True)
class ROCCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def trapezoid_auc(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def mann_whitney_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise UndefinedAUCError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_auc(scores, labels) -> ROCCurve:
    """ROC curve over distinct score thresholds, highest first, plus the exact AUC.

    The first point sits at threshold ``+inf`` (0, 0); the last at the lowest
    score (1, 1). Tied scores move along a diagonal segment.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    auc = mann_whitney_auc(s, y)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(~y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s) - 1]
    thresholds = np.r_[np.inf, s_sorted[last]]
    tpr = np.r_[0.0, tps[last] / y.sum()]
    fpr = np.r_[0.0, fps[last] / (~y).sum()]
    return ROCCurve(thresholds, fpr, tpr, auc)


def evaluate_scores(disease: str, scores, labels, predicted) -> tuple[MetricsRow, ROCCurve | None]:
    c = Confusion.from_labels(labels, predicted)
    try:
        curve = roc_auc(scores, labels)
    except UndefinedAUCError:
        curve = None
    row = compute_metrics(c, disease, curve.auc if curve else float("nan"))
    return row, curve


def average_row(rows: Sequence[MetricsRow], name: str = "Average") -> MetricsRow:
    """Unweighted mean across diseases (NaN AUCs skipped)."""
    if not rows:
        raise ValueError("no rows to average")
    cols = np.array([r.values() for r in rows], dtype=np.float64)
    means = [float(np.nanmean(c)) if not np.isnan(c).all() else float("nan") for c in cols.T]
    return MetricsRow(name, *means)


def round_half_up(x: float, places: int = 5) -> str:
    if not math.isfinite(x):
        return "nan"
    return str(Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def reconstruct_confusion(accuracy: float, precision: float, recall: float, n: int,
                          tol: float = 5e-6) -> list[Confusion]:
    """Integer confusion matrices of size ``n`` whose metrics match within ``tol``.

    For each positive count, only the true-positive and false-positive counts
    nearest to what recall and precision imply are checked.
    """
    slack = tol + 1e-12
    out = []
    for pos in range(1, n):
        for tp in {math.floor(recall * pos), math.ceil(recall * pos)}:
            if not 0 <= tp <= pos or abs(tp / pos - recall) > slack:
                continue
            if tp == 0:
                fps = range(0, n - pos + 1) if precision == 0 else []
            else:
                guess = tp / precision - tp if precision > 0 else -1
                fps = {math.floor(guess), math.ceil(guess)} if guess >= 0 else []
            for fp in fps:
                if not 0 <= fp <= n - pos:
                    continue
                prec = tp / (tp + fp) if tp + fp else 0.0
                if abs(prec - precision) > slack:
                    continue
                tn = n - pos - fp
                if abs((tp + tn) / n - accuracy) > slack:
                    continue
                out.append(Confusion(tp, fp, tn, pos - tp))
    return out


def is_integer_consistent(row: MetricsRow, n: int, tol: float = 5e-6) -> bool:
    return bool(reconstruct_confusion(row.accuracy, row.precision, row.recall, n, tol))


def write_report(rows: Sequence[MetricsRow], path: str | Path, with_average: bool = True) -> list[MetricsRow]:
    out = list(rows)
    if with_average and rows:
        out.append(average_row(rows))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["disease", *REPORT_COLUMNS])
        for r in out:
            w.writerow([r.disease, *(round_half_up(v) for v in r.values())])
    return out


def read_report(path: str | Path) -> list[MetricsRow]:
    with Path(path).open(newline="") as fh:
        return [MetricsRow(r["disease"], *(float(r[c]) for c in REPORT_COLUMNS))
                for r in csv.DictReader(fh)]


def write_roc(curve: ROCCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in curve.points():
            w.writerow([repr(t) if math.isfinite(t) else "inf", repr(f), repr(p)])


def plot_roc(curve: ROCCurve, disease: str, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, lw=1.5, label=f"AUC = {curve.auc:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set(xlabel="False positive rate", ylabel="True positive rate", title=disease,
           xlim=(0, 1), ylim=(0, 1.01))
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


# --------------------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class BenchmarkDelta:
    disease: str
    computed_f1: float
    benchmark_f1: float | None
    percent_diff: float | None
    flag: str = ""
    note: str = ""


def benchmark_compare(computed: Iterable[MetricsRow], benchmark_f1: Mapping[str, float]) -> list[BenchmarkDelta]:
    """Relative F1 change in percent against externally supplied benchmark values."""
    out = []
    for row in computed:
        b = benchmark_f1.get(row.disease)
        if b is None:
            out.append(BenchmarkDelta(row.disease, row.f1, None, None, "missing_benchmark",
                                      "no benchmark entry"))
        elif b <= 0:
            out.append(BenchmarkDelta(row.disease, row.f1, b, None, "undefined_percent",
                                      f"benchmark F1 is 0; computed F1 {row.f1:.2f}"))
        else:
            out.append(BenchmarkDelta(row.disease, row.f1, b, 100.0 * (row.f1 - b) / b))
    return out


def read_benchmark_csv(path: str | Path) -> dict[str, float]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"disease", "f1"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns 'disease,f1'")
        return {r["disease"].strip(): float(r["f1"]) for r in reader}


def write_benchmark_delta(deltas: Sequence[BenchmarkDelta], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["disease", "computed_f1", "benchmark_f1", "percent_diff", "flag", "note"])
        for d in deltas:
            w.writerow([d.disease, round_half_up(d.computed_f1),
                        "" if d.benchmark_f1 is None else round_half_up(d.benchmark_f1),
                        "" if d.percent_diff is None else round_half_up(d.percent_diff, 2),
                        d.flag, d.note])
