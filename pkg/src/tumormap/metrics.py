"""Tile-level classification metrics, overall and stratified by cohort.

AUC follows the Mann-Whitney convention (ties get half credit), computed
by rank sum; it equals the trapezoidal area under the tie-merged ROC
curve. Metrics whose denominator is zero are reported as absent (None),
never as 0 or 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyInput, OneClassOnly, UndefinedMetric

COHORT_ORDER = ("MEL", "HCC", "CRC", "NSCLC", "PDAC")
OVERALL = "Overall"


@dataclass(frozen=True)
class LabeledScore:
    p_pos: float
    label: int
    cohort: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class CohortRow:
    """One line of the stratified report (AUC, F1, Sensitivity, Specificity, nTiles)."""

    cohort: str
    auc: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None
    n_tiles: int
    misclassification_rate: float | None
    counts: ConfusionCounts


@dataclass
class MetricsReport:
    threshold: float
    cohorts: list[CohortRow] = field(default_factory=list)
    overall: CohortRow | None = None


def confusion(scores: list[LabeledScore], threshold: float) -> ConfusionCounts:
    """Exact confusion counts; predicted positive iff p_pos >= threshold.

    The inclusive comparison matches the heatmap thresholding convention.
    """
    if not scores:
        raise EmptyInput("confusion requires at least one score")
    tp = fp = tn = fn = 0
    for s in scores:
        predicted = s.p_pos >= threshold
        if s.label == 1:
            tp += predicted
            fn += not predicted
        else:
            fp += predicted
            tn += not predicted
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def summary_stats(counts: ConfusionCounts) -> dict[str, float | None]:
    """Sensitivity, specificity, F1 and misclassification rate from counts.

    A metric with a zero denominator comes back as None (absent).
    """
    if counts.n == 0:
        raise UndefinedMetric("all confusion counts are zero")
    pos = counts.tp + counts.fn
    neg = counts.tn + counts.fp
    f1_den = 2 * counts.tp + counts.fp + counts.fn
    return {
        "sensitivity": counts.tp / pos if pos else None,
        "specificity": counts.tn / neg if neg else None,
        "f1": 2 * counts.tp / f1_den if f1_den else None,
        "misclassification_rate": (counts.fp + counts.fn) / counts.n,
    }


def roc_auc(scores: list[LabeledScore]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie).

    Computed via average ranks in a single pass after sorting, which is
    equivalent to the trapezoidal area under the tie-merged ROC curve.
    """
    values = np.array([s.p_pos for s in scores], dtype=np.float64)
    labels = np.array([s.label for s in scores], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly(f"need both classes, got {n_pos} positive / {n_neg} negative")
    ranks = rankdata(values, method="average")
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores: list[LabeledScore]) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) vertices of the tie-merged ROC curve, from (0,0) to (1,1)."""
    values = np.array([s.p_pos for s in scores], dtype=np.float64)
    labels = np.array([s.label for s in scores], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly(f"need both classes, got {n_pos} positive / {n_neg} negative")
    order = np.argsort(-values, kind="stable")
    sorted_vals = values[order]
    sorted_labels = labels[order]
    tps = np.cumsum(sorted_labels == 1)
    fps = np.cumsum(sorted_labels == 0)
    # keep only the last index of each distinct threshold
    distinct = np.nonzero(np.diff(sorted_vals, append=np.nan))[0]
    tpr = np.concatenate([[0.0], tps[distinct] / n_pos])
    fpr = np.concatenate([[0.0], fps[distinct] / n_neg])
    return fpr, tpr


def _cohort_row(name: str, scores: list[LabeledScore], threshold: float) -> CohortRow:
    counts = confusion(scores, threshold)
    stats = summary_stats(counts)
    try:
        auc = roc_auc(scores)
    except OneClassOnly:
        auc = None
    return CohortRow(
        cohort=name,
        auc=auc,
        f1=stats["f1"],
        sensitivity=stats["sensitivity"],
        specificity=stats["specificity"],
        n_tiles=counts.n,
        misclassification_rate=stats["misclassification_rate"],
        counts=counts,
    )


def stratified_report(scores: list[LabeledScore], threshold: float = 0.5) -> MetricsReport:
    """Per-cohort rows plus an overall row.

    Cohorts appear in the canonical order (MEL, HCC, CRC, NSCLC, PDAC)
    when present, then any remaining cohort names alphabetically.
    """
    if not scores:
        raise EmptyInput("stratified_report requires at least one score")
    by_cohort: dict[str, list[LabeledScore]] = {}
    for s in scores:
        by_cohort.setdefault(s.cohort, []).append(s)
    names = [c for c in COHORT_ORDER if c in by_cohort]
    names += sorted(c for c in by_cohort if c not in COHORT_ORDER)
    report = MetricsReport(threshold=threshold)
    for name in names:
        report.cohorts.append(_cohort_row(name, by_cohort[name], threshold))
    report.overall = _cohort_row(OVERALL, scores, threshold)
    return report


def _fmt(value: float | None, places: int = 3) -> str:
    return "NA" if value is None else f"{value:.{places}f}"


def render_table(report: MetricsReport) -> str:
    """Fixed-width text table, 3-decimal display precision."""
    header = f"{'Cohort':<10}{'AUC':>8}{'F1':>8}{'Sens':>8}{'Spec':>8}{'nTiles':>9}"
    lines = [header, "-" * len(header)]
    for row in [*report.cohorts, report.overall]:
        if row is None:
            continue
        lines.append(
            f"{row.cohort:<10}"
            f"{_fmt(row.auc):>8}"
            f"{_fmt(row.f1):>8}"
            f"{_fmt(row.sensitivity):>8}"
            f"{_fmt(row.specificity):>8}"
            f"{row.n_tiles:>9d}"
        )
    return "\n".join(lines) + "\n"


def report_to_dict(report: MetricsReport) -> dict:
    """Machine-readable report with full-precision values."""

    def row_dict(row: CohortRow) -> dict:
        return {
            "cohort": row.cohort,
            "auc": row.auc,
            "f1": row.f1,
            "sensitivity": row.sensitivity,
            "specificity": row.specificity,
            "n_tiles": row.n_tiles,
            "misclassification_rate": row.misclassification_rate,
            "tp": row.counts.tp,
            "fp": row.counts.fp,
            "tn": row.counts.tn,
            "fn": row.counts.fn,
        }

    return {
        "threshold": report.threshold,
        "cohorts": [row_dict(r) for r in report.cohorts],
        "overall": row_dict(report.overall) if report.overall else None,
    }


def write_report_json(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")


def render_roc_figure(scores: list[LabeledScore], path, title: str = "Tile-level ROC") -> None:
    """Save a matplotlib ROC figure: one curve per cohort plus the overall curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_cohort: dict[str, list[LabeledScore]] = {}
    for s in scores:
        by_cohort.setdefault(s.cohort, []).append(s)
    names = [c for c in COHORT_ORDER if c in by_cohort]
    names += sorted(c for c in by_cohort if c not in COHORT_ORDER)

    fig, ax = plt.subplots(figsize=(5, 5))
    for name in names:
        try:
            fpr, tpr = roc_points(by_cohort[name])
            auc = roc_auc(by_cohort[name])
        except OneClassOnly:
            continue
        ax.plot(fpr, tpr, label=f"{name} (AUC {auc:.3f})", linewidth=1.2)
    if len(names) > 1:
        fpr, tpr = roc_points(scores)
        ax.plot(fpr, tpr, "k--", label=f"Overall (AUC {roc_auc(scores):.3f})", linewidth=1.5)
    ax.plot([0, 1], [0, 1], color="0.8", linewidth=0.8, zorder=0)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
