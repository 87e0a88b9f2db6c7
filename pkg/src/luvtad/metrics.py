"""Anomaly scores, ROC analysis and distance-gated precision/recall."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataContractError

DEFAULT_SCORE_THRESHOLD = 0.25
DEFAULT_R_GRID = tuple(range(21))


@dataclass(frozen=True)
class ScoredSample:
    id: str
    anomaly_score: float
    label: int  # 1 defective, 0 defect-free

    def __post_init__(self):
        if not math.isfinite(self.anomaly_score):
            raise DataContractError(f"sample {self.id!r} has non-finite score {self.anomaly_score}")
        if self.label not in (0, 1):
            raise DataContractError(f"sample {self.id!r} label must be 0 or 1, got {self.label}")


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # thresholds[i] yields point i+1 (predict positive when score >= threshold)
    auroc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


@dataclass(frozen=True)
class LocalizationRecord:
    id: str
    verdict: str
    label: int
    predicted_px: Optional[tuple[float, float]] = None
    truth_px: Optional[tuple[float, float]] = None

    @property
    def predicted_defective(self) -> bool:
        return self.verdict == "defective"

    def distance(self) -> Optional[float]:
        if self.predicted_px is None or self.truth_px is None:
            return None
        return math.hypot(self.predicted_px[0] - self.truth_px[0], self.predicted_px[1] - self.truth_px[1])


@dataclass(frozen=True)
class PrecisionRecall:
    r: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    precision_degenerate: bool
    recall_degenerate: bool


def anomaly_score(maps, score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> float:
    maps = np.asarray(maps)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.shape[0] < 1:
        raise DataContractError("anomaly_score needs at least one map")
    return float(np.count_nonzero(maps > score_threshold)) / maps.shape[0]


def roc_auc(samples: Sequence[ScoredSample]) -> RocCurve:
    """ROC sweep over distinct scores, tied scores entering as one diagonal step."""
    scores = np.array([s.anomaly_score for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataContractError("ROC needs at least one defective and one defect-free sample")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # last index of every run of equal scores
    cut = np.flatnonzero(np.diff(s) != 0)
    ends = np.concatenate([cut, [s.size - 1]])
    tp = np.cumsum(y)[ends]
    fp = np.cumsum(1 - y)[ends]
    tpr = np.concatenate([[0], tp]) / n_pos
    fpr = np.concatenate([[0], fp]) / n_neg
    auroc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(fpr, tpr, s[ends], auroc)


def pairwise_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score_pos > score_neg) + P(tie)/2 by exhaustive pairing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataContractError("need both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def precision_recall_at(records: Sequence[LocalizationRecord], r: float) -> PrecisionRecall:
    if r < 0:
        raise ValueError(f"distance threshold must be >= 0, got {r}")
    if not records:
        raise DataContractError("no localisation records")
    tp = fp = fn = 0
    for rec in records:
        hit = False
        if rec.predicted_defective:
            d = rec.distance()
            hit = rec.label == 1 and d is not None and d <= r
            if hit:
                tp += 1
            else:
                fp += 1
        if rec.label == 1 and not hit:
            fn += 1
    p, pd = _ratio(tp, tp + fp)
    q, qd = _ratio(tp, tp + fn)
    return PrecisionRecall(float(r), p, q, tp, fp, fn, pd, qd)


def curves_over_r(records: Sequence[LocalizationRecord], r_grid: Iterable[float] = DEFAULT_R_GRID) -> list[PrecisionRecall]:
    grid = list(r_grid)
    if not grid:
        raise ValueError("r grid is empty")
    return [precision_recall_at(records, r) for r in grid]


# ---------------------------------------------------------------------------
# writers


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_roc_csv(path, curve: RocCurve, label: str = "") -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["model", "fpr", "tpr"])
        for f, t in zip(curve.fpr, curve.tpr):
            out.writerow([label, _fmt(f), _fmt(t)])


def write_pr_csv(path, rows: Sequence[PrecisionRecall], label: str = "") -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["model", "r", "precision", "recall", "tp", "fp", "fn", "precision_degenerate", "recall_degenerate"])
        for row in rows:
            out.writerow([label, f"{row.r:g}", _fmt(row.precision), _fmt(row.recall), row.tp, row.fp, row.fn,
                          int(row.precision_degenerate), int(row.recall_degenerate)])


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def svg_line_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], xlabel: str, ylabel: str,
                  xlim: tuple[float, float], ylim: tuple[float, float] = (0.0, 1.0), title: str = "",
                  diagonal: bool = False) -> str:
    """Minimal deterministic SVG line chart."""
    W, H, m = 420, 320, 50
    pw, ph = W - 2 * m, H - 2 * m

    def sx(x):
        return m + (x - xlim[0]) / ((xlim[1] - xlim[0]) or 1.0) * pw

    def sy(y):
        return H - m - (y - ylim[0]) / ((ylim[1] - ylim[0]) or 1.0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
    for k in range(6):
        fx = xlim[0] + (xlim[1] - xlim[0]) * k / 5
        fy = ylim[0] + (ylim[1] - ylim[0]) * k / 5
        parts.append(f'<text x="{sx(fx):.1f}" y="{H - m + 16}" font-size="10" text-anchor="middle">{fx:g}</text>')
        parts.append(f'<text x="{m - 6}" y="{sy(fy) + 3:.1f}" font-size="10" text-anchor="end">{fy:.1f}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 12}" font-size="12" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{H / 2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {H / 2})">{ylabel}</text>')
    if title:
        parts.append(f'<text x="{W / 2}" y="{m - 16}" font-size="13" text-anchor="middle">{title}</text>')
    if diagonal:
        parts.append(f'<line x1="{sx(xlim[0]):.1f}" y1="{sy(ylim[0]):.1f}" x2="{sx(xlim[1]):.1f}" y2="{sy(ylim[1]):.1f}" stroke="#999" stroke-dasharray="4 3"/>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{W - m - 4}" y="{m + 14 + 14 * i}" font-size="11" text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_roc_svg(path, curves: dict[str, RocCurve]) -> None:
    series = {f"{k} (AUROC {c.auroc:.3f})": (c.fpr, c.tpr) for k, c in curves.items()}
    with open(path, "w") as fh:
        fh.write(svg_line_plot(series, "false positive rate", "true positive rate", (0, 1), diagonal=True, title="ROC"))


def write_pr_svg(path, rows: dict[str, Sequence[PrecisionRecall]]) -> None:
    series = {}
    xmax = 1.0
    for name, rs in rows.items():
        xs = [r.r for r in rs]
        xmax = max(xmax, max(xs))
        series[f"{name} precision"] = (xs, [r.precision for r in rs])
        series[f"{name} recall"] = (xs, [r.recall for r in rs])
    with open(path, "w") as fh:
        fh.write(svg_line_plot(series, "distance threshold r (px)", "score", (0, xmax), title="Precision / recall vs r"))
