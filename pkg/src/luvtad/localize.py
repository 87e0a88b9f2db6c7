"""Defect localisation from per-frame reconstruction residuals.

The pipeline for one sequence is

    residuals |x - x_hat| per frame
    -> fraction of (threshold, frame) pairs exceeding each threshold (mean map)
    -> binarise at one third of the mean map's maximum
    -> connected components
    -> verdict and centroid from the largest component.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_THRESHOLDS = tuple(round(0.15 + 0.01 * i, 2) for i in range(21))
REFERENCE_PIXELS = 128 * 128
REFERENCE_DECISION_THRESHOLD = 1000.0


@dataclass(frozen=True)
class Component:
    label: int
    area: int
    first_pixel: tuple[int, int]


@dataclass
class Labeling:
    labels: np.ndarray  # int32 per pixel, 0 = background
    components: list[Component]  # sorted by area desc, then first pixel


@dataclass
class DefectPrediction:
    verdict: str
    centroid_px: Optional[tuple[float, float]]
    component_score: float
    component_area: int

    @property
    def is_defective(self) -> bool:
        return self.verdict == "defective"


def default_decision_threshold(shape: tuple[int, int]) -> float:
    """Reference threshold of 1000 at 128x128, scaled by pixel count."""
    return REFERENCE_DECISION_THRESHOLD * (shape[0] * shape[1]) / REFERENCE_PIXELS


def diff_map(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    xhat = np.asarray(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"frame shape {x.shape} != reconstruction shape {xhat.shape}")
    return np.abs(x - xhat)


def multi_threshold_binarize(maps: np.ndarray | Sequence[np.ndarray], thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Mean over all frames and thresholds of the binary maps ``map > threshold``."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3 or maps.shape[0] == 0:
        raise ShapeError("need a non-empty stack of (h, w) anomaly maps")
    taus = np.asarray(thresholds, dtype=np.float64)
    if taus.size == 0:
        raise ShapeError("threshold list is empty")
    counts = np.zeros(maps.shape[1:], dtype=np.int64)
    for tau in taus:
        counts += (maps > tau).sum(axis=0)
    return counts / (taus.size * maps.shape[0])


def second_binarize(zpre: np.ndarray) -> np.ndarray:
    zpre = np.asarray(zpre)
    peak = float(zpre.max()) if zpre.size else 0.0
    if peak <= 0.0:
        return np.zeros(zpre.shape, dtype=np.uint8)
    return (zpre > peak / 3.0).astype(np.uint8)


# already-visited neighbours in raster order
_BACKWARD = {4: ((-1, 0), (0, -1)), 8: ((-1, -1), (-1, 0), (-1, 1), (0, -1))}


def _find(parent: list[int], i: int) -> int:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _two_pass_label(mask: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    """Raster-scan labelling with union-find; labels are 1..n in order of first pixel."""
    if connectivity not in _BACKWARD:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    h, w = mask.shape
    prov = np.zeros((h, w), dtype=np.int64)
    parent = [0]
    nbrs = _BACKWARD[connectivity]
    for r, c in zip(*np.nonzero(mask)):
        roots = [prov[r + dy, c + dx] for dy, dx in nbrs if r + dy >= 0 and 0 <= c + dx < w and prov[r + dy, c + dx]]
        if not roots:
            parent.append(len(parent))
            prov[r, c] = len(parent) - 1
            continue
        roots = [_find(parent, q) for q in roots]
        keep = min(roots)
        for q in roots:
            parent[q] = keep
        prov[r, c] = keep
    # resolve and compact; provisional ids grow in raster order, so the smallest root
    # of each set is its first pixel and compaction preserves first-pixel order
    final = np.zeros(len(parent), dtype=np.int64)
    n = 0
    for i in range(1, len(parent)):
        root = _find(parent, i)
        if root == i:
            n += 1
            final[i] = n
        else:
            final[i] = final[root]
    return final[prov], n


def connected_components(mask: np.ndarray, connectivity: int = 8) -> Labeling:
    """Label ``mask`` and renumber components by (area desc, first pixel asc).

    Label ``i`` (1-based) corresponds to ``components[i - 1]``.
    """
    mask = np.asarray(mask).astype(bool)
    raw, n = _two_pass_label(mask, connectivity)
    if n == 0:
        return Labeling(np.zeros(mask.shape, dtype=np.int32), [])
    flat = raw.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    # first pixel in raster order, which is also the lexicographically smallest (row, col)
    order = np.flatnonzero(flat)
    first = np.full(n, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[order] - 1, order)
    ranking = sorted(range(n), key=lambda i: (-areas[i], first[i]))
    remap = np.zeros(n + 1, dtype=np.int32)
    comps = []
    w = mask.shape[1]
    for new, old in enumerate(ranking, start=1):
        remap[old + 1] = new
        comps.append(Component(new, int(areas[old]), (int(first[old] // w), int(first[old] % w))))
    return Labeling(remap[raw].astype(np.int32), comps)


def component_scores(labeling: Labeling, zpre: np.ndarray) -> np.ndarray:
    """Sum of ``zpre`` over each component, indexed like ``labeling.components``."""
    n = len(labeling.components)
    sums = np.bincount(labeling.labels.ravel(), weights=np.asarray(zpre, dtype=np.float64).ravel(), minlength=n + 1)
    return sums[1:]


def decide_defect(labeling: Labeling, zpre: np.ndarray, decision_threshold: Optional[float] = None) -> DefectPrediction:
    if labeling.labels.shape != np.shape(zpre):
        raise ShapeError(f"labeling {labeling.labels.shape} and mean map {np.shape(zpre)} differ")
    if decision_threshold is None:
        decision_threshold = default_decision_threshold(labeling.labels.shape)
    if not labeling.components:
        return DefectPrediction("defect-free", None, 0.0, 0)
    largest = labeling.components[0]
    score = float(component_scores(labeling, zpre)[0])
    if score > decision_threshold:
        rows, cols = np.nonzero(labeling.labels == largest.label)
        return DefectPrediction("defective", (float(rows.mean()), float(cols.mean())), score, largest.area)
    return DefectPrediction("defect-free", None, score, largest.area)


@dataclass(frozen=True)
class LocalizationParams:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    connectivity: int = 8
    decision_threshold: Optional[float] = None  # None: scaled reference value


@dataclass
class LocalizationResult:
    prediction: DefectPrediction
    maps: np.ndarray
    zpre: np.ndarray
    mask: np.ndarray


def localize_sequence(frames: np.ndarray, recon: np.ndarray, params: LocalizationParams = LocalizationParams()) -> LocalizationResult:
    """Run the full per-sequence localisation and keep the intermediate images."""
    frames = np.asarray(frames)
    recon = np.asarray(recon)
    if frames.shape != recon.shape or frames.ndim != 3:
        raise ShapeError(f"frames {frames.shape} and reconstructions {recon.shape} must both be (K, h, w)")
    maps = np.stack([diff_map(x, xh) for x, xh in zip(frames, recon)])
    zpre = multi_threshold_binarize(maps, params.thresholds)
    mask = second_binarize(zpre)
    labeling = connected_components(mask, params.connectivity)
    pred = decide_defect(labeling, zpre, params.decision_threshold)
    return LocalizationResult(pred, maps, zpre, mask)
