"""Evaluation metrics: instance AUROC and voxel-level region overlap.

AUROC uses the exact pair-counting formulation (ties count half),
computed by sorting instead of the quadratic loop. The region-overlap
curve sweeps thresholds over a scored volume against a labeled ground
truth; voxels never observed by any view are excluded from both sides
of the false-positive rate as well as from region denominators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Above this many observed voxels the exact threshold set (all distinct
# scores) is replaced by uniform quantiles to bound the curve cost.
EXACT_THRESHOLD_LIMIT = 1_000_000
QUANTILE_THRESHOLDS = 512


@dataclass(frozen=True)
class LabeledScores:
    scores: tuple[float, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.scores) != len(self.labels):
            raise ValueError("scores and labels must have equal length")


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), computed exactly."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs both classes present")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    greater = float(below.sum())
    ties = float((upto - below).sum())
    return (greater + 0.5 * ties) / (pos.size * neg.size)


_NEIGHBORS_26 = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)


def connected_components(mask: np.ndarray) -> np.ndarray:
    """26-connected component labels of a binary 3-D mask.

    Labels are assigned in lexicographic order of each component's seed
    voxel; 0 marks background.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 3:
        raise ValueError("mask must be 3-D")
    labels = np.zeros(mask.shape, dtype=np.int32)
    dims = np.array(mask.shape)
    next_label = 0
    for seed in np.argwhere(mask):
        seed = tuple(seed)
        if labels[seed]:
            continue
        next_label += 1
        labels[seed] = next_label
        frontier = np.array([seed], dtype=np.int64)
        while frontier.size:
            cand = (frontier[:, None, :] + _NEIGHBORS_26[None, :, :]).reshape(-1, 3)
            ok = np.all((cand >= 0) & (cand < dims), axis=1)
            cand = cand[ok]
            cx, cy, cz = cand[:, 0], cand[:, 1], cand[:, 2]
            fresh = mask[cx, cy, cz] & (labels[cx, cy, cz] == 0)
            cand = np.unique(cand[fresh], axis=0)
            if cand.size:
                labels[cand[:, 0], cand[:, 1], cand[:, 2]] = next_label
            frontier = cand
    return labels


def default_thresholds(scores: np.ndarray) -> np.ndarray:
    """Strictly decreasing threshold set for a score population."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size <= EXACT_THRESHOLD_LIMIT:
        return np.unique(scores)[::-1]
    qs = np.linspace(0.0, 1.0, QUANTILE_THRESHOLDS)
    return np.unique(np.quantile(scores, qs))[::-1]


def _observed_region_curve(items, thresholds):
    """Shared curve machinery over (scores, observed, gt, labels) items."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0 or np.any(np.diff(thresholds) >= 0):
        raise ValueError("thresholds must be strictly decreasing")

    region_sorted: list[np.ndarray] = []
    nominal_all: list[np.ndarray] = []
    for scores, observed, gt, labels in items:
        gt = gt.astype(bool)
        nominal_all.append(np.asarray(scores, dtype=np.float64)[observed & ~gt])
        for rid in np.unique(labels[labels > 0]):
            region_obs = (labels == rid) & observed
            if not region_obs.any():
                # Region never seen by any camera: no overlap is measurable.
                continue
            region_sorted.append(np.sort(scores[region_obs].astype(np.float64)))
    nominal = np.sort(np.concatenate(nominal_all)) if nominal_all else np.array([])
    if nominal.size == 0:
        raise ValueError("no observed nominal voxels for the FPR denominator")
    if not region_sorted:
        raise ValueError("ground truth contains no observed anomalous region")

    fpr = (nominal.size - np.searchsorted(nominal, thresholds, side="left")) / nominal.size
    pro = np.zeros_like(thresholds)
    for reg in region_sorted:
        pro += (reg.size - np.searchsorted(reg, thresholds, side="left")) / reg.size
    pro /= len(region_sorted)
    return list(zip(fpr.tolist(), pro.tolist()))


def pro_curve(volume, gt_mask: np.ndarray, thresholds, region_labels: np.ndarray | None = None):
    """Per-region overlap vs false-positive rate over decreasing thresholds.

    `volume` is a VoxelGrid (scores plus hit counts). Returns a list of
    (fpr, mean per-region overlap) points in threshold order.
    """
    gt_mask = np.asarray(gt_mask).astype(bool)
    if volume.scores.shape != gt_mask.shape:
        raise ValueError("volume and ground truth shapes differ")
    if region_labels is None:
        region_labels = connected_components(gt_mask)
    observed = volume.hit_counts > 0
    return _observed_region_curve(
        [(volume.scores, observed, gt_mask, region_labels)], thresholds
    )


def pooled_pro_curve(volumes, gt_masks, thresholds):
    """pro_curve over several instances pooled into one curve.

    Regions from every instance enter the overlap mean with equal
    weight; the FPR denominator pools observed nominal voxels of all
    instances (nominal instances contribute only there).
    """
    items = []
    for vol, gt in zip(volumes, gt_masks):
        gt = np.asarray(gt).astype(bool)
        labels = connected_components(gt) if gt.any() else np.zeros(gt.shape, np.int32)
        items.append((vol.scores, vol.hit_counts > 0, gt, labels))
    return _observed_region_curve(items, thresholds)


def aupro_at(curve, fpr_limit: float = 0.01) -> float:
    """Trapezoidal integral of the overlap curve over FPR in [0, limit].

    The result is normalized by the limit. The curve must reach the
    limit; the segment crossing it is cut by linear interpolation.
    """
    if fpr_limit <= 0:
        raise ValueError("fpr_limit must be positive")
    pts = sorted((float(f), float(p)) for f, p in curve)
    if not pts:
        raise ValueError("empty curve")
    if pts[0][0] > 0.0:
        # Threshold above the max score yields the empty prediction.
        pts.insert(0, (0.0, 0.0))
    if pts[-1][0] < fpr_limit:
        raise ValueError(
            f"curve reaches FPR {pts[-1][0]:.4g} < limit {fpr_limit:.4g}"
        )
    area = 0.0
    for (f0, p0), (f1, p1) in zip(pts, pts[1:]):
        if f1 <= 0.0 or f0 >= fpr_limit:
            continue
        lo, hi = max(f0, 0.0), min(f1, fpr_limit)
        if hi <= lo:
            continue
        if f1 > f0:
            y_lo = p0 + (p1 - p0) * (lo - f0) / (f1 - f0)
            y_hi = p0 + (p1 - p0) * (hi - f0) / (f1 - f0)
        else:
            y_lo = y_hi = 0.5 * (p0 + p1)
        area += 0.5 * (y_lo + y_hi) * (hi - lo)
    return area / fpr_limit
