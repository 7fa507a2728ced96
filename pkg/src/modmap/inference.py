"""Anomaly-map inference: per-pair maps, min-ensembling, masking.

For every (source, target) view pair the model predicts each modality's
features from the other; per-position cosine distances between predicted
and observed features form the pair anomaly maps. Per target view the
maps are ensembled by a per-position minimum over the used source views,
so one clean source suffices to certify a position nominal. Background
positions (insufficient valid depth) are zeroed afterwards.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .encoders import InstanceFeatures
from .model import ModMapModel, view_codes, _modulate_forward
from .nn import rows_cosine_distance, mlp_forward

TAU_BACKGROUND = 0.5


def worker_count() -> int:
    """Worker cap from MODMAP_THREADS; defaults to 1."""
    raw = os.environ.get("MODMAP_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class AnomalyMapSet:
    """Per-pair and per-view anomaly maps of one instance.

    per_pair_* are (N, N, h, w) with NaN rows for unused sources;
    per_view_* are (N, h, w). Background cells are zero everywhere.
    """

    per_view_image: np.ndarray
    per_view_depth: np.ndarray
    background: np.ndarray
    source_views_used: tuple[int, ...]
    per_pair_image: np.ndarray | None = None
    per_pair_depth: np.ndarray | None = None

    @property
    def n_views(self) -> int:
        return self.per_view_image.shape[0]


def pair_anomaly_maps(
    model: ModMapModel,
    features: InstanceFeatures,
    s: int,
    t: int,
    class_index: int | None = None,
):
    """Anomaly maps (image, depth) for one source-target pair.

    Returns (psi_image, psi_depth, degenerate) as (h, w) arrays; the
    degenerate mask flags positions whose score is meaningless (zero
    feature norms) and which must be treated as background.
    """
    code_s, code_t = view_codes(model, s, t, class_index)
    h, w = features.h, features.w

    mod_i, _ = _modulate_forward(model.phi_image, features.image_vectors(s), code_s, code_t)
    pred_d, _ = mlp_forward(model.map_i2d.net, mod_i)
    psi_d, _, deg_d = rows_cosine_distance(pred_d, features.depth_vectors(t))

    mod_d, _ = _modulate_forward(model.phi_depth, features.depth_vectors(s), code_s, code_t)
    pred_i, _ = mlp_forward(model.map_d2i.net, mod_d)
    psi_i, _, deg_i = rows_cosine_distance(pred_i, features.image_vectors(t))

    degenerate = (deg_d | deg_i).reshape(h, w)
    return (
        psi_i.astype(np.float32).reshape(h, w),
        psi_d.astype(np.float32).reshape(h, w),
        degenerate,
    )


def ensemble_min(pair_maps: np.ndarray, used_sources) -> np.ndarray:
    """Per-position minimum of (N, h, w) pair maps over the used sources."""
    used = list(used_sources)
    if not used:
        raise ValueError("used_sources must not be empty")
    return np.min(pair_maps[used], axis=0)


def background_mask(depth: np.ndarray, patch_size: int, tau_bg: float = TAU_BACKGROUND) -> np.ndarray:
    """Feature cells whose patch valid-fraction is below tau_bg."""
    from .encoders import patch_valid_fraction

    return patch_valid_fraction(depth, patch_size) < tau_bg


def infer_views(
    model: ModMapModel,
    features: InstanceFeatures,
    depths: list[np.ndarray],
    subsample_k: int | None = None,
    seed: int = 0,
    single_view: bool = False,
    class_index: int | None = None,
    tau_bg: float = TAU_BACKGROUND,
    store_pairs: bool = True,
) -> AnomalyMapSet:
    """Ensembled anomaly maps for all target views of one instance.

    With `subsample_k`, a seeded uniform sample of k source views is
    drawn once and used for every target. `single_view` scores each
    target only from itself (source == target), bypassing cross-view
    ensembling. With store_pairs=False only O(N) maps are held live.
    """
    n = model.n_views
    if features.n_views != n or len(depths) != n:
        raise ValueError("features/depths view count does not match model")
    h, w = features.h, features.w

    if single_view:
        used = tuple(range(n))
    elif subsample_k is not None:
        if not (1 <= subsample_k <= n):
            raise ValueError(f"subsample_k {subsample_k} outside 1..{n}")
        rng = np.random.default_rng(seed)
        used = tuple(sorted(rng.choice(n, size=subsample_k, replace=False).tolist()))
    else:
        used = tuple(range(n))

    per_view_i = np.full((n, h, w), np.inf, dtype=np.float32)
    per_view_d = np.full((n, h, w), np.inf, dtype=np.float32)
    degenerate = np.zeros((n, h, w), dtype=bool)
    pairs_i = np.full((n, n, h, w), np.nan, dtype=np.float32) if store_pairs else None
    pairs_d = np.full((n, n, h, w), np.nan, dtype=np.float32) if store_pairs else None

    if single_view:
        pair_list = [(t, t) for t in range(n)]
    else:
        pair_list = [(s, t) for s in used for t in range(n)]

    def _run_pair(pair):
        s, t = pair
        return s, t, pair_anomaly_maps(model, features, s, t, class_index)

    workers = worker_count()
    if workers > 1 and len(pair_list) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_pair, pair_list))
    else:
        results = map(_run_pair, pair_list)

    for s, t, (psi_i, psi_d, deg) in results:
        np.minimum(per_view_i[t], psi_i, out=per_view_i[t])
        np.minimum(per_view_d[t], psi_d, out=per_view_d[t])
        degenerate[t] |= deg
        if store_pairs:
            pairs_i[s, t] = psi_i
            pairs_d[s, t] = psi_d

    background = np.stack(
        [background_mask(depths[t], model.encoder_config.patch_size, tau_bg) for t in range(n)]
    )
    background |= degenerate
    per_view_i[background] = 0.0
    per_view_d[background] = 0.0
    if store_pairs:
        pairs_i[:, background] = 0.0
        pairs_d[:, background] = 0.0

    return AnomalyMapSet(
        per_view_image=per_view_i,
        per_view_depth=per_view_d,
        background=background,
        source_views_used=used if not single_view else tuple(range(n)),
        per_pair_image=pairs_i,
        per_pair_depth=pairs_d,
    )
