"""Mirror correspondences on the rectified image and the cycle-consistency filter."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .imaging import CorrespondenceSet, Flow1D

CHAIN_RADIUS = 1.0


@dataclass
class MatcherConfig:
    patch_radius: int = 5
    search_radius: Optional[int] = None  # None -> the image width
    min_contrast: float = 0.02
    zncc_accept: float = 0.8
    lr_tolerance: float = 1.5

    def __post_init__(self):
        if self.patch_radius < 1 or (self.search_radius is not None and self.search_radius < 1):
            raise ValueError("radii must be >= 1")
        if not 0 < self.zncc_accept <= 1 or not 0 < self.min_contrast <= 1:
            raise ValueError("thresholds must lie in (0, 1]")
        if self.lr_tolerance <= 0:
            raise ValueError("lr_tolerance must be positive")

    def resolved_search_radius(self, width: int) -> int:
        return self.search_radius if self.search_radius is not None else max(1, width)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FilterConfig:
    cycle_threshold: float = 7.0
    # "any": keep if some source within CHAIN_RADIUS of b closes the cycle;
    # "nearest": only the nearest such source is tried
    chain_rule: str = "any"

    def __post_init__(self):
        if not self.cycle_threshold > 0:
            raise ValueError("cycle_threshold must be positive")
        if self.chain_rule not in ("any", "nearest"):
            raise ValueError(f"unknown chain_rule {self.chain_rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Scanline matcher
# ---------------------------------------------------------------------------


def _row_patches(image: np.ndarray, row: int, r: int):
    """Zero-mean unit-norm patches centred on each column of ``row`` (NaN rows where the patch
    leaves the image), their flipped versions, and per-patch standard deviations."""
    h, w = image.shape
    n = (2 * r + 1) ** 2
    vec = np.full((w, n), np.nan)
    flipped = np.full((w, n), np.nan)
    std = np.zeros(w)
    if row < r or row >= h - r or w < 2 * r + 1:
        return vec, flipped, std
    band = image[row - r : row + r + 1]
    win = sliding_window_view(band, (2 * r + 1, 2 * r + 1))[0]  # (w - 2r, k, k)
    flat = win.reshape(len(win), n)
    mean = flat.mean(axis=1, keepdims=True)
    centred = flat - mean
    norm = np.sqrt((centred**2).sum(axis=1, keepdims=True))
    std[r : w - r] = norm[:, 0] / np.sqrt(n)
    unit = centred / np.where(norm > 0, norm, 1.0)
    vec[r : w - r] = unit
    flipped[r : w - r] = unit.reshape(-1, 2 * r + 1, 2 * r + 1)[:, :, ::-1].reshape(-1, n)
    return vec, flipped, std


def _parabola_offset(left: float, centre: float, right: float) -> float:
    denom = left - 2.0 * centre + right
    if not np.isfinite(denom) or denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def _match_row(image, mask, row, cfg: MatcherConfig, search: int):
    h, w = image.shape
    r = cfg.patch_radius
    flow = np.zeros(w)
    valid = np.zeros(w, dtype=bool)
    score = np.zeros(w)
    vec, flipped, std = _row_patches(image, row, r)
    usable = mask[row] & np.isfinite(vec[:, 0]) & (std >= cfg.min_contrast)
    cols = np.nonzero(usable)[0]
    if len(cols) < 2:
        return flow, valid, score
    # S[i, j] = zncc(flip(patch_i), patch_j); symmetric in (i, j)
    S = flipped[cols] @ vec[cols].T
    dist = np.abs(cols[:, None] - cols[None, :])
    S = np.where(dist <= search, S, -np.inf)
    best = np.argmax(S, axis=1)
    best_score = S[np.arange(len(cols)), best]

    def refined(i, j):
        c = cols[j]
        left = S[i, j - 1] if j > 0 and cols[j - 1] == c - 1 else np.nan
        right = S[i, j + 1] if j + 1 < len(cols) and cols[j + 1] == c + 1 else np.nan
        off = _parabola_offset(left, S[i, j], right) if np.isfinite(left) and np.isfinite(right) else 0.0
        return c + off - cols[i]

    for i in range(len(cols)):
        j = best[i]
        if not best_score[i] >= cfg.zncc_accept:
            continue
        f = refined(i, j)
        f_back = refined(j, best[j])
        if abs(f + f_back) > cfg.lr_tolerance:
            continue
        flow[cols[i]] = f
        valid[cols[i]] = True
        score[cols[i]] = best_score[i]
    return flow, valid, score


def match_scanlines(rectified: np.ndarray, rectified_mask: np.ndarray, cfg: Optional[MatcherConfig] = None, threads: int = 1) -> Flow1D:
    """Mirrored-patch ZNCC search along each row of a rectified image.

    The reference patch is flipped horizontally before comparison, since a
    mirror counterpart shows mirrored local appearance. A match needs ZNCC of
    at least ``zncc_accept`` and a left-right re-match agreeing within
    ``lr_tolerance``; displacements are refined by a parabola fit.
    """
    cfg = cfg or MatcherConfig()
    image = np.asarray(rectified, dtype=float)
    mask = np.asarray(rectified_mask, dtype=bool)
    if image.shape != mask.shape:
        raise ValueError("image and mask sizes differ")
    h, w = image.shape
    search = cfg.resolved_search_radius(w)
    rows = range(h)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda row: _match_row(image, mask, row, cfg, search), rows))
    else:
        results = [_match_row(image, mask, row, cfg, search) for row in rows]
    flow = np.stack([r[0] for r in results])
    valid = np.stack([r[1] for r in results])
    score = np.stack([r[2] for r in results])
    return Flow1D(flow, valid, score)


# ---------------------------------------------------------------------------
# Cycle-consistency filter
# ---------------------------------------------------------------------------


def cycle_errors(pairs: CorrespondenceSet, rule: str = "any") -> np.ndarray:
    """Closing error ``|a - c|`` of each pair ``(a, b)`` chained through a pair ``(b', c)``
    with ``|b' - b| <= 1`` px; ``inf`` when no such pair exists.

    With ``rule="nearest"`` only the nearest ``b'`` is used, otherwise the
    smallest closing error over all candidates.
    """
    n = len(pairs)
    err = np.full(n, np.inf)
    if n == 0:
        return err
    tree = cKDTree(pairs.p)
    if rule == "nearest":
        d, j = tree.query(pairs.q, k=1, distance_upper_bound=CHAIN_RADIUS)
        found = np.isfinite(d)
        err[found] = np.linalg.norm(pairs.p[found] - pairs.q[j[found]], axis=1)
        return err
    cands = tree.query_ball_point(pairs.q, r=CHAIN_RADIUS)
    for i, js in enumerate(cands):
        if js:
            err[i] = np.linalg.norm(pairs.q[js] - pairs.p[i], axis=1).min()
    return err


def consistency_filter(pairs: CorrespondenceSet, cfg: Optional[FilterConfig] = None) -> CorrespondenceSet:
    """Keep ``(a, b)`` iff chaining through b's own correspondence returns within the threshold of a."""
    cfg = cfg or FilterConfig()
    keep = cycle_errors(pairs, cfg.chain_rule) <= cfg.cycle_threshold
    return pairs.subset(keep)
