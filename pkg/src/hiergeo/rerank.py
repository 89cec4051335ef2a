"""k-reciprocal Jaccard re-ranking and segmented accumulative multi-scale re-ranking.

Every function works on an *augmented* square distance matrix whose index 0
is the query and indices ``1..n`` are the gallery. Neighbourhoods are
defined as ``N(x, k)``: ``x`` itself plus its ``k`` nearest other points
(ties broken by index).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError


@dataclass(frozen=True)
class RerankConfig:
    k: int = 20
    lambda_fuse: float = 0.3
    k_expand: int | None = None
    mu: float = 0.1
    k_floor: int = 20

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.lambda_fuse <= 1.0:
            raise ConfigError("lambda_fuse must lie in [0, 1]")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        if self.k_expand is not None and self.k_expand < 1:
            raise ConfigError("k_expand must be >= 1")
        if self.k_floor < 1:
            raise ConfigError("k_floor must be >= 1")

    @property
    def expand(self) -> int:
        return self.k_expand if self.k_expand is not None else max(1, self.k // 2)


def _check_matrix(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ShapeError(f"augmented distance matrix must be square, got {D.shape}")
    if D.shape[0] < 2:
        raise InputError("need a query and at least one gallery item")
    return D


def _neighbour_mask(order: np.ndarray, k: int) -> np.ndarray:
    n = order.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n)[:, None], order[:, :k + 1]] = True
    return mask


def jaccard_distance(D, k: int, k_expand: int) -> np.ndarray:
    """Jaccard distance from the query (index 0) to every point of ``D``."""
    D = _check_matrix(D)
    n = D.shape[0]
    if k >= n or k_expand >= n:
        raise ConfigError(f"k={k} / k_expand={k_expand} must be smaller than matrix size {n}")
    key = D.copy()
    np.fill_diagonal(key, -np.inf)                   # each point is its own first neighbour
    order = np.argsort(key, axis=1, kind="stable")

    nk = _neighbour_mask(order, k)
    recip = nk & nk.T
    nh = _neighbour_mask(order, k_expand)
    recip_h = (nh & nh.T).astype(np.float64)

    # expand R(x,k) with R(y,k_expand) for y in R(x,k) when they overlap by >= 2/3
    overlap = recip.astype(np.float64) @ recip_h.T
    size_h = recip_h.sum(axis=1)
    take = recip & (3.0 * overlap >= 2.0 * size_h[None, :])
    expanded = recip | ((take.astype(np.float64) @ recip_h) > 0)

    w = np.where(expanded, np.exp(-D), 0.0)
    V = w / w.sum(axis=1, keepdims=True)
    # local query expansion over N(x, k_expand)
    V = (nh.astype(np.float64) @ V) / (k_expand + 1)

    vq = V[0]
    inter = np.minimum(vq[None, :], V).sum(axis=1)
    union = np.maximum(vq[None, :], V).sum(axis=1)
    return 1.0 - inter / union


def k_reciprocal_rerank(D, config: RerankConfig) -> np.ndarray:
    """Re-ranked distances from the query to each gallery item (length ``n - 1``)."""
    D = _check_matrix(D)
    if config.k >= D.shape[0]:
        raise ConfigError(f"k={config.k} must be smaller than matrix size {D.shape[0]}")
    dj = jaccard_distance(D, config.k, min(config.expand, D.shape[0] - 1))
    lam = config.lambda_fuse
    return lam * D[0, 1:] + (1.0 - lam) * dj[1:]


# ---------------------------------------------------------------------------
# multi-scale
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KSchedule:
    ks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("k schedule needs at least one positive entry")

    def __len__(self):
        return len(self.ks)

    def __iter__(self):
        return iter(self.ks)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def compute_k_schedule(cumulative_counts: Sequence[Sequence[int]], config: RerankConfig) -> KSchedule:
    """``k^l = max(k_floor, round(mu / C * sum_c |S_c^{<=l}|))``.

    ``cumulative_counts[c][l]`` is the image count ``|S_c^{<=l}|`` of training
    building ``c`` (see :meth:`ScalePartition.image_counts`).
    """
    counts = np.asarray(cumulative_counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] == 0 or counts.shape[1] == 0:
        raise ConfigError("k schedule needs a non-empty training set")
    C = counts.shape[0]
    totals = counts.sum(axis=0)
    return KSchedule(tuple(max(config.k_floor, round_half_up(config.mu / C * t)) for t in totals))


@dataclass
class MSRerankTrace:
    stage_distances: list[np.ndarray]
    accumulated: list[np.ndarray]
    selected: list[np.ndarray]


def ms_rerank(D, schedule: KSchedule | Sequence[int], config: RerankConfig,
              trace: MSRerankTrace | None = None) -> np.ndarray:
    """Segmented accumulative re-ranking.

    For each stage ``l``: re-rank with ``k^l``, add the stage distances to the
    still-active entries, pick the ``k^l`` gallery entries with the smallest
    accumulated distance and deactivate them.
    """
    D = _check_matrix(D)
    ks = tuple(schedule)
    if not ks:
        raise ConfigError("empty k schedule")
    n_g = D.shape[0] - 1
    if max(ks) > n_g:
        raise ConfigError(f"schedule {ks} has entries >= matrix size {D.shape[0]}")
    d_star = np.zeros(n_g)
    active = np.ones(n_g, dtype=bool)
    for k in ks:
        stage_cfg = replace(config, k=k, k_expand=config.k_expand)
        d_l = k_reciprocal_rerank(D, stage_cfg)
        d_star[active] += d_l[active]
        selected = np.argsort(d_star, kind="stable")[:k]
        active[selected] = False
        if trace is not None:
            trace.stage_distances.append(d_l)
            trace.accumulated.append(d_star.copy())
            trace.selected.append(selected)
    return d_star


def _augmented(dq: np.ndarray, dgg: np.ndarray) -> np.ndarray:
    n = len(dq) + 1
    D = np.empty((n, n))
    D[0, 0] = 0.0
    D[0, 1:] = dq
    D[1:, 0] = dq
    D[1:, 1:] = dgg
    return D


def rerank_queries(dist_qg: np.ndarray, dist_gg: np.ndarray, config: RerankConfig,
                   schedule: KSchedule | Sequence[int] | None = None,
                   threads: int = 1) -> np.ndarray:
    """Re-rank every query row. ``schedule=None`` runs standard re-ranking with
    ``config.k``; otherwise multi-scale re-ranking with that schedule.

    Each query gets its own ``(1 + n_gallery)`` matrix sliced from the shared
    query-gallery and gallery-gallery blocks.
    """
    dist_qg = np.asarray(dist_qg, dtype=np.float64)
    dist_gg = np.asarray(dist_gg, dtype=np.float64)
    if dist_gg.shape != (dist_qg.shape[1],) * 2:
        raise ShapeError("gallery-gallery block does not match query-gallery block")

    def one(q):
        D = _augmented(dist_qg[q], dist_gg)
        if schedule is None:
            return k_reciprocal_rerank(D, config)
        return ms_rerank(D, schedule, config)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, range(len(dist_qg))))
    else:
        rows = [one(q) for q in range(len(dist_qg))]
    return np.stack(rows) if rows else np.zeros_like(dist_qg)


# ---------------------------------------------------------------------------
# rank-shift diagnostic
# ---------------------------------------------------------------------------

def ranking_from_distances(dist: np.ndarray) -> np.ndarray:
    """Gallery indices per query by ascending distance (ties by index)."""
    return np.argsort(np.asarray(dist, dtype=np.float64), axis=1, kind="stable")


def rank_shift_profile(order_before: np.ndarray, order_after: np.ndarray) -> np.ndarray:
    """Mean ``|new position - old position|`` for each original position, over queries."""
    a = np.atleast_2d(np.asarray(order_before))
    b = np.atleast_2d(np.asarray(order_after))
    if a.shape != b.shape:
        raise InputError(f"ranking shapes differ: {a.shape} vs {b.shape}")
    if not np.array_equal(np.sort(a, axis=1), np.sort(b, axis=1)):
        raise InputError("rankings are over different galleries")
    nq, n = a.shape
    shifts = np.zeros((nq, n))
    for q in range(nq):
        by_id = np.argsort(b[q], kind="stable")       # position in b of the i-th smallest id
        new_pos = by_id[np.searchsorted(b[q][by_id], a[q])]
        shifts[q] = np.abs(new_pos - np.arange(n))
    return shifts.mean(axis=0)


def shift_profile_csv(profile: np.ndarray, label: str = "shift") -> str:
    lines = [f"position,{label}"]
    lines += [f"{p + 1},{float(v)!r}" for p, v in enumerate(profile)]
    return "\n".join(lines) + "\n"
