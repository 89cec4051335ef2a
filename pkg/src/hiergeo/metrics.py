"""Per-scale R@K / mAP and hierarchical ranking metrics (H-AP, ASI, NDCG).

All per-query metrics take ``levels``: the relevance level of every gallery
item listed in predicted rank order (best first). Level ``L`` is a pure
negative.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, ShapeError

SCALE_NAMES = ("small", "middle", "large")


def scale_name(l: int, n_scales: int) -> str:
    return SCALE_NAMES[l] if n_scales <= len(SCALE_NAMES) else f"scale{l}"


def default_gains(n_scales: int) -> tuple[float, ...]:
    L = n_scales
    return tuple((L - l) / L for l in range(L)) + (0.0,)


@dataclass(frozen=True)
class MetricConfig:
    n_scales: int = 3
    gains: tuple[float, ...] | None = None
    k_values: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.n_scales < 1:
            raise ConfigError("n_scales must be >= 1")
        g = default_gains(self.n_scales) if self.gains is None else tuple(float(x) for x in self.gains)
        object.__setattr__(self, "gains", g)
        if len(g) != self.n_scales + 1:
            raise ConfigError(f"need {self.n_scales + 1} gains, got {len(g)}")
        if g[-1] != 0 or any(b > a for a, b in zip(g, g[1:])) or min(g) < 0:
            raise ConfigError(f"gains must be non-increasing, non-negative, ending in 0: {g}")
        if not self.k_values or min(self.k_values) < 1:
            raise ConfigError("K values must be >= 1")


@dataclass(frozen=True)
class RankedList:
    query_id: int
    gallery_ids: np.ndarray


def rank_order(scores: np.ndarray, gallery_ids: np.ndarray, higher_is_better: bool = True) -> np.ndarray:
    """Indices into the gallery in rank order; ties go to the smaller image id."""
    s = np.asarray(scores, dtype=np.float64)
    key = -s if higher_is_better else s
    return np.lexsort((np.asarray(gallery_ids), key))


def ranked_list(query_id: int, scores, gallery_ids, higher_is_better: bool = True) -> RankedList:
    g = np.asarray(gallery_ids)
    return RankedList(int(query_id), g[rank_order(scores, g, higher_is_better)])


# ---------------------------------------------------------------------------
# per-query metrics
# ---------------------------------------------------------------------------

def recall_at_k(levels, scale: int, k: int) -> int:
    """1 if any item with level <= scale is in the top ``k`` (``k`` clamped to the list)."""
    if k < 1:
        raise InputError("K must be >= 1")
    lv = np.asarray(levels)
    return int(np.any(lv[:k] <= scale))


def average_precision(levels, scale: int) -> float:
    rel = np.asarray(levels) <= scale
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise InputError("average precision needs at least one relevant item")
    pos = np.flatnonzero(rel) + 1
    return float(np.sum(np.arange(1, n_rel + 1) / pos) / n_rel)


def h_ap(levels, gains: Sequence[float]) -> float:
    """Hierarchical AP with H-rank(k) = rel(k) + sum_{j before k} min(rel(j), rel(k)).

    The sum is regrouped as ``rel(k) * #{j < k: rel(j) >= rel(k)} + sum of the
    smaller rel(j)``, so every term of a gain-sorted list is exactly ``rel(k)``
    and the ideal ranking scores exactly 1.
    """
    g = np.asarray(gains, dtype=np.float64)
    lv = np.asarray(levels, dtype=np.int64)
    rel = g[lv]
    pos = rel > 0
    if not pos.any():
        raise InputError("H-AP needs at least one item with positive gain")
    onehot = np.zeros((len(lv), len(g)))
    onehot[np.arange(len(lv)), lv] = 1.0
    before = np.cumsum(onehot, axis=0) - onehot      # counts of each level strictly above k
    ge = g[None, :] >= g[lv][:, None]                # level l is at least as relevant as item k
    n_ge = np.sum(before * ge, axis=1)
    s_lt = np.sum(before * np.where(ge, 0.0, g[None, :]), axis=1)
    ranks = np.arange(1, len(lv) + 1)
    terms = rel * ((1.0 + n_ge) / ranks) + s_lt / ranks
    return float(np.sum(terms[pos]) / np.sum(rel[pos]))


def asi(levels, gains: Sequence[float]) -> float:
    """Average set intersection against the tie-aware ideal top-i sets, i = 1..m."""
    g = np.asarray(gains, dtype=np.float64)
    lv = np.asarray(levels, dtype=np.int64)
    n_levels = len(g)
    counts = np.bincount(lv, minlength=n_levels)
    m = int(counts[g > 0].sum())
    if m == 0:
        raise InputError("ASI needs at least one item with positive gain")
    onehot = np.zeros((m, n_levels), dtype=np.int64)
    onehot[np.arange(m), lv[:m]] = 1
    pred = np.cumsum(onehot, axis=0)                 # pred[i-1, l] = level-l items in top i
    cum_ideal = np.cumsum(counts)
    i = np.arange(1, m + 1)
    boundary = np.searchsorted(cum_ideal, i, side="left")   # first level not fully inside top i
    inside = np.where(boundary > 0, cum_ideal[np.maximum(boundary - 1, 0)], 0)
    full = np.cumsum(pred, axis=1)
    inter = np.where(boundary > 0, full[i - 1, np.maximum(boundary - 1, 0)], 0)
    inter = inter + np.minimum(pred[i - 1, boundary], i - inside)
    return float(np.mean(inter / i))


def ndcg(levels, n_scales: int) -> float:
    """NDCG with integer gains ``L - level`` and ``(2^g - 1) / log2(i + 1)``."""
    lv = np.asarray(levels, dtype=np.int64)
    g = (n_scales - lv).astype(np.float64)
    if not np.any(g > 0):
        raise InputError("NDCG needs at least one item with positive gain")
    disc = 1.0 / np.log2(np.arange(2, len(lv) + 2))
    dcg = np.sum((2.0 ** g - 1.0) * disc)
    idcg = np.sum((2.0 ** np.sort(g)[::-1] - 1.0) * disc)
    return float(dcg / idcg)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    n_scales: int
    k_values: tuple[int, ...]
    map: list[float]                       # per scale
    recall: list[dict]                     # per scale: K -> R@K
    hap: float
    asi: float
    ndcg: float
    excluded: dict = field(default_factory=dict)
    n_queries: int = 0

    @property
    def map_overall(self) -> float:
        return float(np.mean(self.map))

    def recall_overall(self, k: int) -> float:
        return float(np.mean([r[k] for r in self.recall]))

    def to_dict(self) -> dict:
        out = {}
        for l in range(self.n_scales):
            out[f"map_{scale_name(l, self.n_scales)}"] = self.map[l]
        out["map_overall"] = self.map_overall
        for k in self.k_values:
            for l in range(self.n_scales):
                out[f"r{k}_{scale_name(l, self.n_scales)}"] = self.recall[l][k]
            out[f"r{k}_overall"] = self.recall_overall(k)
        out.update(hap=self.hap, asi=self.asi, ndcg=self.ndcg,
                   excluded_queries=dict(self.excluded), n_queries=self.n_queries)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        rows = ["metric,scale,value,excluded_queries"]
        for l in range(self.n_scales):
            name = scale_name(l, self.n_scales)
            rows.append(f"map,{name},{self.map[l]!r},{self.excluded.get(f'map_{name}', 0)}")
            for k in self.k_values:
                rows.append(f"r{k},{name},{self.recall[l][k]!r},{self.excluded.get(f'map_{name}', 0)}")
        rows.append(f"map,overall,{self.map_overall!r},")
        for k in self.k_values:
            rows.append(f"r{k},overall,{self.recall_overall(k)!r},")
        for key in ("hap", "asi", "ndcg"):
            rows.append(f"{key},all,{getattr(self, key)!r},{self.excluded.get(key, 0)}")
        return "\n".join(rows) + "\n"


def _query_metrics(levels: np.ndarray, config: MetricConfig) -> dict:
    L = config.n_scales
    out = {}
    for l in range(L):
        if np.any(levels <= l):
            out[("ap", l)] = average_precision(levels, l)
            for k in config.k_values:
                out[("r", l, k)] = recall_at_k(levels, l, k)
    if np.any(levels < L):
        out["hap"] = h_ap(levels, config.gains)
        out["asi"] = asi(levels, config.gains)
        out["ndcg"] = ndcg(levels, L)
    return out


def evaluate(scores: np.ndarray, relevance: np.ndarray, gallery_ids, config: MetricConfig,
             higher_is_better: bool = True, threads: int = 1) -> MetricReport:
    """Rank every query row of ``scores`` and average all metrics over queries.

    Queries with no relevant item for a metric are excluded from that
    metric's mean and counted in ``excluded``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance)
    gallery_ids = np.asarray(gallery_ids)
    if scores.shape != relevance.shape or scores.shape[1:] != gallery_ids.shape:
        raise ShapeError(f"scores {scores.shape}, relevance {relevance.shape}, "
                         f"gallery {gallery_ids.shape} disagree")
    nq = scores.shape[0]
    if nq == 0:
        raise InputError("empty query set")

    def one(q):
        order = rank_order(scores[q], gallery_ids, higher_is_better)
        return _query_metrics(relevance[q, order], config)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            per_query = list(pool.map(one, range(nq)))
    else:
        per_query = [one(q) for q in range(nq)]

    L = config.n_scales
    excluded = {}

    def mean_of(key, name=None):
        vals = [m[key] for m in per_query if key in m]
        if name is not None:
            excluded[name] = nq - len(vals)
        return float(np.mean(vals)) if vals else float("nan")

    maps, recalls = [], []
    for l in range(L):
        maps.append(mean_of(("ap", l), f"map_{scale_name(l, L)}"))
        recalls.append({k: mean_of(("r", l, k)) for k in config.k_values})
    hap_v = mean_of("hap", "hap")
    asi_v = mean_of("asi", "asi")
    ndcg_v = mean_of("ndcg", "ndcg")
    return MetricReport(L, tuple(config.k_values), maps, recalls, hap_v, asi_v, ndcg_v,
                        excluded, nq)
