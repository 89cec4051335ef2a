"""Dynamic contrastive (DyCL), proxy clustering and triplet losses with gradients.

Similarities are inner products of unit vectors. Every loss comes in two
forms: a per-anchor function on explicit vectors (reference semantics, used
by tests and gradient checks) and a batched kernel on a similarity matrix
used by the trainer. Both forms share the same scalar algebra.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .geo import ScaleConfig, ScalePartition

NORM_TOL = 1e-6


@dataclass(frozen=True)
class MarginSchedule:
    margins: tuple[float, ...] = (0.3, 0.2, 0.1)

    def __post_init__(self):
        m = tuple(float(x) for x in self.margins)
        object.__setattr__(self, "margins", m)
        if not m or any(x <= 0 for x in m):
            raise ConfigError(f"margins must be positive: {m}")
        if any(b >= a for a, b in zip(m, m[1:])):
            raise ConfigError(f"margins must be strictly decreasing: {m}")

    def __len__(self):
        return len(self.margins)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 32.0
    margin_schedule: MarginSchedule = field(default_factory=MarginSchedule)
    lambda1: float = 0.2
    lambda2: float = 0.1
    lambda3: float = 0.9
    third_term: bool = False
    clust_scale: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not self.clust_scale > 0:
            raise ConfigError("clust_scale must be positive")

    @property
    def margins(self) -> tuple[float, ...]:
        return self.margin_schedule.margins


@dataclass
class ProxyTable:
    """One unit-norm proxy per training building (rows of ``vectors``)."""

    building_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.building_ids = np.asarray(self.building_ids, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self._index = {int(b): i for i, b in enumerate(self.building_ids)}

    @classmethod
    def random(cls, building_ids, dim: int, rng: np.random.Generator) -> "ProxyTable":
        w = rng.standard_normal((len(building_ids), dim))
        return cls(building_ids, w / np.linalg.norm(w, axis=1, keepdims=True))

    def index_of(self, building_id: int) -> int:
        try:
            return self._index[int(building_id)]
        except KeyError:
            raise KeyError(f"no proxy for building {building_id}") from None

    def renormalize(self) -> None:
        self.vectors /= np.linalg.norm(self.vectors, axis=1, keepdims=True)


@dataclass(frozen=True)
class BatchPlan:
    """Cross-view pairs ``(building_id, drone_image_id, satellite_image_id)``."""

    pairs: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(tuple(int(v) for v in p) for p in self.pairs))
        ids = [p[0] for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise InputError("buildings within a batch must be distinct")

    @property
    def building_ids(self) -> list[int]:
        return [p[0] for p in self.pairs]

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class AnchorSets:
    """Reference indices (rows of the opposite view in the batch) for one anchor."""

    view: int
    anchor: int
    positives: tuple[np.ndarray, ...]  # P^0 .. P^{L-1}, nested
    negatives: np.ndarray


@dataclass(frozen=True)
class ScaleTripletSets:
    anchors: tuple[AnchorSets, ...]
    level_matrix: np.ndarray  # batch level between building i (row) and j (col)
    degenerate: bool


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------

def batch_levels(building_ids: Sequence[int], partitions: Mapping[int, ScalePartition]) -> np.ndarray:
    b = list(building_ids)
    try:
        return np.array([[partitions[i].levels[j] for j in b] for i in b], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"missing partition for building {exc.args[0]}") from None


def mine_scale_sets(batch: BatchPlan, partitions: Mapping[int, ScalePartition],
                    config: ScaleConfig) -> ScaleTripletSets:
    """In-batch positive/negative sets for every anchor in both views.

    Anchors of one view reference only images of the other view, so the
    anchor itself is never among its references.
    """
    L = config.n_scales
    lv = batch_levels(batch.building_ids, partitions)
    anchors = []
    for view, mat in ((0, lv), (1, lv.T)):
        for i, row in enumerate(mat):
            pos = tuple(np.flatnonzero(row <= l) for l in range(L))
            anchors.append(AnchorSets(view, i, pos, np.flatnonzero(row == L)))
    degenerate = not np.any(lv == L)
    if degenerate:
        warnings.warn("degenerate batch: no pure negatives, DyCL contributes zero",
                      RuntimeWarning, stacklevel=2)
    return ScaleTripletSets(tuple(anchors), lv, degenerate)


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------

def _masked_lse(x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp over ``mask`` and the matching softmax weights.

    Rows with an empty mask get ``-inf`` and all-zero weights.
    """
    xm = np.where(mask, x, -np.inf)
    mx = np.max(xm, axis=-1, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(xm - safe), 0.0)
    s = np.sum(e, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = np.where(s > 0, np.log(s) + safe, -np.inf)
        w = np.where(s > 0, e / s, 0.0)
    return lse[..., 0], w


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return np.exp(-np.logaddexp(0.0, -a))


def _dycl_rows(sim: np.ndarray, levels: np.ndarray, margins: Sequence[float],
               tau: float) -> tuple[np.ndarray, np.ndarray]:
    """DyCL per anchor row. Returns (loss per row, dLoss/dsim).

    ``sum_j sum_k exp(tau (r_k - r_j + m))`` factorises as
    ``exp(tau m + lse(tau r_neg) + lse(-tau r_pos))``, which keeps the
    evaluation exact and overflow-free.
    """
    L = len(margins)
    neg = levels == L
    lse_n, w_n = _masked_lse(tau * sim, neg)
    loss = np.zeros(sim.shape[0])
    grad = np.zeros_like(sim)
    for l, m in enumerate(margins):
        pos = levels <= l
        lse_p, w_p = _masked_lse(-tau * sim, pos)
        a = tau * m + lse_n + lse_p
        ok = np.isfinite(a)
        a = np.where(ok, a, 0.0)
        loss += np.where(ok, _softplus(a), 0.0)
        s = np.where(ok, _sigmoid(a), 0.0)[:, None] * tau
        grad += s * (w_n - w_p)
    return loss, grad


def _check_unit(*arrays) -> None:
    for a in arrays:
        n = np.linalg.norm(np.atleast_2d(a), axis=-1)
        if np.any(np.abs(n - 1.0) > NORM_TOL):
            raise InputError("loss inputs must be unit-norm vectors")


# ---------------------------------------------------------------------------
# DyCL
# ---------------------------------------------------------------------------

def dycl_loss_and_grad(anchor, refs, sets: AnchorSets, config: LossConfig,
                       check: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """DyCL for one anchor against its cross-view references.

    Returns ``(loss, d/d anchor, d/d refs)``. Empty negatives, or empty
    positives at every scale, give zero loss and zero gradients.
    """
    a = np.asarray(anchor, dtype=np.float64)
    R = np.asarray(refs, dtype=np.float64)
    if check:
        _check_unit(a, R)
    if len(sets.positives) != len(config.margins):
        raise ConfigError(f"{len(sets.positives)} scales but {len(config.margins)} margins")
    L = len(config.margins)
    levels = np.full(len(R), -1, dtype=np.int64)
    # encode nested sets as levels; references in no set are masked out
    for l in reversed(range(L)):
        levels[np.asarray(sets.positives[l], dtype=np.int64)] = l
    levels[np.asarray(sets.negatives, dtype=np.int64)] = L
    member = levels >= 0
    r = R @ a
    loss, g = _dycl_rows(r[None, :], np.where(member, levels, L + 1)[None, :],
                         config.margins, config.tau)
    g = g[0]
    return float(loss[0]), g @ R, np.outer(g, a)


def dycl_batch(sim: np.ndarray, levels: np.ndarray, config: LossConfig) -> tuple[float, np.ndarray]:
    """Symmetric DyCL averaged over the ``2P`` anchors of a cross-view batch.

    ``sim[i, j]`` is drone image ``i`` vs satellite image ``j``; ``levels`` is
    the matching building level matrix. Returns ``(loss, dLoss/dsim)``.
    """
    l1, g1 = _dycl_rows(sim, levels, config.margins, config.tau)
    l2, g2 = _dycl_rows(sim.T, levels.T, config.margins, config.tau)
    n = len(l1) + len(l2)
    return float((np.sum(l1) + np.sum(l2)) / n), (g1 + g2.T) / n


# ---------------------------------------------------------------------------
# clustering (normalised softmax over proxies)
# ---------------------------------------------------------------------------

def clustering_loss_and_grad(f, proxies: ProxyTable, label: int, scale: float = 1.0,
                             check: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """Softmax cross-entropy of ``f`` against all proxies.

    Returns ``(loss, d/df, d/dproxies)``; the proxy gradient has one row per proxy.
    """
    f = np.asarray(f, dtype=np.float64)
    if check:
        _check_unit(f)
    idx = proxies.index_of(label)
    loss, gf, gw = clustering_batch(f[None, :], np.array([idx]), proxies.vectors, scale)
    return loss, gf[0], gw


def clustering_batch(F: np.ndarray, label_idx: np.ndarray, W: np.ndarray,
                     scale: float = 1.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean clustering loss over rows of ``F``; returns (loss, dF, dW)."""
    logits = scale * (F @ W.T)
    mx = logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(logits - mx), axis=1)) + mx[:, 0]
    n = len(F)
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, label_idx]))
    p = np.exp(logits - lse[:, None])
    p[rows, label_idx] -= 1.0
    p *= scale / n
    return loss, p @ W, p.T @ F


# ---------------------------------------------------------------------------
# triplet
# ---------------------------------------------------------------------------

def triplet_loss_and_grad(anchor, positive, negative, margin: float,
                          check: bool = True) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if check:
        _check_unit(a, p, n)
    h = margin - a @ p + a @ n
    if h <= 0:
        z = np.zeros_like(a)
        return 0.0, (z, z.copy(), z.copy())
    return float(h), (n - p, -a, a.copy())


def _triplet_rows(sim, levels, scale, margin):
    pos = levels <= scale
    neg = levels > scale
    h = margin - sim[:, :, None] + sim[:, None, :]
    valid = pos[:, :, None] & neg[:, None, :]
    active = valid & (h > 0)
    total = np.sum(np.where(active, h, 0.0))
    a = active.astype(np.float64)
    grad = -a.sum(axis=2) + a.sum(axis=1)
    return total, grad, int(valid.sum())


def triplet_batch(sim: np.ndarray, levels: np.ndarray, scales: Sequence[int],
                  margin: float) -> tuple[float, np.ndarray]:
    """Symmetric in-batch triplet loss summed over ``scales``.

    At scale ``l`` positives have level ``<= l`` and negatives level ``> l``;
    each scale term is the mean hinge over all valid triplets of the batch.
    """
    loss = 0.0
    grad = np.zeros_like(sim)
    for l in scales:
        t1, g1, c1 = _triplet_rows(sim, levels, l, margin)
        t2, g2, c2 = _triplet_rows(sim.T, levels.T, l, margin)
        c = c1 + c2
        if c == 0:
            continue
        loss += (t1 + t2) / c
        grad += (g1 + g2.T) / c
    return float(loss), grad


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------

COMPONENTS = ("dycl", "clust", "third")


def total_loss(components, config: LossConfig) -> tuple[float, dict]:
    """Weighted sum of ``(name, loss, grads)`` components.

    ``grads`` maps a parameter key to its gradient array; gradients of the
    same key are accumulated. The ``third`` slot takes any externally
    computed loss term and is weighted only when enabled in the config.
    """
    weights = {"dycl": config.lambda1, "clust": config.lambda2, "third": config.lambda3}
    loss = 0.0
    merged: dict = {}
    for name, value, grads in components:
        if name not in weights:
            raise ConfigError(f"unknown loss component {name!r}")
        if name == "third" and not config.third_term:
            raise ConfigError("third loss term supplied but disabled in config")
        w = weights[name]
        loss += w * value
        for key, g in (grads or {}).items():
            g = w * np.asarray(g, dtype=np.float64)
            merged[key] = merged[key] + g if key in merged else g
    return loss, merged
