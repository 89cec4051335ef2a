"""Synthetic campuses and a shared linear siamese encoder trained with the losses.

Each building has a latent vector made of an identity part (random per
building) and a spatial context part sampled from a smooth random field over
the campus, so that nearby buildings look alike. Raw per-image features are a
view-specific linear transform of that latent plus Gaussian noise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .embeddings import DRONE, SATELLITE, EmbeddingSet, l2_normalize, normalize_backward
from .errors import ConfigError, InputError, TrainingDivergedError
from .geo import BuildingRecord, CampusRegistry, ScaleConfig, level_matrix
from .losses import (AnchorSets, LossConfig, MarginSchedule, ProxyTable, clustering_batch,
                     clustering_loss_and_grad, dycl_batch, dycl_loss_and_grad,
                     total_loss, triplet_batch, triplet_loss_and_grad)

log = logging.getLogger(__name__)

MIN_SPACING_M = 10.0
MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SynthConfig:
    n_buildings_train: int = 60
    n_buildings_test: int = 40
    area_side: float = 2000.0
    drone_images_per_building: int = 8
    satellite_images_per_building: int = 1
    raw_dim: int = 128
    identity_dim: int = 16
    context_dim: int = 32
    identity_strength: float = 1.0
    context_strength: float = 1.0
    context_length_scale: float = 300.0
    context_features: int = 256
    view_gap: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        counts = (self.n_buildings_train, self.n_buildings_test, self.drone_images_per_building,
                  self.satellite_images_per_building, self.raw_dim, self.identity_dim,
                  self.context_dim, self.context_features)
        if min(counts) < 1:
            raise ConfigError("all synthetic counts must be >= 1")
        if self.noise_sigma < 0 or self.view_gap < 0:
            raise ConfigError("noise_sigma and view_gap must be >= 0")
        if not self.context_length_scale > 0 or not self.area_side > 0:
            raise ConfigError("context_length_scale and area_side must be positive")
        if self.identity_strength < 0 or self.context_strength < 0:
            raise ConfigError("strengths must be >= 0")


@dataclass
class Campus:
    """Output of :func:`generate_campus`."""

    registry: CampusRegistry
    raw: EmbeddingSet          # both views, unnormalised raw features
    latent: np.ndarray         # (n_buildings, identity_dim + context_dim), registry order

    def split_ids(self, split: str) -> np.ndarray:
        return np.array([b.building_id for b in self.registry if b.split == split], dtype=np.int64)


def _place_buildings(n: int, side: float, rng: np.random.Generator) -> np.ndarray:
    pts = np.empty((n, 2))
    for i in range(n):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            p = rng.uniform(0.0, side, size=2)
            if i == 0 or np.min(np.hypot(*(pts[:i] - p).T)) >= MIN_SPACING_M:
                pts[i] = p
                break
        else:
            raise InputError(f"could not place building {i} with {MIN_SPACING_M} m spacing "
                             f"in a {side} m square after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return pts


def _context_field(xy: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    # random Fourier features of a squared-exponential kernel with the given length scale
    M = cfg.context_features
    omega = rng.standard_normal((M, 2)) / cfg.context_length_scale
    phase = rng.uniform(0.0, 2 * np.pi, size=M)
    amp = rng.standard_normal((cfg.context_dim, M))
    phi = np.sqrt(2.0 / M) * np.cos(xy @ omega.T + phase)
    return phi @ amp.T / np.sqrt(cfg.context_dim)


def generate_campus(cfg: SynthConfig) -> Campus:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_buildings_train + cfg.n_buildings_test
    xy = _place_buildings(n, cfg.area_side, rng)
    buildings = tuple(
        BuildingRecord(i, (float(xy[i, 0]), float(xy[i, 1])), "planar",
                       f"building-{i}", "train" if i < cfg.n_buildings_train else "test")
        for i in range(n))
    registry = CampusRegistry(buildings)

    identity = rng.standard_normal((n, cfg.identity_dim)) / np.sqrt(cfg.identity_dim)
    context = _context_field(xy, cfg, rng)
    latent = np.concatenate([cfg.identity_strength * identity,
                             cfg.context_strength * context], axis=1)

    d_lat = latent.shape[1]
    base = rng.standard_normal((cfg.raw_dim, d_lat)) / np.sqrt(d_lat)
    transforms = {v: base + cfg.view_gap * rng.standard_normal((cfg.raw_dim, d_lat)) / np.sqrt(d_lat)
                  for v in (DRONE, SATELLITE)}

    image_ids, building_ids, views, vecs = [], [], [], []
    next_id = 0
    for view, per in ((DRONE, cfg.drone_images_per_building),
                      (SATELLITE, cfg.satellite_images_per_building)):
        clean = latent @ transforms[view].T
        for b in range(n):
            noise = cfg.noise_sigma * rng.standard_normal((per, cfg.raw_dim))
            vecs.append(clean[b] + noise)
            image_ids.extend(range(next_id, next_id + per))
            next_id += per
            building_ids.extend([b] * per)
            views.extend([view] * per)
    raw = EmbeddingSet(np.array(image_ids), np.array(building_ids), np.array(views),
                       np.concatenate(vecs).astype(np.float32), np.zeros(len(image_ids), bool))
    return Campus(registry, raw, latent)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainerConfig:
    embed_dim: int = 64
    batch_buildings: int = 16
    steps_per_epoch: int = 50
    epochs: int = 20
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.batch_buildings < 2:
            raise ConfigError("batch_buildings must be >= 2")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.embed_dim < 1:
            raise ConfigError("epochs, steps_per_epoch and embed_dim must be >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning_rate must be >= 0 and momentum in [0, 1)")


@dataclass
class EncoderState:
    weight: np.ndarray        # (embed_dim, raw_dim)
    bias: np.ndarray          # (embed_dim,)
    proxies: ProxyTable

    @classmethod
    def initialize(cls, raw_dim: int, embed_dim: int, proxy_ids, seed: int) -> "EncoderState":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(raw_dim)
        w = rng.uniform(-bound, bound, size=(embed_dim, raw_dim))
        b = rng.uniform(-bound, bound, size=embed_dim)
        return cls(w, b, ProxyTable.random(proxy_ids, embed_dim, rng))

    def copy(self) -> "EncoderState":
        return EncoderState(self.weight.copy(), self.bias.copy(),
                            ProxyTable(self.proxies.building_ids.copy(), self.proxies.vectors.copy()))

    def to_dict(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist(),
                "proxy_ids": self.proxies.building_ids.tolist(),
                "proxies": self.proxies.vectors.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderState":
        return cls(np.asarray(d["weight"], np.float64), np.asarray(d["bias"], np.float64),
                   ProxyTable(d["proxy_ids"], d["proxies"]))


def _forward(state: EncoderState, x: np.ndarray) -> np.ndarray:
    return x @ state.weight.T + state.bias


def encode(state: EncoderState, raw: EmbeddingSet) -> EmbeddingSet:
    """Apply the shared linear map and normalise every record."""
    if raw.dimension != state.weight.shape[1]:
        raise InputError(f"raw_dim {raw.dimension} does not match encoder input "
                         f"{state.weight.shape[1]}")
    y = _forward(state, raw.vectors.astype(np.float64))
    z = l2_normalize(y).astype(np.float32)
    return EmbeddingSet(raw.image_ids, raw.building_ids, raw.views, z, np.ones(len(raw), bool))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    mean_total: float
    mean_dycl: float
    mean_clust: float


@dataclass
class TrainResult:
    state: EncoderState
    log: list[EpochLog] = field(default_factory=list)


class _TrainingData:
    """Index of the training split: per-building image rows and level matrix."""

    def __init__(self, campus: Campus, scale_config: ScaleConfig):
        train = campus.registry.subset("train")
        if len(train) == 0:
            raise InputError("train split is empty")
        self.building_ids = train.ids
        self.levels = level_matrix(train, scale_config)
        raw = campus.raw
        self.x = raw.vectors.astype(np.float64)
        bid = raw.building_ids.astype(np.int64)
        self.rows = {}
        for view in (DRONE, SATELLITE):
            vmask = raw.views == view
            self.rows[view] = [np.flatnonzero(vmask & (bid == b)) for b in self.building_ids]
            if any(len(r) == 0 for r in self.rows[view]):
                raise InputError("every training building needs images in both views")


def _sample_batch(data: _TrainingData, P: int, rng: np.random.Generator):
    pick = rng.choice(len(data.building_ids), size=min(P, len(data.building_ids)), replace=False)
    pick.sort()
    d_rows = np.array([data.rows[DRONE][i][rng.integers(len(data.rows[DRONE][i]))] for i in pick])
    s_rows = np.array([data.rows[SATELLITE][i][rng.integers(len(data.rows[SATELLITE][i]))]
                       for i in pick])
    return pick, d_rows, s_rows


@dataclass(frozen=True)
class Objective:
    """What the trainer minimises.

    ``kind="dycl"``: lambda1 * DyCL + lambda2 * clustering (+ optional third term).
    ``kind="triplet"``: in-batch triplet loss summed over ``triplet_scales``.
    """

    kind: str = "dycl"
    triplet_scales: tuple[int, ...] = ()
    triplet_margin: float = 0.1
    third_term: Callable | None = None  # (sim, levels) -> (loss, dloss/dsim)

    def __post_init__(self):
        if self.kind not in ("dycl", "triplet"):
            raise ConfigError(f"unknown objective {self.kind!r}")
        if self.kind == "triplet" and not self.triplet_scales:
            raise ConfigError("triplet objective needs at least one scale")


def batch_loss_and_grads(state: EncoderState, xd: np.ndarray, xs: np.ndarray,
                         levels: np.ndarray, label_idx: np.ndarray,
                         loss_config: LossConfig, objective: Objective):
    """Loss of one cross-view batch and gradients for weight, bias and proxies."""
    yd, ys = _forward(state, xd), _forward(state, xs)
    zd, zs = l2_normalize(yd), l2_normalize(ys)
    sim = zd @ zs.T
    parts = {"dycl": 0.0, "clust": 0.0}
    g_proxy = np.zeros_like(state.proxies.vectors)
    if objective.kind == "triplet":
        loss, dsim = triplet_batch(sim, levels, objective.triplet_scales, objective.triplet_margin)
        dzd, dzs = dsim @ zs, dsim.T @ zd
    else:
        l_dycl, dsim_dycl = dycl_batch(sim, levels, loss_config)
        z_all = np.concatenate([zd, zs])
        l_clust, dz_clust, dw_clust = clustering_batch(
            z_all, np.concatenate([label_idx, label_idx]), state.proxies.vectors,
            loss_config.clust_scale)
        comps = [("dycl", l_dycl, {"sim": dsim_dycl}),
                 ("clust", l_clust, {"z": dz_clust, "proxies": dw_clust})]
        if loss_config.third_term and objective.third_term is not None:
            l3, dsim3 = objective.third_term(sim, levels)
            comps.append(("third", l3, {"sim": dsim3}))
        loss, grads = total_loss(comps, loss_config)
        parts = {"dycl": l_dycl, "clust": l_clust}
        dsim = grads.get("sim", np.zeros_like(sim))
        P = len(zd)
        dzd = dsim @ zs + grads["z"][:P]
        dzs = dsim.T @ zd + grads["z"][P:]
        g_proxy = grads["proxies"]
    dyd = normalize_backward(yd, dzd)
    dys = normalize_backward(ys, dzs)
    gw = dyd.T @ xd + dys.T @ xs
    gb = dyd.sum(axis=0) + dys.sum(axis=0)
    return loss, parts, gw, gb, g_proxy


def train(trainer_config: TrainerConfig, campus: Campus, loss_config: LossConfig | None = None,
          scale_config: ScaleConfig | None = None, objective: Objective | None = None,
          state: EncoderState | None = None) -> TrainResult:
    """Momentum gradient descent on random cross-view batches of distinct buildings."""
    loss_config = loss_config or LossConfig()
    scale_config = scale_config or ScaleConfig()
    objective = objective or Objective()
    if objective.kind == "dycl" and len(loss_config.margins) != scale_config.n_scales:
        raise ConfigError(f"{len(loss_config.margins)} margins for "
                          f"{scale_config.n_scales} scales")
    if objective.kind == "triplet" and max(objective.triplet_scales) >= scale_config.n_scales:
        raise ConfigError("triplet scale out of range")
    tc = trainer_config
    data = _TrainingData(campus, scale_config)
    if state is None:
        state = EncoderState.initialize(campus.raw.dimension, tc.embed_dim,
                                        data.building_ids, tc.seed)
    else:
        state = state.copy()
    proxy_idx = np.array([state.proxies.index_of(b) for b in data.building_ids])
    rng = np.random.default_rng([tc.seed, 1])
    vel = [np.zeros_like(state.weight), np.zeros_like(state.bias),
           np.zeros_like(state.proxies.vectors)]
    result = TrainResult(state)
    step = 0
    for epoch in range(tc.epochs):
        sums = np.zeros(3)
        for _ in range(tc.steps_per_epoch):
            pick, d_rows, s_rows = _sample_batch(data, tc.batch_buildings, rng)
            levels = data.levels[np.ix_(pick, pick)]
            try:
                loss, parts, gw, gb, gp = batch_loss_and_grads(
                    state, data.x[d_rows], data.x[s_rows], levels, proxy_idx[pick],
                    loss_config, objective)
            except InputError as exc:      # overflowed or collapsed activations
                raise TrainingDivergedError(step, str(exc)) from exc
            if not (np.isfinite(loss) and np.all(np.isfinite(gw))):
                raise TrainingDivergedError(step, f"loss={loss}")
            for v, g, p in zip(vel, (gw, gb, gp),
                               (state.weight, state.bias, state.proxies.vectors)):
                v *= tc.momentum
                v -= tc.learning_rate * g
                p += v
            if not all(np.all(np.isfinite(p)) for p in (state.weight, state.bias,
                                                         state.proxies.vectors)):
                raise TrainingDivergedError(step, "non-finite parameters after update")
            state.proxies.renormalize()
            sums += (loss, parts["dycl"], parts["clust"])
            step += 1
        mean = sums / tc.steps_per_epoch
        result.log.append(EpochLog(epoch, float(mean[0]), float(mean[1]), float(mean[2])))
        log.debug("epoch %d loss %.5f", epoch, mean[0])
    return result


def train_log_csv(log_rows: Sequence[EpochLog]) -> str:
    lines = ["epoch,mean_total,mean_dycl,mean_clust"]
    lines += [f"{e.epoch},{e.mean_total!r},{e.mean_dycl!r},{e.mean_clust!r}" for e in log_rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

FD_STEP = 1e-6


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + step
        fp = f(x)
        x.flat[i] = orig - step
        fm = f(x)
        x.flat[i] = orig
        g.flat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def _random_unit(rng, shape):
    return l2_normalize(rng.standard_normal(shape))


def _fd_dycl(rng) -> float:
    dim = int(rng.integers(4, 10))
    L = int(rng.integers(1, 4))
    n = int(rng.integers(L + 2, 12))
    margins = tuple(sorted(rng.uniform(0.05, 0.5, size=L), reverse=True))
    cfg = LossConfig(tau=float(rng.uniform(1.0, 32.0)), margin_schedule=MarginSchedule(margins))
    levels = rng.integers(0, L + 1, size=n)
    levels[0], levels[1] = 0, L
    sets = AnchorSets(0, 0, tuple(np.flatnonzero(levels <= l) for l in range(L)),
                      np.flatnonzero(levels == L))
    xa = rng.standard_normal(dim)
    xr = rng.standard_normal((n, dim))

    def f(v):
        a = l2_normalize(v[:dim])
        R = l2_normalize(v[dim:].reshape(n, dim))
        return dycl_loss_and_grad(a, R, sets, cfg, check=False)[0]

    v0 = np.concatenate([xa, xr.ravel()])
    _, ga, gr = dycl_loss_and_grad(l2_normalize(xa), l2_normalize(xr), sets, cfg)
    analytic = np.concatenate([normalize_backward(xa, ga), normalize_backward(xr, gr).ravel()])
    return relative_error(analytic, central_difference(f, v0))


def _fd_clustering(rng) -> float:
    dim = int(rng.integers(4, 10))
    C = int(rng.integers(2, 10))
    proxies = ProxyTable(np.arange(C), _random_unit(rng, (C, dim)))
    label = int(rng.integers(C))
    scale = float(rng.uniform(1.0, 8.0))
    xf = rng.standard_normal(dim)

    def f(v):
        p = ProxyTable(np.arange(C), v[dim:].reshape(C, dim))
        return clustering_loss_and_grad(l2_normalize(v[:dim]), p, label, scale, check=False)[0]

    loss, gf, gw = clustering_loss_and_grad(l2_normalize(xf), proxies, label, scale)
    analytic = np.concatenate([normalize_backward(xf, gf), gw.ravel()])
    return relative_error(analytic, central_difference(f, np.concatenate([xf, proxies.vectors.ravel()])))


def _fd_triplet(rng) -> float:
    dim = int(rng.integers(3, 10))
    margin = float(rng.uniform(0.05, 0.5))
    while True:
        x = rng.standard_normal((3, dim))
        u = l2_normalize(x)
        h = margin - u[0] @ u[1] + u[0] @ u[2]
        if h > 1e-3:  # stay away from the hinge where the derivative does not exist
            break

    def f(v):
        a, p, n = l2_normalize(v.reshape(3, dim))
        return triplet_loss_and_grad(a, p, n, margin, check=False)[0]

    _, grads = triplet_loss_and_grad(*u, margin)
    analytic = normalize_backward(x, np.stack(grads)).ravel()
    return relative_error(analytic, central_difference(f, x.ravel()))


_FD_KINDS = {"dycl": _fd_dycl, "clustering": _fd_clustering, "triplet": _fd_triplet}


def finite_difference_check(loss_kind: str, trial_count: int = 100, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Gradients are taken with respect to raw (pre-normalisation) vectors, so
    the normalisation backward pass is checked along with each loss.
    """
    try:
        fn = _FD_KINDS[loss_kind]
    except KeyError:
        raise ConfigError(f"unknown loss kind {loss_kind!r}") from None
    rng = np.random.default_rng(seed)
    return max(fn(rng) for _ in range(trial_count))


# ---------------------------------------------------------------------------
# margin satisfaction
# ---------------------------------------------------------------------------

def margin_satisfaction_report(embeddings: EmbeddingSet, registry: CampusRegistry,
                               scale_config: ScaleConfig, margins: Sequence[float]) -> dict:
    """Per-scale fraction of (anchor, positive, pure negative) triples with
    ``r_pos - r_neg >= margin[l]``, counted exhaustively.

    Anchors come from both views; references are always the opposite view.
    """
    L = scale_config.n_scales
    if len(margins) != L:
        raise ConfigError("one margin per scale required")
    lv = level_matrix(registry, scale_config)
    bidx = np.array([registry.index_of(int(b)) for b in embeddings.building_ids])
    sat = np.zeros(L)
    tot = np.zeros(L)
    for view in (DRONE, SATELLITE):
        amask = embeddings.views == view
        rmask = ~amask
        if not amask.any() or not rmask.any():
            continue
        A = embeddings.vectors[amask].astype(np.float64)
        R = embeddings.vectors[rmask].astype(np.float64)
        sims = A @ R.T
        levels = lv[np.ix_(bidx[amask], bidx[rmask])]
        for s_row, l_row in zip(sims, levels):
            neg = np.sort(s_row[l_row == L])
            if len(neg) == 0:
                continue
            for l in range(L):
                pos = s_row[l_row <= l]
                if len(pos) == 0:
                    continue
                # count negatives with r_n <= r_p - m
                sat[l] += np.searchsorted(neg, pos - margins[l], side="right").sum()
                tot[l] += len(pos) * len(neg)
    rates = [float(s / t) if t else float("nan") for s, t in zip(sat, tot)]
    return {"rates": rates, "triples": [int(t) for t in tot]}
