"""End-to-end helpers shared by the CLI, the experiment scripts and the tests."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .embeddings import DRONE, SATELLITE, EmbeddingSet, similarity_matrix, similarity_to_distance
from .errors import ConfigError
from .geo import CampusRegistry, ScaleConfig, build_all_partitions, relevance_table
from .losses import LossConfig
from .metrics import MetricConfig, MetricReport, evaluate
from .rerank import KSchedule, RerankConfig, compute_k_schedule, rerank_queries
from .synth import Campus, Objective, SynthConfig, TrainerConfig, encode, generate_campus, train

TASKS = {"sat2drone": (SATELLITE, DRONE), "drone2sat": (DRONE, SATELLITE)}
RERANK_MODES = ("none", "standard", "msrerank")


def k_schedule_for(registry: CampusRegistry, images: EmbeddingSet, scale_config: ScaleConfig,
                   config: RerankConfig) -> KSchedule:
    """k schedule from the training split's building distribution (all views)."""
    train = registry.subset("train")
    per_building = dict(zip(*np.unique(images.building_ids.astype(np.int64), return_counts=True)))
    per_building = {int(b): int(c) for b, c in per_building.items()}
    counts = [p.image_counts(per_building) for p in build_all_partitions(train, scale_config)]
    return compute_k_schedule(counts, config)


@dataclass
class TaskInputs:
    query: EmbeddingSet
    gallery: EmbeddingSet
    sim: np.ndarray
    levels: np.ndarray


def task_inputs(embeddings: EmbeddingSet, registry: CampusRegistry, scale_config: ScaleConfig,
                task: str, split: str = "test") -> TaskInputs:
    qv, gv = TASKS[task]
    ids = registry.subset(split).ids
    pool = embeddings.for_buildings(ids)
    q, g = pool.view(qv), pool.view(gv)
    rt = relevance_table(q.image_ids, q.building_ids.astype(np.int64), g.image_ids,
                         g.building_ids.astype(np.int64), registry, scale_config)
    return TaskInputs(q, g, similarity_matrix(q, g), rt.levels)


def evaluate_task(embeddings: EmbeddingSet, registry: CampusRegistry, scale_config: ScaleConfig,
                  task: str = "sat2drone", rerank: str = "none",
                  metric_config: MetricConfig | None = None,
                  rerank_config: RerankConfig | None = None,
                  schedule: KSchedule | Sequence[int] | None = None,
                  split: str = "test", threads: int = 1) -> MetricReport:
    if rerank not in RERANK_MODES:
        raise ConfigError(f"unknown rerank mode {rerank!r}")
    metric_config = metric_config or MetricConfig(n_scales=scale_config.n_scales)
    ti = task_inputs(embeddings, registry, scale_config, task, split)
    gallery_ids = ti.gallery.image_ids
    if rerank == "none":
        return evaluate(ti.sim, ti.levels, gallery_ids, metric_config, True, threads)
    rerank_config = rerank_config or RerankConfig()
    dist = rerank_distances(ti, rerank, rerank_config, schedule, threads)
    return evaluate(dist, ti.levels, gallery_ids, metric_config, False, threads)


def rerank_distances(ti: TaskInputs, mode: str, config: RerankConfig,
                     schedule=None, threads: int = 1) -> np.ndarray:
    dqg = similarity_to_distance(ti.sim)
    dgg = similarity_to_distance(similarity_matrix(ti.gallery, ti.gallery))
    if mode == "standard":
        return rerank_queries(dqg, dgg, config, None, threads)
    if schedule is None:
        raise ConfigError("msrerank needs a k schedule")
    return rerank_queries(dqg, dgg, config, schedule, threads)


def train_and_embed(campus: Campus, trainer_config: TrainerConfig, loss_config: LossConfig,
                    scale_config: ScaleConfig, objective: Objective | None = None):
    result = train(trainer_config, campus, loss_config, scale_config, objective)
    return result, encode(result.state, campus.raw)


def single_vs_multi(campus: Campus, trainer_config: TrainerConfig, scale_config: ScaleConfig,
                    margin: float = 0.1, task: str = "sat2drone") -> dict:
    """Triplet models trained at each single scale and at all scales jointly.

    Returns ``{model_name: MetricReport}`` evaluated on the test split.
    """
    L = scale_config.n_scales
    models = {f"single_{l}": (l,) for l in range(L)}
    models["multi"] = tuple(range(L))
    out = {}
    for name, scales in models.items():
        obj = Objective("triplet", scales, margin)
        _, emb = train_and_embed(campus, trainer_config, LossConfig(), scale_config, obj)
        out[name] = evaluate_task(emb, campus.registry, scale_config, task)
    return out


def default_campus(seed: int, **overrides) -> Campus:
    return generate_campus(replace(SynthConfig(seed=seed), **overrides))
