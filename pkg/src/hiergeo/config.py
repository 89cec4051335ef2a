"""Pipeline configuration: one TOML file, sections mirror the modules.

Example::

    seed = 0
    [geo]
    thresholds = [0, 200, 500]
    [dycl]
    tau = 32
    margins = [0.3, 0.2, 0.1]
    [loss]
    lambda1 = 0.2
    [rerank]
    k = 20
    schedule = []        # non-empty overrides the k schedule from training statistics
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .geo import ScaleConfig
from .losses import LossConfig, MarginSchedule
from .metrics import MetricConfig
from .rerank import RerankConfig
from .synth import SynthConfig, TrainerConfig


@dataclass(frozen=True)
class AblateConfig:
    tau_values: tuple[float, ...] = (16.0, 32.0, 64.0)
    lambda1_values: tuple[float, ...] = (0.1, 0.2, 0.5, 1.0)
    triplet_margin: float = 0.1


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    geo: ScaleConfig = field(default_factory=ScaleConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    schedule: tuple[int, ...] = ()
    eval: MetricConfig = field(default_factory=MetricConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    out: str = "run"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "geo": {"thresholds": list(self.geo.thresholds)},
            "synth": dataclasses.asdict(self.synth),
            "trainer": dataclasses.asdict(self.trainer),
            "dycl": {"tau": self.loss.tau, "margins": list(self.loss.margins)},
            "loss": {"lambda1": self.loss.lambda1, "lambda2": self.loss.lambda2,
                     "lambda3": self.loss.lambda3, "third_term": self.loss.third_term,
                     "clust_scale": self.loss.clust_scale},
            "rerank": {"k": self.rerank.k, "lambda": self.rerank.lambda_fuse,
                       "k_expand": self.rerank.k_expand, "mu": self.rerank.mu,
                       "k_floor": self.rerank.k_floor, "schedule": list(self.schedule)},
            "eval": {"gains": list(self.eval.gains), "k_values": list(self.eval.k_values)},
            "ablate": {k: list(v) if isinstance(v, tuple) else v
                       for k, v in dataclasses.asdict(self.ablate).items()},
            "io": {"out": self.out},
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, section: dict, name: str, rename: dict | None = None):
    rename = rename or {}
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        target = rename.get(key, key)
        if target not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        kwargs[target] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


_SECTIONS = {"seed", "geo", "synth", "trainer", "dycl", "loss", "rerank", "eval", "ablate", "io"}


def config_from_dict(raw: dict, seed: int | None = None, out: str | None = None) -> PipelineConfig:
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base_seed = int(raw.get("seed", 0) if seed is None else seed)
    geo = _build(ScaleConfig, raw.get("geo", {}), "geo")
    synth = _build(SynthConfig, {**raw.get("synth", {}), "seed": base_seed}, "synth")
    trainer = _build(TrainerConfig, {**raw.get("trainer", {}), "seed": base_seed}, "trainer")
    dycl = dict(raw.get("dycl", {}))
    loss_kw = dict(raw.get("loss", {}))
    for key in dycl:
        if key not in ("tau", "margins"):
            raise ConfigError(f"unknown key dycl.{key}")
    if "margins" in dycl:
        loss_kw["margin_schedule"] = MarginSchedule(tuple(dycl["margins"]))
    if "tau" in dycl:
        loss_kw["tau"] = dycl["tau"]
    loss = _build(LossConfig, loss_kw, "loss")
    if len(loss.margins) != geo.n_scales:
        raise ConfigError(f"{len(loss.margins)} margins for {geo.n_scales} scales")
    rr = dict(raw.get("rerank", {}))
    schedule = tuple(int(k) for k in rr.pop("schedule", ()))
    rerank = _build(RerankConfig, rr, "rerank", {"lambda": "lambda_fuse"})
    ev = dict(raw.get("eval", {}))
    metric = _build(MetricConfig, {"n_scales": geo.n_scales, **ev}, "eval")
    ablate = _build(AblateConfig, raw.get("ablate", {}), "ablate")
    io = dict(raw.get("io", {}))
    out_dir = out if out is not None else io.pop("out", "run")
    return PipelineConfig(base_seed, geo, synth, trainer, loss, rerank, schedule, metric,
                          ablate, str(out_dir))


def load_config(path: str | Path | None = None, seed: int | None = None,
                out: str | None = None) -> PipelineConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, seed, out)
