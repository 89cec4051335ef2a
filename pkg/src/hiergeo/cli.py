"""``hiergeo`` command-line tool.

Every command reads and writes inside ``--out``. Each one ends by writing
``manifest_<command>.json``, which lists the produced files with their
sha256. If a command fails, no manifest is written.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import PipelineConfig, load_config
from .embeddings import (load_distance_matrix, load_embeddings, save_distance_matrix,
                         save_embeddings)
from .errors import ConfigError, FormatError, InputError, ShapeError, TrainingDivergedError
from .geo import load_registry, save_registry
from .pipeline import (RERANK_MODES, TASKS, evaluate_task, k_schedule_for, rerank_distances,
                       single_vs_multi, task_inputs)
from .metrics import scale_name
from .rerank import KSchedule, rank_shift_profile, ranking_from_distances, rerank_queries
from .synth import Campus, encode, generate_campus, train, train_log_csv

log = logging.getLogger("hiergeo")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2, 3

REGISTRY_FILE = "registry.jsonl"
RAW_FILE = "raw_features.hgeo"
ENCODER_FILE = "encoder.json"
EMBEDDINGS_FILE = "embeddings.hgeo"
TRAIN_LOG_FILE = "train_log.csv"


class Run:
    """Tracks the files and stage timings of one command."""

    def __init__(self, command: str, config: PipelineConfig, out: Path):
        self.command = command
        self.config = config
        self.out = out
        self.files: list[Path] = []
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.stages[name] = round(time.perf_counter() - t0, 6)

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        return self._track(path)

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def _track(self, path: Path) -> Path:
        if path not in self.files:
            self.files.append(path)
        return path

    def track(self, path: Path) -> Path:
        return self._track(path)

    def finish(self, manifest_name: str | None = None) -> Path:
        manifest = {
            "command": self.command,
            "config_hash": self.config.digest(),
            "config": self.config.to_dict(),
            "versions": {"hiergeo": __version__, "numpy": np.__version__,
                         "python": platform.python_version()},
            "stages": self.stages,
            "artifacts": [{"path": p.name, "sha256": sha256_file(p), "bytes": p.stat().st_size}
                          for p in self.files],
        }
        path = self.out / (manifest_name or f"manifest_{self.command}.json")
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing input {path}")
    return path


def _load_campus(out: Path) -> Campus:
    registry = load_registry(_require(out / REGISTRY_FILE))
    raw = load_embeddings(_require(out / RAW_FILE), normalize=False)
    return Campus(registry, raw, np.empty((len(registry), 0)))


def _schedule(cfg: PipelineConfig, registry, embeddings) -> KSchedule:
    if cfg.schedule:
        return KSchedule(cfg.schedule)
    return k_schedule_for(registry, embeddings, cfg.geo, cfg.rerank)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: PipelineConfig, args, run: Run) -> None:
    with run.stage("generate"):
        campus = generate_campus(cfg.synth)
    with run.stage("write"):
        save_registry(campus.registry, run.track(run.out / REGISTRY_FILE))
        save_embeddings(campus.raw, run.track(run.out / RAW_FILE))
    n_train = len(campus.registry.subset("train"))
    log.info("generated %d buildings (%d train / %d test), %d images",
             len(campus.registry), n_train, len(campus.registry) - n_train, len(campus.raw))


def cmd_train(cfg: PipelineConfig, args, run: Run) -> None:
    campus = _load_campus(run.out)
    with run.stage("train"):
        result = train(cfg.trainer, campus, cfg.loss, cfg.geo)
    with run.stage("encode"):
        emb = encode(result.state, campus.raw)
    with run.stage("write"):
        run.write_json(ENCODER_FILE, result.state.to_dict())
        save_embeddings(emb, run.track(run.out / EMBEDDINGS_FILE))
        run.write_text(TRAIN_LOG_FILE, train_log_csv(result.log))
    log.info("final mean loss %.5f", result.log[-1].mean_total if result.log else float("nan"))


def cmd_eval(cfg: PipelineConfig, args, run: Run) -> None:
    registry = load_registry(_require(run.out / REGISTRY_FILE))
    emb = load_embeddings(_require(run.out / EMBEDDINGS_FILE))
    mode = args.rerank
    schedule = _schedule(cfg, registry, emb) if mode == "msrerank" else None
    summary = {"rerank": mode, "schedule": list(schedule) if schedule else None, "tasks": {}}
    for task in TASKS:
        entry = {}
        for m in dict.fromkeys(("none", mode)):
            with run.stage(f"{task}_{m}"):
                report = evaluate_task(emb, registry, cfg.geo, task, m, cfg.eval, cfg.rerank,
                                       schedule, threads=args.threads)
            run.write_text(f"report_{task}_{m}.json", report.to_json() + "\n")
            run.write_text(f"report_{task}_{m}.csv", report.to_csv())
            entry[m] = {"hap": report.hap, "map_overall": report.map_overall}
        if mode != "none":
            entry["hap_delta"] = entry[mode]["hap"] - entry["none"]["hap"]
        summary["tasks"][task] = entry
    run.write_json(f"summary_{mode}.json", summary)


def cmd_ablate(cfg: PipelineConfig, args, run: Run) -> None:
    campus = _load_campus(run.out)
    sweep = args.sweep
    rows = []
    if sweep == "single_vs_multi":
        L = cfg.geo.n_scales
        header = ["model", *(f"map_{scale_name(l, L)}" for l in range(L)), "map_overall", "hap"]
        with run.stage("single_vs_multi"):
            reports = single_vs_multi(campus, cfg.trainer, cfg.geo, cfg.ablate.triplet_margin)
        for name, rep in reports.items():
            rows.append([name, *rep.map, rep.map_overall, rep.hap])
    else:
        header = [sweep, "map_overall", "hap"]
        values = cfg.ablate.tau_values if sweep == "tau" else cfg.ablate.lambda1_values
        field = "tau" if sweep == "tau" else "lambda1"
        for v in values:
            loss = replace(cfg.loss, **{field: float(v)})
            with run.stage(f"{sweep}={v}"):
                state = train(cfg.trainer, campus, loss, cfg.geo).state
                rep = evaluate_task(encode(state, campus.raw), campus.registry, cfg.geo,
                                    "sat2drone", "none", cfg.eval, threads=args.threads)
            rows.append([v, rep.map_overall, rep.hap])
    lines = [",".join(header)] + [",".join(repr(x) if isinstance(x, float) else str(x) for x in r)
                                  for r in rows]
    run.write_text(f"sweep_{sweep}.csv", "\n".join(lines) + "\n")


def cmd_rerank(cfg: PipelineConfig, args, run: Run) -> None:
    D = load_distance_matrix(_require(Path(args.matrix)))
    nq = args.n_queries
    if D.shape[0] != D.shape[1]:
        raise ShapeError(f"expected a square augmented matrix, got {D.shape}")
    if not 1 <= nq < D.shape[0]:
        raise InputError(f"--n-queries {nq} out of range for a {D.shape[0]}-point matrix")
    rcfg = cfg.rerank if args.k is None else replace(cfg.rerank, k=args.k)
    schedule = None
    if args.schedule:
        schedule = KSchedule(int(k) for k in args.schedule.split(","))
    elif args.msrerank:
        if not cfg.schedule:
            raise ConfigError("--msrerank needs --schedule or rerank.schedule in the config")
        schedule = KSchedule(cfg.schedule)
    with run.stage("rerank"):
        out = rerank_queries(D[:nq, nq:], D[nq:, nq:], rcfg, schedule, args.threads)
    name = args.output or "reranked.csv"
    save_distance_matrix(out, run.track(run.out / name))


def cmd_shift_profile(cfg: PipelineConfig, args, run: Run) -> None:
    registry = load_registry(_require(run.out / REGISTRY_FILE))
    emb = load_embeddings(_require(run.out / EMBEDDINGS_FILE))
    ks = [int(k) for k in args.ks.split(",")]
    ti = task_inputs(emb, registry, cfg.geo, args.task, split=args.split)
    before = ranking_from_distances(1.0 - ti.sim)
    profiles = []
    for k in ks:
        with run.stage(f"k={k}"):
            dist = rerank_distances(ti, "standard", replace(cfg.rerank, k=k), threads=args.threads)
        profiles.append(rank_shift_profile(before, ranking_from_distances(dist)))
    lines = ["position," + ",".join(f"k{k}" for k in ks)]
    for p in range(len(profiles[0])):
        lines.append(f"{p + 1}," + ",".join(repr(float(pr[p])) for pr in profiles))
    run.write_text(f"shift_profile_{args.task}.csv", "\n".join(lines) + "\n")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "rerank": cmd_rerank, "shift-profile": cmd_shift_profile}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="run directory (overrides io.out)")
    common.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hiergeo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic campus")
    sub.add_parser("train", parents=[common], help="train the encoder, write embeddings")
    e = sub.add_parser("eval", parents=[common], help="evaluate both retrieval tasks")
    e.add_argument("--rerank", choices=RERANK_MODES, default="none")
    a = sub.add_parser("ablate", parents=[common], help="hyper-parameter and scale ablations")
    a.add_argument("--sweep", choices=("tau", "lambda1", "single_vs_multi"), required=True)
    r = sub.add_parser("rerank", parents=[common], help="re-rank a stored distance matrix")
    r.add_argument("--matrix", required=True, help="square matrix, queries first (.csv or HGEO1D)")
    r.add_argument("--n-queries", type=int, default=1)
    r.add_argument("--k", type=int)
    r.add_argument("--schedule", help="comma-separated k schedule (multi-scale)")
    r.add_argument("--msrerank", action="store_true", help="use rerank.schedule from the config")
    r.add_argument("--output", help="output file name inside --out")
    s = sub.add_parser("shift-profile", parents=[common], help="rank shift caused by re-ranking")
    s.add_argument("--ks", default="10,20,40")
    s.add_argument("--task", choices=tuple(TASKS), default="sat2drone")
    s.add_argument("--split", choices=("train", "test"), default="train")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads == 0:
        args.threads = os.cpu_count() or 1
    if args.threads < 0:
        print("hiergeo: --threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed, args.out)
        out = Path(cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            print(f"hiergeo: cannot create output directory {out}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        run = Run(args.command, cfg, out)
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            COMMANDS[args.command](cfg, args, run)
        manifest = None
        if args.command == "eval":
            manifest = f"manifest_eval_{args.rerank}.json"
        elif args.command == "ablate":
            manifest = f"manifest_ablate_{args.sweep}.json"
        run.finish(manifest)
    except ConfigError as exc:
        print(f"hiergeo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, InputError, FormatError, ShapeError) as exc:
        print(f"hiergeo: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDivergedError as exc:
        print(f"hiergeo: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"hiergeo: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
