"""No re-ranking vs standard k-reciprocal vs multi-scale re-ranking.

The default campus gives the k schedule (20, 20, 20), where the multi-scale
variant reduces to standard re-ranking. ``--dense`` packs more buildings and
drone images into a smaller area so the schedule separates; ``--schedule``
forces an explicit one.

    python scripts/rerank_comparison.py --seeds 0 1 2 --dense
"""
import argparse

from hiergeo.geo import ScaleConfig
from hiergeo.losses import LossConfig
from hiergeo.pipeline import default_campus, evaluate_task, k_schedule_for, train_and_embed
from hiergeo.rerank import KSchedule, RerankConfig
from hiergeo.synth import TrainerConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--dense", action="store_true")
    p.add_argument("--schedule", type=int, nargs="+", default=None)
    p.add_argument("--tasks", nargs="+", default=["sat2drone", "drone2sat"])
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    scales, rcfg = ScaleConfig(), RerankConfig()
    overrides = dict(area_side=1200.0, drone_images_per_building=16) if args.dense else {}
    for seed in args.seeds:
        campus = default_campus(seed, **overrides)
        _, emb = train_and_embed(campus, TrainerConfig(seed=seed), LossConfig(), scales)
        schedule = (KSchedule(args.schedule) if args.schedule
                    else k_schedule_for(campus.registry, emb, scales, rcfg))
        print(f"seed {seed}  schedule {list(schedule)}")
        for task in args.tasks:
            for mode in ("none", "standard", "msrerank"):
                rep = evaluate_task(emb, campus.registry, scales, task, mode,
                                    rerank_config=rcfg, schedule=schedule, threads=args.threads)
                print(f"  {task:<10}{mode:<10} H-AP {rep.hap:.4f}  mAP {rep.map_overall:.4f}  "
                      f"R@1(small) {rep.recall[0][1]:.4f}")


if __name__ == "__main__":
    main()
