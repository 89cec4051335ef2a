"""Mean absolute rank shift per original position after standard re-ranking.

    python scripts/shift_profile.py --seed 0 --ks 10 20 40
"""
import argparse

from hiergeo.geo import ScaleConfig
from hiergeo.losses import LossConfig
from hiergeo.pipeline import default_campus, rerank_distances, task_inputs, train_and_embed
from hiergeo.embeddings import similarity_to_distance
from hiergeo.rerank import RerankConfig, rank_shift_profile, ranking_from_distances
from hiergeo.synth import TrainerConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ks", type=int, nargs="+", default=[10, 20, 40])
    p.add_argument("--task", default="sat2drone")
    p.add_argument("--split", default="train")
    p.add_argument("--head", type=int, default=60, help="positions to print")
    args = p.parse_args()

    scales = ScaleConfig()
    campus = default_campus(args.seed)
    _, emb = train_and_embed(campus, TrainerConfig(seed=args.seed), LossConfig(), scales)
    ti = task_inputs(emb, campus.registry, scales, args.task, args.split)
    before = ranking_from_distances(similarity_to_distance(ti.sim))
    profiles = {}
    for k in args.ks:
        after = ranking_from_distances(rerank_distances(ti, "standard", RerankConfig(k=k)))
        profiles[k] = rank_shift_profile(before, after)
    print("position " + "".join(f"{'k=' + str(k):>9}" for k in args.ks))
    for pos in range(min(args.head, before.shape[1])):
        print(f"{pos + 1:8d} " + "".join(f"{profiles[k][pos]:9.2f}" for k in args.ks))


if __name__ == "__main__":
    main()
