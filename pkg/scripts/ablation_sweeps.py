"""Sweeps over the DyCL scale factor tau and the DyCL weight lambda1.

    python scripts/ablation_sweeps.py --seeds 0 1 2
"""
import argparse
from dataclasses import replace

import numpy as np

from hiergeo.geo import ScaleConfig
from hiergeo.losses import LossConfig
from hiergeo.pipeline import default_campus, evaluate_task, train_and_embed
from hiergeo.synth import TrainerConfig


def sweep(name, values, seeds, scales):
    print(f"{name} sweep (Sat->Drone, mean over seeds {seeds})")
    for v in values:
        maps, haps = [], []
        for seed in seeds:
            campus = default_campus(seed)
            loss = replace(LossConfig(), **{name: v})
            _, emb = train_and_embed(campus, TrainerConfig(seed=seed), loss, scales)
            rep = evaluate_task(emb, campus.registry, scales, "sat2drone")
            maps.append(rep.map_overall)
            haps.append(rep.hap)
        print(f"  {name}={v:<6} mAP {100 * np.mean(maps):6.2f}  H-AP {100 * np.mean(haps):6.2f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    scales = ScaleConfig()
    sweep("tau", [16.0, 32.0, 64.0], args.seeds, scales)
    sweep("lambda1", [0.1, 0.2, 0.5, 1.0], args.seeds, scales)


if __name__ == "__main__":
    main()
