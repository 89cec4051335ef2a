"""Single-scale vs multi-scale triplet models on synthetic campuses.

    python scripts/single_vs_multi.py --seeds 0 1 2 --out single_vs_multi.csv
"""
import argparse

from hiergeo.geo import ScaleConfig
from hiergeo.pipeline import default_campus, single_vs_multi
from hiergeo.synth import TrainerConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--out", default=None, help="optional CSV path")
    args = p.parse_args()

    rows = ["seed,model,map_small,map_middle,map_large,map_overall"]
    for seed in args.seeds:
        res = single_vs_multi(default_campus(seed), TrainerConfig(seed=seed), ScaleConfig(),
                              args.margin)
        print(f"seed {seed}")
        print(f"  {'model':<10}{'small':>8}{'middle':>8}{'large':>8}{'overall':>9}")
        for name, rep in res.items():
            m = [100 * x for x in rep.map]
            print(f"  {name:<10}{m[0]:8.2f}{m[1]:8.2f}{m[2]:8.2f}{100 * rep.map_overall:9.2f}")
            rows.append(f"{seed},{name},{rep.map[0]!r},{rep.map[1]!r},{rep.map[2]!r},"
                        f"{rep.map_overall!r}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
