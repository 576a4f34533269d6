"""Per-group evaluation on cohorts where only one group carries information about the latent state.

    python scripts/run_ablation.py --group labs --seeds 0 1 2 3 4
"""
import argparse

from survdef.experiments import ablation
from survdef.model import GROUPS


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--group", choices=GROUPS, default="labs")
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = p.parse_args()
    wins = 0
    print("seed\t" + "\t".join(GROUPS) + "\tbest")
    for seed in args.seeds:
        r = ablation(seed, args.group)
        wins += r.best == args.group
        print(f"{seed}\t" + "\t".join(f"{r.per_group[g]:.4f}" for g in GROUPS) + f"\t{r.best}", flush=True)
    print(f"{args.group}-only evaluation best in {wins} of {len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
