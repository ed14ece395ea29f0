"""Best-so-far curves of PPO2 search and random search under the same budget.

    python3 scripts/ppo2_vs_random.py --seeds 0 1 2 3 --out results/best_so_far.csv
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from autosegloss.data import SceneParams, gen_dataset
from autosegloss.net import TrainSchedule
from autosegloss.search import SearchConfig, run_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--metric", default="miou")
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--iterations", type=int, default=100)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/best_so_far.csv"))
    args = ap.parse_args()

    data = gen_dataset(0, 100, SceneParams(size_px=16, num_classes=3, imbalance=0.1))
    finals = {"ppo2": [], "random": []}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "master_seed", "t", "best_mean_so_far", "best_max_so_far"])
        for seed in args.seeds:
            cfg = SearchConfig(metric=args.metric, steps=args.steps, samples=args.samples, master_seed=seed,
                               schedule=TrainSchedule(iterations=args.iterations))
            for strategy in ("ppo2", "random"):
                res = run_search(cfg, data, jobs=args.jobs, strategy=strategy)
                for h in res.history:
                    w.writerow([strategy, seed, h["t"], f"{h['best_mean_so_far']:.6f}", f"{h['best_max_so_far']:.6f}"])
                finals[strategy].append(res.history[-1]["best_mean_so_far"])
                print(f"seed {seed} {strategy}: final best-so-far {finals[strategy][-1]:.4f}", flush=True)
    for k, v in finals.items():
        print(f"{k}: mean final best-so-far {np.mean(v):.4f}")


if __name__ == "__main__":
    main()
