"""Searched mIoU surrogate vs the identity-curve surrogate on the imbalanced proxy task.

For each master seed: run a PPO2 search, retrain the best loss and the
identity loss from the same initial weights, and score both on the hold-out
split. Writes one CSV row per seed.

    python3 scripts/search_improves.py --seeds 0 1 2 3 --out results/search_vs_identity.csv
"""
import argparse
import csv
import statistics
import time
from dataclasses import replace
from pathlib import Path

from autosegloss.data import SceneParams, gen_dataset
from autosegloss.net import TrainSchedule
from autosegloss.search import SearchConfig, retrain_and_score, run_search
from autosegloss.surrogate import identity_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--iterations", type=int, default=100, help="inner training iterations per candidate")
    ap.add_argument("--retrain-iterations", type=int, default=None,
                    help="iterations for the final retrain (default: same as --iterations)")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/search_vs_identity.csv"))
    args = ap.parse_args()

    data = gen_dataset(args.data_seed, 100, SceneParams(size_px=16, num_classes=3, imbalance=0.1))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    diffs = []
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["master_seed", "identity_miou", "searched_miou", "difference", "best_step", "seconds"])
        for seed in args.seeds:
            start = time.perf_counter()
            cfg = SearchConfig(steps=args.steps, samples=args.samples, master_seed=seed,
                               schedule=TrainSchedule(iterations=args.iterations))
            res = run_search(cfg, data, jobs=args.jobs)
            if args.retrain_iterations:
                cfg = replace(cfg, schedule=TrainSchedule(iterations=args.retrain_iterations))
            base = retrain_and_score(cfg, data, identity_spec("miou"))
            got = retrain_and_score(cfg, data, res.best_spec)
            diffs.append(got - base)
            secs = time.perf_counter() - start
            w.writerow([seed, f"{base:.6f}", f"{got:.6f}", f"{got - base:.6f}", res.best_step, f"{secs:.1f}"])
            fh.flush()
            print(f"seed {seed}: identity {base:.4f} searched {got:.4f} ({got - base:+.4f}), {secs:.0f}s")
    print(f"median gain {statistics.median(diffs):+.4f}")


if __name__ == "__main__":
    main()
