"""Ablation table: every variant under the identity and a smoothing denoiser.

With the identity denoiser all variants usually land exactly on target, so the
gaussian rows are the informative ones: smoothing erodes the dragged blob and the
final copy-paste is what restores it.
"""
import argparse

import numpy as np

from geodrag.evalharness import VARIANTS, default_suite, run_benchmark
from geodrag.optimizer import DragConfig

SETTINGS = {
    "identity": {},
    "gaussian-0.7": {"denoiser": "gaussian", "denoiser_sigma": 0.7},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--suite-seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    print(f"{'setting':<14}{'suite':>6}  {'variant':<22}{'median':>8}{'mean':>8}{'max':>8}{'win/tie':>9}")
    for name, over in SETTINGS.items():
        cfg = DragConfig().replace(**over)
        for s in args.suite_seeds:
            rep = run_benchmark(default_suite(args.count, s), cfg, list(VARIANTS), args.workers)
            md = {v: np.array([r["md_after"] for r in rep["cases"] if r["variant"] == v]) for v in VARIANTS}
            for v, arr in md.items():
                wins = int(np.sum(md["full"] <= arr + 1e-9))
                print(f"{name:<14}{s:>6}  {v:<22}{np.median(arr):8.3f}{arr.mean():8.3f}{arr.max():8.3f}"
                      f"{wins:>6}/{len(arr)}")


if __name__ == "__main__":
    main()
