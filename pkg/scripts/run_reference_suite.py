"""Run the shipped 20-case blob suite under the default config and print per-case MD."""
import argparse
import json
import time

import numpy as np

from geodrag.evalharness import default_suite, run_benchmark
from geodrag.optimizer import DragConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--suite-seed", type=int, default=0)
    ap.add_argument("--out", help="write the JSON report here")
    args = ap.parse_args()

    t0 = time.perf_counter()
    report = run_benchmark(default_suite(args.count, args.suite_seed), DragConfig())
    elapsed = time.perf_counter() - t0
    for r in report["cases"]:
        print(f"{r['case_id']}  md_before {r['md_before']:6.2f}  md_after {r['md_after']:6.3f}  "
              f"md_detect {r['md_detect']:6.3f}  events {r['fixation_events']}")
    md = np.array([r["md_after"] for r in report["cases"]])
    print(f"median {np.median(md):.3f}  max {md.max():.3f}  ({elapsed:.1f}s)")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
