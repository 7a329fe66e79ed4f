"""Fill the replicate store read by the acceptance suite.

Usage: python scripts/run_benchmarks.py [study ...]

Every replicate is appended to ``bench_store/`` as soon as it finishes, so the
script can be interrupted and resumed. Results are deterministic in the
replicate seed.
"""

import sys
import time
from pathlib import Path

from specmatch.experiments import BenchSettings, preset, run_benchmark

ROOT = Path(__file__).resolve().parents[1]
STORE = ROOT / "bench_store"
REPLICATES = {"crossover": 50, "table3": 100, "table2": 100}


def main(studies):
    settings = BenchSettings(cache_dir=str(STORE / "refs"))
    out = ROOT / "results"
    out.mkdir(exist_ok=True)
    t0 = time.time()

    def progress(point, method, seed, rec):
        print(f"[{time.time() - t0:8.0f}s] m={point.m} s={point.used_rank} sigma={point.sigma} "
              f"{method} seed={seed} e_f={rec.e_f:.4f}", flush=True)

    for name in studies:
        points, methods, x = preset(name)
        run_benchmark(points, methods, REPLICATES[name], out / f"{name}.csv", 0, settings,
                      STORE, 1, out / f"{name}_plot.csv", x, progress=progress)
        print(f"done {name}", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:] or list(REPLICATES))
