"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--quick]
"""
import argparse

from csbm import bench
from csbm._kernels import BACKEND

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true", help="small sizes")
    args = ap.parse_args()
    print(f"default backend: {BACKEND}")
    print(bench.format_rows(bench.run_all(args.quick)))
