"""Compare the compiled and pure-Python greedy rollout kernels.

Runs the rollout used to build the quality-transition cache on a
reconstructed 500-task batch and on a fresh batch, checks both backends
agree exactly and reports the timings.

    python benchmarks/bench_kernels.py [--repeats 5]
"""
import argparse
import time

import numpy as np

from crowdctl import _kernels_py
from crowdctl.batch import StateTables
from crowdctl.config import SimConfig
from crowdctl.costsetter import rollout_tables
from crowdctl.reconstruct import BetaFit, reconstruct_histogram

try:
    from crowdctl import _kernels
except ImportError:
    _kernels = None


def cases(cfg):
    qcfg = cfg.quality()
    tabs = rollout_tables(cfg.prior, qcfg, cfg.hist_bins, 0)
    hist = reconstruct_histogram(BetaFit(4.0, 0.5, 0.0, True), cfg.n, cfg.hist_bins)
    yield "beta batch, 300 ballots", hist.counts, tabs, 300
    st = StateTables(cfg.prior, qcfg, 0.5, with_theta=False)
    fresh = (st.phi[None], st.light[0][None].astype(np.uint8), st.p_one[None], st.nu[None])
    yield "fresh batch, run to completion", np.array([cfg.n]), fresh, cfg.n * 41


def time_fn(fn, args, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    cfg = SimConfig()
    rng = np.random.default_rng(0)
    print(f"{'case':<34}{'python [s]':>12}{'compiled [s]':>14}{'speedup':>10}")
    for name, counts, (phi, light, p1, nu), steps in cases(cfg):
        u = rng.random(steps)
        cps = np.arange(0, steps + 1, 10, dtype=np.int64)
        call = (counts, phi, light, p1, nu, np.zeros_like(nu), u, cps)
        tp, op = time_fn(_kernels_py.greedy_rollout, call, args.repeats)
        if _kernels is None:
            print(f"{name:<34}{tp:>12.4f}{'n/a':>14}{'':>10}")
            continue
        tc, oc = time_fn(_kernels.greedy_rollout, call, args.repeats)
        same = all(np.array_equal(a, b) for a, b in zip(op, oc))
        print(f"{name:<34}{tp:>12.4f}{tc:>14.4f}{tp / tc:>9.1f}x" + ("" if same else "  MISMATCH"))


if __name__ == "__main__":
    main()
