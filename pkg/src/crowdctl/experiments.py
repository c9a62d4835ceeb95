"""Experiment sweeps: controllers x deadlines x arrival-rate scales x seeds."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import SimConfig
from .costsetter import Plan, build_plan
from .sim import Controller, Resources, RunResult, replay_episode, run_episode

logger = logging.getLogger(__name__)

ALPHA = 0.05
REFERENCE = "octopus"


@dataclass
class ExperimentSpec:
    controllers: list
    deadlines: list
    seeds: int = 30
    rate_scales: list = field(default_factory=lambda: [1.0])
    out_dir: str | None = None
    workers: int = 1
    seed_offset: int = 0

    def __post_init__(self):
        self.controllers = [c if isinstance(c, Controller) else Controller.parse(c) for c in self.controllers]
        if not self.controllers:
            raise ValueError("need at least one controller")
        if self.seeds < 2:
            raise ValueError("significance tests need at least 2 seeds per cell")
        self.deadlines = [float(d) for d in self.deadlines]
        self.rate_scales = [float(r) for r in self.rate_scales]

    def seed_list(self) -> list:
        return list(range(self.seed_offset, self.seed_offset + self.seeds))


def avg_pay_per_ballot(result: RunResult) -> float | None:
    """Total cost over total ballots; None when no ballot was bought."""
    return result.total_cost / result.ballots if result.ballots else None


def normalize(x: float, ref: float) -> float | None:
    """Utility relative to the reference: 1 at the reference, ordering preserved.

    1 + (x - ref) / |ref|, i.e. x / ref when ref > 0 and 2 - x / ref when
    ref < 0.
    """
    if ref == 0:
        return None
    return 1.0 + (x - ref) / abs(ref)


def welch(a, b) -> float:
    """Two-sided Welch t-test p-value; identical constant samples give 1."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def ci_half_width(x) -> float:
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x)))


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

_SHARED = {}


def _init_worker(shared):
    _SHARED.update(shared)


def _run_cell(task):
    scale, name, deadline, seeds, mode = task
    res = _SHARED["resources"][scale]
    ctrl = Controller.parse(name)
    try:
        if mode == "replay":
            trace, gold = _SHARED["trace"], _SHARED["gold"]
            runs = [replay_episode(trace, gold, ctrl, res.cfg, seed=s, resample=_SHARED["resample"],
                                   deadline_min=deadline, resources=res) for s in seeds]
        else:
            runs = [run_episode(res.cfg, ctrl, deadline, seed=s, resources=res) for s in seeds]
        return task, [r.to_json() for r in runs], None
    except Exception as exc:  # a failing cell is reported, the suite goes on
        return task, None, f"{type(exc).__name__}: {exc}"


def load_or_build_plan(cfg: SimConfig, cache_dir=None) -> Plan:
    if cache_dir is not None and (Path(cache_dir) / "meta.json").exists():
        try:
            return Plan.load(cache_dir, cfg)
        except ValueError as exc:
            logger.warning("ignoring policy cache at %s: %s", cache_dir, exc)
    if cache_dir is not None:
        logger.warning("no usable policy cache at %s; building one", cache_dir)
    plan = build_plan(cfg, with_feasibility=False)
    if cache_dir is not None:
        plan.save(cache_dir)
    return plan


def _cache_for(base, scale: float, n_scales: int):
    if base is None:
        return None
    return Path(base) if n_scales == 1 else Path(base) / f"scale-{scale:g}"


def run_suite(spec: ExperimentSpec, cfg: SimConfig, plan_cache=None, trace=None, gold=None,
              resample: bool = False, resources: dict | None = None,
              save_runs: bool = False) -> "ComparisonReport":
    """Run every (rate scale, controller, deadline) cell over ``spec.seed_list()``.

    With ``trace`` and ``gold`` the cells replay the trace instead of
    simulating arrivals. ``resources`` maps rate scale to prebuilt
    ``Resources`` and skips planning for those scales. With ``save_runs``
    every RunResult is written to ``out_dir/runs`` as JSON plus its
    per-epoch CSV.
    """
    resources = dict(resources or {})
    needs_plan = any(c.kind == "octopus" for c in spec.controllers)
    for scale in spec.rate_scales:
        if scale in resources:
            continue
        cfg_s = cfg if scale == 1.0 else cfg.scaled_rates(scale)
        plan = load_or_build_plan(cfg_s, _cache_for(plan_cache, scale, len(spec.rate_scales))) if needs_plan else None
        resources[scale] = Resources(cfg_s, plan)
    shared = {"resources": resources, "trace": trace, "gold": gold, "resample": resample}
    mode = "replay" if trace is not None else "simulate"
    tasks = [(s, c.name, d, spec.seed_list(), mode)
             for s in spec.rate_scales for d in spec.deadlines for c in spec.controllers]
    if spec.workers > 1 and len(tasks) > 1:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(spec.workers, mp_context=ctx, initializer=_init_worker,
                                 initargs=(shared,)) as ex:
            out = list(ex.map(_run_cell, tasks))
    else:
        _init_worker(shared)
        out = [_run_cell(t) for t in tasks]
    runs = {}
    failures = []
    for (scale, name, deadline, _, _), payload, err in out:
        if err is not None:
            failures.append({"controller": name, "deadline_min": deadline, "rate_scale": scale, "error": err})
            logger.error("cell %s/%g/%g failed: %s", name, deadline, scale, err)
            continue
        runs[(scale, name, deadline)] = [RunResult.from_json(j) for j in payload]
        if save_runs and spec.out_dir is not None:
            rd = Path(spec.out_dir) / "runs"
            rd.mkdir(parents=True, exist_ok=True)
            for text, r in zip(payload, runs[(scale, name, deadline)]):
                stem = f"{name}_d{deadline:g}_x{scale:g}_s{r.seed}"
                (rd / f"{stem}.json").write_text(text)
                (rd / f"{stem}.csv").write_text(r.epochs_csv())
    report = ComparisonReport.from_runs(runs, [c.name for c in spec.controllers], failures)
    if spec.out_dir is not None:
        report.save(spec.out_dir)
        emit_plots_data(report, spec.out_dir)
    return report


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

CELL_FIELDS = ["controller", "deadline_min", "rate_scale", "n_seeds", "utility_mean", "utility_ci",
               "accuracy_mean", "cost_mean", "avg_pay_mean", "normalized_utility", "reference",
               "p_value", "significant", "delta_vs_reference"]


@dataclass
class ComparisonReport:
    cells: list
    failures: list
    tracks: list

    @property
    def complete(self) -> bool:
        return not self.failures

    @classmethod
    def from_runs(cls, runs: dict, order: list, failures=()) -> "ComparisonReport":
        rank = {n: i for i, n in enumerate(order)}
        keys = sorted(runs, key=lambda k: (k[0], k[2], rank.get(k[1], len(rank)), k[1]))
        cells = []
        tracks = []
        for scale, name, deadline in keys:
            rs = runs[(scale, name, deadline)]
            u = np.array([r.utility for r in rs])
            ref_name = REFERENCE if (scale, REFERENCE, deadline) in runs else order[0]
            ref = np.array([r.utility for r in runs[(scale, ref_name, deadline)]]) \
                if (scale, ref_name, deadline) in runs else u
            pays = [p for p in (avg_pay_per_ballot(r) for r in rs) if p is not None]
            is_ref = name == ref_name
            p = 1.0 if is_ref else welch(u, ref)
            cells.append({
                "controller": name, "deadline_min": deadline, "rate_scale": scale, "n_seeds": len(rs),
                "utility_mean": float(u.mean()), "utility_ci": ci_half_width(u),
                "accuracy_mean": float(np.mean([r.accuracy for r in rs])),
                "cost_mean": float(np.mean([r.total_cost for r in rs])),
                "avg_pay_mean": float(np.mean(pays)) if pays else None,
                "normalized_utility": normalize(float(u.mean()), float(ref.mean())),
                "reference": ref_name, "p_value": p,
                "significant": bool(p < ALPHA) if np.isfinite(p) else False,
                "delta_vs_reference": float(u.mean() - ref.mean()),
            })
            if any(row["nu_bar_tracked"] is not None for r in rs for row in r.epochs):
                E = max(len(r.epochs) for r in rs)
                for e in range(E):
                    rows = [r.epochs[e] for r in rs if len(r.epochs) > e]
                    tracks.append({
                        "controller": name, "deadline_min": deadline, "rate_scale": scale, "epoch": e,
                        "tau_min": rows[0]["tau_min"], "n_runs": len(rows),
                        "nu_bar_true": float(np.mean([x["nu_bar_true"] for x in rows])),
                        "nu_bar_tracked": float(np.mean([x["nu_bar_tracked"] for x in rows])),
                        "theta_true": float(np.mean([x["theta_true"] for x in rows])),
                        "theta_tracked": float(np.mean([x["theta_tracked"] for x in rows])),
                    })
        return cls(cells, list(failures), tracks)

    def cell(self, controller: str, deadline: float, rate_scale: float = 1.0) -> dict:
        for c in self.cells:
            if c["controller"] == controller and c["deadline_min"] == deadline and c["rate_scale"] == rate_scale:
                return c
        raise KeyError((controller, deadline, rate_scale))

    def to_json(self) -> str:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x
        cells = [{k: clean(v) for k, v in c.items()} for c in self.cells]
        return json.dumps({"cells": cells, "failures": self.failures, "tracks": self.tracks},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        d = json.loads(text)
        return cls(d["cells"], d.get("failures", []), d.get("tracks", []))

    def save(self, out_dir):
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(self.to_json())
        (d / "cells.csv").write_text(_csv(CELL_FIELDS, self.cells))


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow(["" if r.get(k) is None else r[k] for k in fields])
    return buf.getvalue()


PLOT_FILES = {
    "utility_vs_deadline.csv": ("utility_mean", "normalized_utility", "utility_ci"),
    "accuracy_vs_deadline.csv": ("accuracy_mean",),
    "cost_vs_deadline.csv": ("cost_mean",),
    "avg_pay_vs_deadline.csv": ("avg_pay_mean",),
}
TRACK_FIELDS = ["controller", "deadline_min", "rate_scale", "epoch", "tau_min", "n_runs",
                "nu_bar_true", "nu_bar_tracked", "theta_true", "theta_tracked"]


def emit_plots_data(report: ComparisonReport, out_dir) -> list:
    """One CSV per figure family; returns the written paths."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    key = ["controller", "deadline_min", "rate_scale"]
    for name, cols in PLOT_FILES.items():
        p = d / name
        p.write_text(_csv(key + list(cols), report.cells))
        paths.append(p)
    p = d / "tracking.csv"
    p.write_text(_csv(TRACK_FIELDS, report.tracks))
    paths.append(p)
    return paths
