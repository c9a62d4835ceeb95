"""Marketplace simulation: Poisson ballot arrivals, routing, pricing and scoring.

Tasks are tracked on the average-worker count lattice (see ``batch``):
ballots come from freshly drawn workers of varying skill, but beliefs are
updated with the pool's mean error, as the controller cannot tell workers
apart. Trace replay reuses the same loop with arrivals and labels taken
from a recorded trace.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
from scipy import special

from .batch import StateTables
from .config import SimConfig
from .costsetter import (CompletionModel, CostPolicy, PayAction, Plan, PriceController,
                         build_plan, value_iteration)
from .selector import Router, Routing
from .trace import BallotEvent, BallotTrace
from .workers import _accuracy

EPOCH_FIELDS = ["epoch", "tau_min", "pay", "ballots", "nu_bar_tracked", "nu_bar_true",
                "theta_tracked", "theta_true", "cum_cost"]


# --------------------------------------------------------------------------
# controllers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Controller:
    """Pricing and routing strategy for one episode.

    ``kind`` is ``octopus`` (planned pay, quality-managed tasks), ``static``
    (fixed pay index, quality-managed tasks) or ``gao`` (planned pay,
    ``r`` round-robin ballots per task, no per-task stopping).
    """

    kind: str
    pay_idx: int = 0
    r: int = 0
    routing: Routing = Routing.GREEDY
    sync: bool = True

    def __post_init__(self):
        if self.kind not in ("octopus", "static", "gao"):
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.kind == "gao" and self.r < 1:
            raise ValueError("gao controller needs r >= 1")
        object.__setattr__(self, "routing", Routing(self.routing))

    @property
    def name(self) -> str:
        if self.kind == "static":
            return f"static-{self.pay_idx + 1}"
        if self.kind == "gao":
            return f"gao-{self.r}"
        name = "octopus"
        if self.routing is not Routing.GREEDY:
            name += "-" + self.routing.value
        if not self.sync:
            name += "-nosync"
        return name

    @classmethod
    def parse(cls, text: str) -> "Controller":
        """Inverse of ``name``; static levels are 1-based pay-grid positions."""
        t = text.strip().lower()
        if t.startswith("static-"):
            return cls("static", pay_idx=int(t.split("-", 1)[1]) - 1)
        if t.startswith("gao-"):
            return cls("gao", r=int(t.split("-", 1)[1]))
        if t.startswith("octopus"):
            rest = t[len("octopus"):]
            sync = True
            if rest.endswith("-nosync"):
                sync = False
                rest = rest[: -len("-nosync")]
            routing = Routing(rest[1:]) if rest else Routing.GREEDY
            return cls("octopus", routing=routing, sync=sync)
        raise ValueError(f"cannot parse controller {text!r}")


def Octopus(routing: Routing = Routing.GREEDY, sync: bool = True) -> Controller:
    return Controller("octopus", routing=routing, sync=sync)


def StaticPay(pay_idx: int) -> Controller:
    return Controller("static", pay_idx=pay_idx)


def GaoFixed(r: int) -> Controller:
    return Controller("gao", r=r)


# --------------------------------------------------------------------------
# shared planning artifacts
# --------------------------------------------------------------------------

class Resources:
    """Lazily built tables and policies shared by episodes with one config."""

    def __init__(self, cfg: SimConfig, plan: Plan | None = None):
        self.cfg = cfg
        self._plan = plan
        self._tables = None
        self._gao = {}

    @property
    def tables(self) -> StateTables:
        if self._tables is None:
            self._tables = StateTables(self.cfg.prior, self.cfg.quality(), 0.5)
        return self._tables

    @property
    def plan(self) -> Plan:
        if self._plan is None:
            self._plan = build_plan(self.cfg, with_feasibility=False)
        return self._plan

    def gao(self, r: int) -> CostPolicy:
        if r not in self._gao:
            self._gao[r] = gao_baseline_policy(r, self.cfg, self.tables)
        return self._gao[r]


def expected_confidence(tables: StateTables, k: int) -> float:
    """E[v] after ``k`` average-worker ballots on a fresh task."""
    lat = tables.lat
    k1 = np.arange(k + 1)
    m = lat.mass[k1, k - k1] / lat.mass[0, 0]
    return float(np.sum(special.comb(k, k1) * m * lat.v[k1, k - k1]))


def gao_baseline_policy(r: int, cfg: SimConfig, tables: StateTables | None = None) -> CostPolicy:
    """Pay policy for ``r`` round-robin ballots per task.

    Same solver as the quality-managed planner with the quality axis
    collapsed: theta counts the ballots still owed, pay changes leave it
    unchanged, and the terminal reward is the expected batch utility after
    round-robin delivery of the ballots received so far.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if tables is None:
        tables = StateTables(cfg.prior, cfg.quality(), 0.5)
    if r > tables.lat.depth:
        raise ValueError(f"r={r} exceeds the lattice depth {tables.lat.depth}")
    n = cfg.n
    total = n * r
    n_theta = int(math.ceil(total / cfg.dtheta)) + 1
    ev = np.array([expected_confidence(tables, k) for k in range(r + 1)])
    terminal = np.empty((1, n_theta))
    for t in range(n_theta):
        m = max(total - int(round(t * cfg.dtheta)), 0)
        base, extra = divmod(m, n)
        if base >= r:
            base, extra = r, 0
        vsum = (n - extra) * ev[base] + extra * ev[min(base + 1, r)]
        terminal[0, t] = -cfg.penalty * (n - vsum)
    model = CompletionModel(cfg.rates_per_epoch, cfg.dtheta)
    probs = [model.bucket_probs(p) for p in range(len(cfg.pay_grid))]
    k = len(cfg.pay_grid)
    T = [np.ones((len(pr), 1, 1)) for pr in probs]
    shift = np.zeros((k, k), dtype=np.int64)
    action, value, entered = value_iteration(terminal, T, probs, cfg.pay_grid, cfg.dtheta, shift,
                                             cfg.n_epochs, cfg.eps_switch)
    return CostPolicy(action, value, cfg.pay_grid, cfg.dtheta, 1, cfg.dtau_min, shift, entered=entered)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    controller: str
    seed: int
    deadline_min: float
    n: int
    penalty: float
    utility: float
    accuracy: float
    n_wrong: int
    total_cost: float
    ballots: int
    terminated_epoch: int | None
    pay_schedule: list
    epochs: list
    answers: list
    truth: list
    trace: BallotTrace | None = field(default=None, repr=False, compare=False)

    @property
    def avg_pay(self) -> float | None:
        return self.total_cost / self.ballots if self.ballots else None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "trace"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        return cls(**json.loads(text))

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_FIELDS)
        for row in self.epochs:
            w.writerow(["" if row[k] is None else row[k] for k in EPOCH_FIELDS])
        return buf.getvalue()


@dataclass(frozen=True)
class GroundTruth:
    answers: np.ndarray
    difficulty: np.ndarray


def draw_ground_truth(cfg: SimConfig, rng: np.random.Generator) -> GroundTruth:
    answers = rng.integers(0, 2, size=cfg.n)
    if cfg.prior.kind == "uniform":
        d = rng.random(cfg.n)
    else:
        d = rng.beta(cfg.prior.a, cfg.prior.b, size=cfg.n)
    return GroundTruth(answers, d)


# --------------------------------------------------------------------------
# episode loop
# --------------------------------------------------------------------------

class _Batch:
    """Count-lattice state of every task plus the router over them."""

    def __init__(self, tables: StateTables, n: int, routing: Routing, rng, pay_idx: int):
        self.t = tables
        self.k1 = np.zeros(n, dtype=np.int64)
        self.k0 = np.zeros(n, dtype=np.int64)
        self.router = Router(n, routing, rng)
        self.set_pay(pay_idx)

    def set_pay(self, pay_idx: int):
        self.pay_idx = pay_idx
        self.light = self.t.light[pay_idx]
        self.router.rebuild(self.t.phi[self.k1, self.k0], self.light[self.k1, self.k0])

    def add(self, q: int, label: int):
        if label:
            self.k1[q] += 1
        else:
            self.k0[q] += 1
        a, b = self.k1[q], self.k0[q]
        self.router.update(q, float(self.t.phi[a, b]), bool(self.light[a, b]))

    def nu_bar(self) -> float:
        return float(self.t.nu[self.k1, self.k0].mean())

    def theta(self, pay_idx: int | None = None) -> float:
        p = self.pay_idx if pay_idx is None else pay_idx
        return float(self.t.theta_grid(p)[self.k1, self.k0].sum())

    def labels(self) -> np.ndarray:
        return self.t.label(self.k1, self.k0)


def _deadline_epochs(cfg: SimConfig, deadline_min: float | None) -> int:
    if deadline_min is None:
        return cfg.n_epochs
    e = deadline_min / cfg.dtau_min
    if abs(e - round(e)) > 1e-9 or round(e) < 1:
        raise ValueError("deadline must be a positive whole number of epochs")
    if round(e) > cfg.n_epochs:
        raise ValueError(f"deadline {deadline_min} min exceeds the planned {cfg.tau_max_min} min")
    return int(round(e))


def _episode(cfg: SimConfig, controller: Controller, res: Resources, n_epochs: int, seed: int,
             arrivals: Callable, ballot: Callable, truth: np.ndarray, record: list | None) -> RunResult:
    pay_grid = cfg.pay_grid
    router_rng = np.random.default_rng([seed, 3])
    tables = res.tables
    n = len(truth)
    gao = controller.kind == "gao"
    pc = None
    if controller.kind == "octopus":
        plan = res.plan
        pc = PriceController(plan.policy, plan.theta0, plan.cache, n_epochs)
        start_pay = 0
    elif gao:
        pol = res.gao(controller.r)
        pc = PriceController(pol, np.full(len(pay_grid), float(n * controller.r)), None, n_epochs)
        start_pay = 0
    else:
        start_pay = controller.pay_idx
        if not 0 <= start_pay < len(pay_grid):
            raise ValueError(f"static pay index {start_pay} outside the pay grid")
    batch = _Batch(tables, n, controller.routing, router_rng, start_pay)
    owed = n * controller.r  # gao only
    served = 0
    cost = 0.0
    total = 0
    epochs = []
    schedule = []
    terminated = None
    for e in range(n_epochs):
        if pc is not None:
            if gao:
                pc.synchronize(0.0, float(owed - served), e)
                act = pc.act(e)
            else:
                if controller.sync:
                    pc.synchronize(batch.nu_bar(), batch.theta(), e)
                act = pc.act(e, theta_at=batch.theta if controller.sync else None)
            if act is PayAction.TERMINATE:
                terminated = e
                break
            if pc.pay_idx != batch.pay_idx:
                batch.set_pay(pc.pay_idx)
        p = batch.pay_idx
        pay = pay_grid[p]
        schedule.append(pay)
        nb = 0
        for payload in arrivals(e, p):
            if gao:
                if served >= owed:
                    break
                q = served % n
                served += 1
            else:
                q = batch.router.select()
                if q is None:
                    continue
            label = ballot(q, payload, p)
            if label is None:
                continue
            batch.add(q, label)
            nb += 1
            if record is not None:
                record.append((payload[0], q, label, p))
        cost += pay * nb
        total += nb
        tracked_nu = tracked_theta = None
        if pc is not None:
            pc.observe(nb)
            if not gao:
                tracked_nu, tracked_theta = pc.nu_bar, pc.theta
        epochs.append({"epoch": e, "tau_min": (e + 1) * cfg.dtau_min, "pay": pay, "ballots": nb,
                       "nu_bar_tracked": tracked_nu, "nu_bar_true": batch.nu_bar(),
                       "theta_tracked": tracked_theta, "theta_true": batch.theta(), "cum_cost": cost})
    answers = batch.labels()
    wrong = int(np.sum(answers != truth))
    return RunResult(controller=controller.name, seed=int(seed), deadline_min=n_epochs * cfg.dtau_min,
                     n=n, penalty=cfg.penalty, utility=-cfg.penalty * wrong - cost,
                     accuracy=1.0 - wrong / n, n_wrong=wrong, total_cost=cost, ballots=total,
                     terminated_epoch=terminated, pay_schedule=schedule, epochs=epochs,
                     answers=answers.tolist(), truth=[int(x) for x in truth])


def run_episode(cfg: SimConfig, controller: Controller, deadline_min: float | None = None,
                seed: int | None = None, resources: Resources | None = None,
                record_trace: bool = False) -> RunResult:
    """Simulate one batch under ``controller`` until the deadline.

    Ground truth depends only on the seed, so controllers compared at the
    same seed face the same tasks. With ``record_trace`` the served
    ballots are attached to the result as a ``BallotTrace``.
    """
    seed = cfg.seed if seed is None else seed
    res = resources if resources is not None else Resources(cfg)
    n_epochs = _deadline_epochs(cfg, deadline_min)
    gt = draw_ground_truth(cfg, np.random.default_rng([seed, 1]))
    arr_rng = np.random.default_rng([seed, 2])
    work_rng = np.random.default_rng([seed, 4])
    rates = cfg.rates_per_epoch
    span = int(round(cfg.dtau_min * 60))
    state = {"gamma": None, "u": None}

    def arrivals(e, p):
        m = int(arr_rng.poisson(rates[p]))
        if m <= span:
            ts = np.sort(arr_rng.choice(span, size=m, replace=False))
        else:
            ts = np.sort(arr_rng.integers(0, span, size=m))
        state["gamma"] = cfg.pool.draw(work_rng, m)
        state["u"] = work_rng.random(m)
        for i in range(m):
            yield (e * span + int(ts[i]), i)

    def ballot(q, payload, p):
        i = payload[1]
        correct = state["u"][i] < _accuracy(state["gamma"][i], gt.difficulty[q])
        return int(gt.answers[q]) if correct else 1 - int(gt.answers[q])

    record = [] if record_trace else None
    result = _episode(cfg, controller, res, n_epochs, seed, arrivals, ballot, gt.answers, record)
    if record is not None:
        result.trace = BallotTrace([BallotEvent(ts, q, w, lab, p) for w, (ts, q, lab, p) in enumerate(record)],
                                   len(cfg.pay_grid))
    return result


def replay_episode(trace: BallotTrace, gold: dict, controller: Controller, cfg: SimConfig,
                   seed: int = 0, resample: bool = False, deadline_min: float | None = None,
                   resources: Resources | None = None) -> RunResult:
    """Run a controller against recorded ballots.

    Every trace event is one worker arrival. The routed task receives its
    next unused recorded ballot when the controller's pay matches the
    pay the event was recorded at; otherwise (or always, with
    ``resample``) a random recorded ballot of that task is drawn. A task
    with no recorded ballots cannot be served and the arrival is lost.
    """
    if len(trace) == 0:
        raise ValueError("trace is empty")
    ids = sorted(gold)
    index = {t: i for i, t in enumerate(ids)}
    missing = sorted({e.task_id for e in trace} - set(index))
    if missing:
        raise ValueError(f"tasks without gold labels: {missing[:5]}")
    if cfg.n != len(ids):
        raise ValueError(f"config has n={cfg.n} but gold covers {len(ids)} tasks")
    res = resources if resources is not None else Resources(cfg)
    n_epochs = _deadline_epochs(cfg, deadline_min)
    pools = [[] for _ in ids]
    for ev in trace:
        pools[index[ev.task_id]].append(ev.label)
    used = np.zeros(len(ids), dtype=np.int64)
    rng = np.random.default_rng([seed, 5])
    span = int(round(cfg.dtau_min * 60))
    by_epoch = {}
    for ev in trace:
        by_epoch.setdefault(ev.timestamp_sec // span, []).append(ev)

    def arrivals(e, p):
        for ev in by_epoch.get(e, ()):
            yield (ev.timestamp_sec, ev)

    def ballot(q, payload, p):
        ev = payload[1]
        pool = pools[q]
        if not pool:
            return None
        if not resample and ev.pay_level == p and used[q] < len(pool):
            lab = pool[used[q]]
            used[q] += 1
            return lab
        return pool[int(rng.integers(len(pool)))]

    truth = np.array([gold[t] for t in ids], dtype=np.int64)
    return _episode(cfg, controller, res, n_epochs, seed, arrivals, ballot, truth, None)
