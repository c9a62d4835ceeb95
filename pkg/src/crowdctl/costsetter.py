"""Pricing MDP over aggregate batch state (nu_bar, theta, tau, pay).

States live on a grid: nu_bar in steps of 1/nu_levels, theta in buckets
of ``dtheta`` ballots, tau in epochs, pay as an index into the pay grid.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import stats

from . import kernels
from .batch import BALLOT_CAP, StateTables
from .belief import QualityConfig
from .config import SimConfig
from .frontier import ThetaTable, build_theta_table
from .reconstruct import (clamp_nu_bar, expected_theta_curve, feasible_thetas, fit_lambda,
                          reconstruct_histogram, LAMBDA_GRID)

logger = logging.getLogger(__name__)

CACHE_VERSION = 2


class PayAction(IntEnum):
    NO_CHANGE = 0
    UP = 1
    DOWN = 2
    TERMINATE = 3


class InvalidAction(ValueError):
    pass


@dataclass(frozen=True)
class AggregateState:
    nu_idx: int
    theta_idx: int
    tau_idx: int
    pay_idx: int


# --------------------------------------------------------------------------
# ballot completion model
# --------------------------------------------------------------------------

class CompletionModel:
    """Poisson ballots per epoch at each pay, truncated and bucketed."""

    def __init__(self, rates_per_epoch, dtheta: float = 10.0, tail: float = 1e-4):
        self.rates = tuple(float(r) for r in rates_per_epoch)
        if any(r < 0 for r in self.rates):
            raise ValueError("completion rates must be nonnegative")
        self.dtheta = dtheta
        self.tail = tail

    def pmf(self, pay_idx: int) -> np.ndarray:
        """Truncated, renormalized pmf over n_b = 0..M."""
        mu = self.rates[pay_idx]
        if mu <= 0:
            return np.ones(1)
        M = int(stats.poisson.isf(self.tail, mu)) + 1
        p = stats.poisson.pmf(np.arange(M + 1), mu)
        return p / p.sum()

    def bucket_probs(self, pay_idx: int) -> np.ndarray:
        """Mass per theta bucket; n_b rounds to the nearest multiple of dtheta."""
        p = self.pmf(pay_idx)
        j = np.floor(np.arange(len(p)) / self.dtheta + 0.5).astype(int)
        return np.bincount(j, weights=p)

    def max_bucket(self) -> int:
        return max(len(self.bucket_probs(i)) - 1 for i in range(len(self.rates)))


# --------------------------------------------------------------------------
# nu_bar transitions
# --------------------------------------------------------------------------

@dataclass
class NuTransitionCache:
    """(pay, nu_bar index, ballots bucket) -> distribution over next nu_bar index."""

    dist: np.ndarray  # (k, Nnu, NB+1, Nnu)
    mean: np.ndarray  # (k, Nnu, NB+1) expected next nu_bar (continuous)
    lam: np.ndarray   # (k, Nnu) Beta concentration per row (beta model only)

    @property
    def n_levels(self) -> int:
        return self.dist.shape[1] - 1

    @property
    def n_buckets(self) -> int:
        return self.dist.shape[2] - 1

    def expected_next(self, pay_idx: int, nu_idx: int, bucket: int) -> float:
        bucket = min(bucket, self.n_buckets)
        return float(self.mean[pay_idx, nu_idx, bucket])

    def matrices(self, pay_idx: int) -> np.ndarray:
        """(NB+1, Nnu, Nnu) transition matrices at one pay."""
        return self.dist[pay_idx].transpose(1, 0, 2)


def rollout_tables(prior, qcfg: QualityConfig, bins: int, ref_pay_idx: int = 0, cap: int = BALLOT_CAP):
    """Stacked (bin, k1, k0) tables for batches reconstructed on ``bins`` quality bins."""
    centers = (np.arange(bins) + 0.5) / bins
    tabs = [StateTables(prior, qcfg, 0.5 * (c + 1.0), cap=cap, with_theta=False) for c in centers]
    phi = np.stack([t.phi for t in tabs])
    light = np.stack([t.light[ref_pay_idx] for t in tabs]).astype(np.uint8)
    p1 = np.stack([t.p_one for t in tabs])
    nu = np.stack([t.nu for t in tabs])
    return phi, light, p1, nu


def reference_runs(st: StateTables, n: int, repeats: int, rng: np.random.Generator,
                   pay_idx: int = 0, aux=None):
    """Greedy average-worker runs on a fresh batch of ``n`` tasks until every task is dark.

    Returns per-run arrays (repeats, steps + 1) of nu_bar and of the summed
    per-state ``aux`` values.
    """
    aux = np.zeros_like(st.nu) if aux is None else aux
    steps = n * (BALLOT_CAP + 1)
    cps = np.arange(steps + 1)
    nus = np.empty((repeats, steps + 1))
    auxs = np.empty((repeats, steps + 1))
    light = st.light[pay_idx][None].astype(np.uint8)
    for r in range(repeats):
        u = rng.random(steps)
        a, b = kernels.greedy_rollout(np.array([n]), st.phi[None], light, st.p_one[None], st.nu[None],
                                      aux[None], u, cps)
        nus[r] = a / n
        auxs[r] = b
    return nus, auxs


def reference_theta(st: StateTables, n: int, nu_levels: int, repeats: int,
                    rng: np.random.Generator, pay_idx: int = 0) -> np.ndarray:
    """Mean batch theta seen at each nu_bar level along greedy runs from a fresh batch."""
    nus, auxs = reference_runs(st, n, repeats, rng, pay_idx, st.theta_grid(pay_idx))
    idx = np.clip(np.rint(nus * nu_levels).astype(int), 0, nu_levels).ravel()
    sums = np.bincount(idx, weights=auxs.ravel(), minlength=nu_levels + 1)
    cnt = np.bincount(idx, minlength=nu_levels + 1).astype(float)
    seen = np.flatnonzero(cnt)
    grid = np.arange(nu_levels + 1)
    # unvisited levels borrow from the nearest visited one
    hi = seen[np.clip(np.searchsorted(seen, grid), 0, len(seen) - 1)]
    lo = seen[np.clip(np.searchsorted(seen, grid) - 1, 0, len(seen) - 1)]
    pick = np.where(np.abs(hi - grid) <= np.abs(lo - grid), hi, lo)
    return sums[pick] / cnt[pick]


def trajectory_runs(nus: np.ndarray, nu_levels: int, nbs) -> np.ndarray:
    """Next-nu_bar samples read off reference runs.

    For start level ``i`` and each run, find the first step where the run
    reaches ``i / nu_levels`` and add the change in nu_bar over the next
    ``n_b`` ballots. Levels a run never reaches keep their value (the
    batch runs out of work before getting there). Output is
    (levels, runs, len(nbs)).
    """
    nbs = np.asarray(nbs, dtype=np.int64)
    R, S = nus.shape
    L = nu_levels
    out = np.empty((L + 1, R, len(nbs)))
    levels = np.arange(L + 1) / L
    for r in range(R):
        path = nus[r]
        best = np.maximum.accumulate(path)
        first = np.searchsorted(best, levels - 1e-12)
        for i in range(L + 1):
            s = first[i]
            if s >= S:
                out[i, r] = levels[i]
                continue
            ends = np.minimum(s + nbs, S - 1)
            out[i, r] = np.clip(levels[i] + path[ends] - path[s], 0.0, 1.0)
    return out


def estimate_nu_transition(nu_bar: float, theta: float, n_b, pay_idx: int, table: ThetaTable,
                           n: int, tabs, repeats: int, rng: np.random.Generator,
                           bins: int = 100, dtheta: float = 10.0, fit=None):
    """Expected next nu_bar after routing ``n_b`` simulated average-worker ballots.

    The batch is rebuilt from the Beta fit for (nu_bar, theta), every task
    gets a belief at its bin's quality with the prior over difficulty, and
    greedy routing runs on it. The simulated change in mean quality is
    added to ``nu_bar`` so that zero ballots leave it untouched. ``n_b``
    may be a scalar or an array of ballot counts; results are averaged over
    ``repeats`` runs. Returns ``(mean, per-run array, fit)``.
    """
    nbs = np.atleast_1d(np.asarray(n_b, dtype=np.int64))
    if nu_bar >= 1.0:
        per = np.ones((repeats, len(nbs)))
        return per.mean(axis=0), per, fit
    if fit is None:
        fit = fit_lambda(nu_bar, theta, pay_idx, table, n, dtheta)
        if not fit.feasible:
            raise ValueError(f"aggregate (nu_bar={nu_bar}, theta={theta}) is not reachable")
    hist = reconstruct_histogram(fit, n, bins)
    phi, light, p1, nu = tabs
    aux = np.zeros_like(nu)
    steps = int(nbs.max()) if len(nbs) else 0
    start = float(np.dot(hist.counts, nu[:, 0, 0]))
    per = np.empty((repeats, len(nbs)))
    for r in range(repeats):
        u = rng.random(steps)
        sums, _ = kernels.greedy_rollout(hist.counts, phi, light, p1, nu, aux, u, nbs)
        per[r] = np.clip(nu_bar + (sums - start) / n, 0.0, 1.0)
    return per.mean(axis=0), per, fit


def monotone_runs(runs: np.ndarray) -> np.ndarray:
    """Make simulated outcomes stochastically nondecreasing in the start level.

    ``runs`` is (levels, repeats, buckets). Each row's outcomes are sorted
    per bucket and the empirical quantiles are raised to the running
    maximum over lower start levels, so a better batch never has a worse
    next-quality distribution than a weaker one. Rollout noise otherwise
    breaks this ordering between neighboring rows.
    """
    q = np.sort(runs, axis=1)
    return np.maximum.accumulate(q, axis=0)


def build_nu_cache(cfg: SimConfig, table: ThetaTable, max_bucket: int, seed: int | None = None) -> NuTransitionCache:
    """Sample next-nu_bar distributions for every (pay, nu_bar, ballots bucket) cell.

    ``cfg.nu_model`` picks the batch used for the rollouts: ``trajectory``
    reads them off greedy runs of a fresh batch at that pay, ``beta``
    rebuilds a batch from the Beta fit at each level (the fit uses the
    batch theta seen at that level on the same runs).
    """
    qcfg = cfg.quality()
    L = cfg.nu_levels
    n = cfg.n
    k = len(cfg.pay_grid)
    R = cfg.repeats
    seed = cfg.seed if seed is None else seed
    nbs = (np.arange(max_bucket + 1) * cfg.dtheta).astype(np.int64)
    st = StateTables(cfg.prior, qcfg, 0.5, with_theta=cfg.nu_model == "beta")
    dist = np.zeros((k, L + 1, max_bucket + 1, L + 1))
    mean = np.zeros((k, L + 1, max_bucket + 1))
    lam = np.zeros((k, L + 1))
    for p in range(k):
        rng = np.random.default_rng([seed, 7, p])
        if cfg.nu_model == "trajectory":
            nus, _ = reference_runs(st, n, R, rng, p)
            runs = trajectory_runs(nus, L, nbs)
        else:
            theta_ref = reference_theta(st, n, L, R, rng, p)
            tabs = rollout_tables(cfg.prior, qcfg, cfg.hist_bins, p)
            runs = np.ones((L + 1, R, max_bucket + 1))
            for i in range(L):
                fit = fit_lambda(i / L, theta_ref[i], p, table, n, cfg.dtheta)
                lam[p, i] = fit.lam
                row_rng = np.random.default_rng([seed, 11, p, i])
                _, runs[i], _ = estimate_nu_transition(i / L, theta_ref[i], nbs, p, table, n, tabs, R,
                                                       row_rng, cfg.hist_bins, cfg.dtheta, fit=fit)
        runs = monotone_runs(runs)
        mean[p] = runs.mean(axis=1)
        idx = np.clip(np.rint(runs * L).astype(int), 0, L)
        for i in range(L + 1):
            for j in range(max_bucket + 1):
                dist[p, i, j] = np.bincount(idx[i, :, j], minlength=L + 1) / R
    return NuTransitionCache(dist, mean, lam)


# --------------------------------------------------------------------------
# value iteration
# --------------------------------------------------------------------------

def terminal_reward(nu_bar, penalty: float, n: int):
    """Expected batch utility on submission: n * (-0.5 P (1 - nu_bar))."""
    return n * (-0.5 * penalty * (1.0 - np.asarray(nu_bar, dtype=float)))


@dataclass
class CostPolicy:
    action: np.ndarray   # (E+1, k, Nnu, Ntheta) int8 PayAction
    value: np.ndarray    # same shape, float
    pay_grid: tuple
    dtheta: float
    nu_levels: int
    dtau_min: float
    theta_shift: np.ndarray  # (k, k) bucket shift when moving between pays
    feasible: np.ndarray | None = None  # (Nnu, Ntheta, k)
    entered: np.ndarray | None = None   # (2, E+1, k, Nnu, Ntheta) actions after Up / Down


    @property
    def n_epochs(self) -> int:
        return self.action.shape[0] - 1

    def lookup(self, s: AggregateState, via: PayAction | None = None):
        """(action, value) at ``s``; ``via`` is the pay change that just led there, if any."""
        idx = (s.tau_idx, s.pay_idx, s.nu_idx, s.theta_idx)
        if via is None or self.entered is None:
            a = self.action[idx]
        else:
            a = self.entered[(0 if via is PayAction.UP else 1,) + idx]
        return PayAction(int(a)), float(self.value[idx])

    def snap(self, nu_bar: float, theta: float, tau_idx: int, pay_idx: int) -> AggregateState:
        nt = self.action.shape[3]
        return AggregateState(int(np.clip(np.rint(nu_bar * self.nu_levels), 0, self.nu_levels)),
                              int(np.clip(np.rint(theta / self.dtheta), 0, nt - 1)),
                              tau_idx, pay_idx)

    def save(self, path):
        np.savez_compressed(path, action=self.action, value=self.value, pay_grid=np.array(self.pay_grid),
                            dtheta=self.dtheta, nu_levels=self.nu_levels, dtau_min=self.dtau_min,
                            theta_shift=self.theta_shift,
                            feasible=self.feasible if self.feasible is not None else np.zeros(0, bool),
                            entered=self.entered if self.entered is not None else np.zeros(0, np.int8),
                            version=CACHE_VERSION)

    @classmethod
    def load(cls, path) -> "CostPolicy":
        z = np.load(path)
        if int(z["version"]) != CACHE_VERSION:
            raise ValueError("policy cache version mismatch")
        feas, ent = z["feasible"], z["entered"]
        return cls(z["action"], z["value"], tuple(z["pay_grid"].tolist()), float(z["dtheta"]),
                   int(z["nu_levels"]), float(z["dtau_min"]), z["theta_shift"], feas if feas.size else None,
                   ent if ent.size else None)


def pay_change_transition(s: AggregateState, direction: PayAction, theta_shift: np.ndarray,
                          n_theta: int | None = None) -> AggregateState:
    """Move one pay level; theta moves by the start-theta difference (in buckets)."""
    k = theta_shift.shape[0]
    if direction is PayAction.UP:
        target = s.pay_idx + 1
    elif direction is PayAction.DOWN:
        target = s.pay_idx - 1
    else:
        raise InvalidAction(f"{direction} is not a pay change")
    if not 0 <= target < k:
        raise InvalidAction(f"no pay level beyond index {s.pay_idx}")
    th = s.theta_idx + int(theta_shift[s.pay_idx, target])
    hi = np.inf if n_theta is None else n_theta - 1
    return AggregateState(s.nu_idx, int(min(max(th, 0), hi)), s.tau_idx, target)


def theta_shift_buckets(theta0, dtheta: float) -> np.ndarray:
    t = np.asarray(theta0, dtype=float)
    return np.rint((t[None, :] - t[:, None]) / dtheta).astype(np.int64)


def no_change_transition(s: AggregateState, model: CompletionModel, cache: NuTransitionCache,
                         pay: float, dtheta: float, n_epochs: int):
    """Distribution over (next state, reward) for one epoch at the current pay."""
    if s.tau_idx >= n_epochs:
        raise InvalidAction("deadline reached: only terminate is allowed")
    probs = model.bucket_probs(s.pay_idx)
    out = {}
    for j, p in enumerate(probs):
        if p == 0:
            continue
        used = min(j, s.theta_idx)
        reward = -pay * used * dtheta
        row = cache.dist[s.pay_idx, s.nu_idx, min(used, cache.n_buckets)]
        for nu2 in np.flatnonzero(row):
            nxt = AggregateState(int(nu2), s.theta_idx - used, s.tau_idx + 1, s.pay_idx)
            key = (nxt, reward)
            out[key] = out.get(key, 0.0) + p * row[nu2]
    return out


def value_iteration(terminal: np.ndarray, T, bucket_probs, pay_grid, dtheta: float,
                    theta_shift: np.ndarray, n_epochs: int, eps_switch: float = 0.1):
    """Backward induction over epochs; pay changes form one-way chains inside an epoch.

    ``terminal`` is (Nnu, Ntheta); ``T[p][j]`` is the (Nnu, Nnu) nu
    transition at pay ``p`` after ``j`` buckets of ballots; ``bucket_probs[p]`` the ballots-bucket
    distribution at pay ``p``. At most ``theta`` ballots can be absorbed in
    an epoch: receiving more caps at theta (no work left to route).

    Within an epoch the batch may step through several pay levels, each step
    costing ``eps_switch``, but never back the way it came: a state entered
    by Up chooses between stopping there and moving further Up, and likewise
    for Down. Clamping theta at 0 makes Up followed by Down a net gain in
    theta, so allowing reversals would let the solver manufacture work.

    Returns ``(action, value, entered)``. ``action`` and ``value`` are
    (E+1, k, Nnu, Ntheta) for a state at the start of an epoch; ``entered``
    is (2, E+1, k, Nnu, Ntheta) with the action in a state just entered by
    Up (index 0) or by Down (index 1).
    """
    if eps_switch < 0:
        raise ValueError("eps_switch must be nonnegative")
    k = len(pay_grid)
    Nnu, Nth = terminal.shape
    value = np.empty((n_epochs + 1, k, Nnu, Nth))
    action = np.empty((n_epochs + 1, k, Nnu, Nth), dtype=np.int8)
    entered = np.empty((2, n_epochs + 1, k, Nnu, Nth), dtype=np.int8)
    value[n_epochs] = terminal[None]
    action[n_epochs] = PayAction.TERMINATE
    entered[:, n_epochs] = PayAction.TERMINATE
    ith = np.arange(Nth)
    up_idx = [np.clip(ith + theta_shift[p, p + 1], 0, Nth - 1) for p in range(k - 1)]
    dn_idx = [None] + [np.clip(ith + theta_shift[p, p - 1], 0, Nth - 1) for p in range(1, k)]
    for e in range(n_epochs - 1, -1, -1):
        base = np.empty((k, Nnu, Nth))
        base_act = np.empty((k, Nnu, Nth), dtype=np.int8)
        for p in range(k):
            probs = np.asarray(bucket_probs[p])
            c = pay_grid[p]
            Vn = value[e + 1, p]
            Tp = T[p]
            NB = len(Tp) - 1
            q = np.zeros((Nnu, Nth))
            col0 = np.zeros((Nnu, len(probs)))
            for j, pj in enumerate(probs):
                W = Tp[min(j, NB)] @ Vn
                col0[:, j] = W[:, 0]
                if pj == 0.0:
                    continue
                if j < Nth:
                    q[:, j:] += pj * (W[:, :Nth - j] - c * j * dtheta)
            # capped: theta < j means only theta buckets are used
            tail = np.concatenate([np.cumsum(probs[::-1])[::-1][1:], [0.0]])
            m = min(len(probs), Nth)
            q[:, :m] += tail[None, :m] * (col0[:, :m] - c * dtheta * ith[None, :m])
            term_better = terminal >= q - 1e-9
            base[p] = np.where(term_better, terminal, q)
            base_act[p] = np.where(term_better, PayAction.TERMINATE, PayAction.NO_CHANGE)
        # best value of moving up (down) from each level, continuing in that direction only
        up = np.full((k, Nnu, Nth), -np.inf)
        dn = np.full((k, Nnu, Nth), -np.inf)
        for p in range(k - 2, -1, -1):
            up[p] = np.maximum(base[p + 1], up[p + 1])[:, up_idx[p]] - eps_switch
        for p in range(1, k):
            dn[p] = np.maximum(base[p - 1], dn[p - 1])[:, dn_idx[p]] - eps_switch
        go_up = up > base + 1e-9
        go_dn = dn > np.maximum(base, up) + 1e-9
        value[e] = np.maximum(base, np.maximum(up, dn))
        action[e] = np.where(go_up & ~go_dn, PayAction.UP, np.where(go_dn, PayAction.DOWN, base_act))
        entered[0, e] = np.where(go_up, PayAction.UP, base_act)
        entered[1, e] = np.where(dn > base + 1e-9, PayAction.DOWN, base_act)
    return action, value, entered


# --------------------------------------------------------------------------
# planning entry point
# --------------------------------------------------------------------------

@dataclass
class Plan:
    cfg: SimConfig
    table: ThetaTable
    model: CompletionModel
    cache: NuTransitionCache
    policy: CostPolicy
    theta0: np.ndarray

    def start_state(self) -> AggregateState:
        return self.policy.snap(0.0, self.theta0[0], 0, 0)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(d / "theta_table.csv")
        np.savez_compressed(d / "nu_cache.npz", dist=self.cache.dist, mean=self.cache.mean,
                            lam=self.cache.lam, version=CACHE_VERSION)
        self.policy.save(d / "policy.npz")
        meta = {"version": CACHE_VERSION, "config": self.cfg.to_dict(), "theta0": list(map(float, self.theta0))}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory, cfg: SimConfig | None = None) -> "Plan":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        if meta.get("version") != CACHE_VERSION:
            raise ValueError("plan cache version mismatch")
        stored = SimConfig.from_dict(meta["config"])
        if cfg is not None and _plan_key(cfg) != _plan_key(stored):
            raise ValueError("plan cache was built for a different configuration")
        z = np.load(d / "nu_cache.npz")
        cache = NuTransitionCache(z["dist"], z["mean"], z["lam"])
        table = ThetaTable.from_csv(d / "theta_table.csv")
        policy = CostPolicy.load(d / "policy.npz")
        model = CompletionModel(stored.rates_per_epoch, stored.dtheta)
        return cls(stored, table, model, cache, policy, np.array(meta["theta0"]))


def _plan_key(cfg: SimConfig) -> dict:
    d = cfg.to_dict()
    d.pop("seed", None)
    return d


def build_plan(cfg: SimConfig, with_feasibility: bool = True, table: ThetaTable | None = None) -> Plan:
    qcfg = cfg.quality()
    if table is None:
        table = build_theta_table(qcfg, cfg.prior, cfg.theta_grid_G)
    model = CompletionModel(cfg.rates_per_epoch, cfg.dtheta)
    theta0 = cfg.n * table.values[0]
    n_theta = int(np.ceil(theta0.max() / cfg.dtheta)) + 1
    max_bucket = min(model.max_bucket(), n_theta)
    cache = build_nu_cache(cfg, table, max_bucket)
    L = cfg.nu_levels
    terminal = np.repeat(terminal_reward(np.arange(L + 1) / L, cfg.penalty, cfg.n)[:, None], n_theta, axis=1)
    shift = theta_shift_buckets(theta0, cfg.dtheta)
    T = [cache.matrices(p) for p in range(len(cfg.pay_grid))]
    probs = [model.bucket_probs(p) for p in range(len(cfg.pay_grid))]
    action, value, entered = value_iteration(terminal, T, probs, cfg.pay_grid, cfg.dtheta, shift,
                                             cfg.n_epochs, cfg.eps_switch)
    feas = None
    if with_feasibility:
        tg = np.arange(n_theta) * cfg.dtheta
        feas = np.zeros((L + 1, n_theta, len(cfg.pay_grid)), dtype=bool)
        for i in range(L + 1):
            for p in range(len(cfg.pay_grid)):
                feas[i, :, p] = feasible_thetas(i / L, p, table, cfg.n, tg, cfg.dtheta)
    policy = CostPolicy(action, value, cfg.pay_grid, cfg.dtheta, L, cfg.dtau_min, shift, feas, entered)
    return Plan(cfg, table, model, cache, policy, theta0)


def inspect_rows(policy: CostPolicy, feasible_only: bool = True):
    """Rows (nu_bar, theta, tau_min, pay, action, value) for CSV dumps."""
    E, k, Nnu, Nth = policy.action.shape
    for e in range(E):
        for p in range(k):
            for i in range(Nnu):
                for t in range(Nth):
                    if feasible_only and policy.feasible is not None and not policy.feasible[i, t, p]:
                        continue
                    yield (i / policy.nu_levels, t * policy.dtheta, e * policy.dtau_min, policy.pay_grid[p],
                           PayAction(int(policy.action[e, p, i, t])).name.lower(),
                           float(policy.value[e, p, i, t]))


# --------------------------------------------------------------------------
# runtime
# --------------------------------------------------------------------------

def predict_nu(cache: NuTransitionCache, pay_idx: int, nu_bar: float, n_b: float, dtheta: float) -> float:
    """Expected next nu_bar, interpolating the cache in both level and ballots."""
    L = cache.n_levels
    NB = cache.n_buckets
    if NB == 0:
        return nu_bar
    b = n_b / dtheta
    while b > NB:
        nu_bar = predict_nu(cache, pay_idx, nu_bar, NB * dtheta, dtheta)
        b -= NB
    x = min(max(nu_bar, 0.0), 1.0) * L
    i0 = min(int(x), L - 1)
    fi = x - i0
    j0 = min(int(b), NB - 1)
    fj = b - j0
    delta = cache.mean[pay_idx] - (np.arange(L + 1) / L)[:, None]
    d = ((1 - fi) * ((1 - fj) * delta[i0, j0] + fj * delta[i0, j0 + 1])
         + fi * ((1 - fj) * delta[i0 + 1, j0] + fj * delta[i0 + 1, j0 + 1]))
    return float(min(max(nu_bar + d, 0.0), 1.0))


class PriceController:
    """Runs a CostPolicy against a live batch, tracking (nu_bar, theta).

    ``offset`` aligns a deadline shorter than the planned horizon with the
    last epochs of the policy. Without synchronization the tracked state is
    advanced from the ballot counts the marketplace reports.
    """

    def __init__(self, policy: CostPolicy, theta0, cache: NuTransitionCache | None = None,
                 n_epochs: int | None = None):
        self.policy = policy
        self.theta0 = np.asarray(theta0, dtype=float)
        self.cache = cache
        E = policy.n_epochs
        n_epochs = E if n_epochs is None else n_epochs
        if not 0 < n_epochs <= E:
            raise ValueError(f"deadline of {n_epochs} epochs exceeds the planned {E}")
        self.offset = E - n_epochs
        self.n_epochs = n_epochs
        self.pay_idx = 0
        self.nu_bar = 0.0
        self.theta = float(self.theta0[0])

    def synchronize(self, nu_bar: float, theta: float, epoch: int = 0) -> AggregateState:
        """Replace the tracked state with values measured on the live batch."""
        self.nu_bar = float(nu_bar)
        self.theta = float(theta)
        return self.state(epoch)

    def state(self, epoch: int) -> AggregateState:
        return self.policy.snap(self.nu_bar, self.theta, min(epoch, self.n_epochs) + self.offset, self.pay_idx)

    def act(self, epoch: int, theta_at=None) -> PayAction:
        """Apply pay changes at an epoch boundary; return NO_CHANGE or TERMINATE.

        ``theta_at(pay_idx)`` recomputes theta at a new pay from the live
        batch; otherwise the planned start-theta shift is used. After a
        change the policy is read for a state entered that way, so the pay
        keeps moving in one direction or stops.
        """
        if epoch >= self.n_epochs:
            return PayAction.TERMINATE
        via = None
        k = len(self.theta0)
        for _ in range(k):
            a, _ = self.policy.lookup(self.state(epoch), via)
            if a in (PayAction.NO_CHANGE, PayAction.TERMINATE):
                return a
            target = self.pay_idx + (1 if a is PayAction.UP else -1)
            if not 0 <= target < k:
                raise InvalidAction(f"policy asked for {a.name} at pay index {self.pay_idx}")
            if theta_at is not None:
                self.theta = float(theta_at(target))
            else:
                self.theta = max(self.theta + self.theta0[target] - self.theta0[self.pay_idx], 0.0)
            self.pay_idx = target
            via = a
        return PayAction.NO_CHANGE

    def observe(self, n_b: int):
        """Advance the tracked state by one epoch in which ``n_b`` ballots arrived."""
        used = min(float(n_b), self.theta)
        if self.cache is not None:
            self.nu_bar = predict_nu(self.cache, self.pay_idx, self.nu_bar, used, self.policy.dtheta)
        self.theta -= used
