"""Worker response model, difficulty priors and EM aggregation.

A worker with error parameter ``gamma`` answers a task of difficulty ``d``
correctly with probability ``0.5 * (1 + (1 - d) ** gamma)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

logger = logging.getLogger(__name__)

ACC_CLIP = 1e-9


def _check_gamma(gamma):
    g = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(g)) or np.any(g < 0):
        raise ValueError(f"worker error must be finite and >= 0, got {gamma!r}")


def _check_difficulty(d):
    dd = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(dd)) or np.any(dd < 0) or np.any(dd > 1):
        raise ValueError(f"difficulty must lie in [0, 1], got {d!r}")


def accuracy(gamma, d):
    """Probability that a worker's ballot equals the true answer.

    Works elementwise on arrays. The result lies in [0.5, 1].
    """
    _check_gamma(gamma)
    _check_difficulty(d)
    return _accuracy(gamma, d)


def _accuracy(gamma, d):
    # 0 ** 0 == 1 in numpy, which is the error-free convention we want
    return 0.5 * (1.0 + np.power(1.0 - np.asarray(d, dtype=float), gamma))


def sample_ballot(rng: np.random.Generator, gamma: float, d: float, true_answer: int) -> int:
    if true_answer not in (0, 1):
        raise ValueError(f"true_answer must be 0 or 1, got {true_answer!r}")
    a = float(accuracy(gamma, d))
    return true_answer if rng.random() < a else 1 - true_answer


@dataclass(frozen=True)
class DifficultyPrior:
    """Discretized prior over task difficulty.

    Mass for each of ``resolution`` equal-width bins is the exact CDF mass
    of the bin, placed at the bin center.
    """

    kind: str = "uniform"
    a: float = 1.0
    b: float = 1.0
    resolution: int = 40

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.resolution < 2:
            raise ValueError("difficulty resolution must be >= 2")
        if self.kind == "beta" and (self.a <= 0 or self.b <= 0):
            raise ValueError("beta prior parameters must be positive")

    @classmethod
    def beta(cls, a: float, b: float, resolution: int = 40) -> "DifficultyPrior":
        return cls("beta", float(a), float(b), resolution)

    @property
    def centers(self) -> np.ndarray:
        D = self.resolution
        return (np.arange(D) + 0.5) / D

    @property
    def masses(self) -> np.ndarray:
        D = self.resolution
        if self.kind == "uniform":
            return np.full(D, 1.0 / D)
        edges = np.linspace(0.0, 1.0, D + 1)
        m = np.diff(special.betainc(self.a, self.b, edges))
        return m / m.sum()

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5
        return self.a / (self.a + self.b)

    def log_density(self, d):
        if self.kind == "uniform":
            return np.zeros_like(np.asarray(d, dtype=float))
        return stats.beta.logpdf(d, self.a, self.b)


@dataclass(frozen=True)
class WorkerPool:
    """Gamma-distributed worker error parameters."""

    shape: float = 2.0
    scale: float = 0.5

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError("worker pool shape and scale must be positive")

    @property
    def mean_error(self) -> float:
        return self.shape * self.scale

    def draw(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, self.scale, size=size)


# --------------------------------------------------------------------------
# EM aggregation
# --------------------------------------------------------------------------

GAMMA_MAX = 20.0
D_MAX = 1.0 - 1e-6


@dataclass
class EMResult:
    gamma: dict
    difficulty: dict
    posterior: dict  # task_id -> P(true answer = 1)
    converged: bool
    iterations: int
    log_likelihood: list = field(default_factory=list)


def _ballot_loglik(gam, dif, labels, post1):
    """Expected complete-data log-likelihood per ballot and the accuracy."""
    a = np.clip(_accuracy(gam, dif), 0.5, 1.0 - ACC_CLIP)
    # probability that the ballot was correct under the current posterior
    pc = np.where(labels == 1, post1, 1.0 - post1)
    return pc * np.log(a) + (1.0 - pc) * np.log1p(-a), a, pc


def em_estimate(trace, prior: DifficultyPrior, init_gamma: float = 1.0,
                estimate_workers: bool = True, tol: float = 1e-6,
                max_iter: int = 500) -> EMResult:
    """Jointly estimate worker errors, task difficulties and true answers.

    E-step: posterior over each task's binary answer with a symmetric 0.5
    prior. M-step: projected gradient ascent with step halving on the
    expected complete-data log-likelihood plus the log difficulty prior,
    with gamma in [0, GAMMA_MAX] and d in [0, 1). With
    ``estimate_workers=False`` every worker keeps ``init_gamma`` and only
    task parameters move.
    """
    events = list(trace)
    if not events:
        raise ValueError("cannot run EM on an empty trace")
    _check_gamma(init_gamma)

    task_ids = sorted({e.task_id for e in events})
    worker_ids = sorted({e.worker_id for e in events})
    tix = {t: i for i, t in enumerate(task_ids)}
    wix = {w: i for i, w in enumerate(worker_ids)}
    bt = np.array([tix[e.task_id] for e in events])
    bw = np.array([wix[e.worker_id] for e in events])
    lab = np.array([e.label for e in events])
    nt, nw = len(task_ids), len(worker_ids)

    gam = np.full(nw, float(init_gamma))
    dif = np.full(nt, min(prior.mean, D_MAX))

    def marginal(gam, dif):
        a = np.clip(_accuracy(gam[bw], dif[bt]), 0.5, 1.0 - ACC_CLIP)
        la, lna = np.log(a), np.log1p(-a)
        # log-likelihood of the ballots under t=1 and t=0
        l1 = np.bincount(bt, np.where(lab == 1, la, lna), minlength=nt)
        l0 = np.bincount(bt, np.where(lab == 0, la, lna), minlength=nt)
        m = np.logaddexp(l1, l0) + math.log(0.5)
        ll = float(m.sum() + prior.log_density(dif).sum())
        post1 = special.expit(l1 - l0)
        return ll, post1

    def q_value(gam, dif, post1):
        lb, _, _ = _ballot_loglik(gam[bw], dif[bt], lab, post1[bt])
        return float(lb.sum() + prior.log_density(dif).sum())

    def q_grad(gam, dif, post1):
        g, d = gam[bw], dif[bt]
        a = np.clip(_accuracy(g, d), 0.5, 1.0 - ACC_CLIP)
        pc = np.where(lab == 1, post1[bt], 1.0 - post1[bt])
        dq_da = pc / a - (1.0 - pc) / (1.0 - a)
        base = np.maximum(1.0 - d, 1e-300)
        pw = np.power(base, g)
        da_dg = 0.5 * pw * np.log(base)
        with np.errstate(divide="ignore", invalid="ignore"):
            da_dd = np.where(g > 0, -0.5 * g * np.power(base, g - 1.0), 0.0)
        gg = np.bincount(bw, dq_da * da_dg, minlength=nw)
        gd = np.bincount(bt, dq_da * da_dd, minlength=nt)
        if prior.kind == "beta":
            dd = np.clip(dif, 1e-9, D_MAX)
            gd += (prior.a - 1.0) / dd - (prior.b - 1.0) / (1.0 - dd)
        return gg, gd

    ll, post1 = marginal(gam, dif)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q0 = q_value(gam, dif, post1)
        gg, gd = q_grad(gam, dif, post1)
        if not estimate_workers:
            gg = np.zeros_like(gg)
        step = 1.0
        new_gam, new_dif = gam, dif
        while step > 1e-10:
            cg = np.clip(gam + step * gg, 0.0, GAMMA_MAX)
            cd = np.clip(dif + step * gd, 0.0, D_MAX)
            if q_value(cg, cd, post1) >= q0:
                new_gam, new_dif = cg, cd
                break
            step *= 0.5
        gam, dif = new_gam, new_dif
        new_ll, post1 = marginal(gam, dif)
        history.append(new_ll)
        if new_ll - ll < tol:
            converged = True
            ll = new_ll
            break
        ll = new_ll
    if not converged:
        logger.warning("EM did not converge in %d iterations", max_iter)

    return EMResult(
        gamma={w: float(gam[i]) for w, i in wix.items()},
        difficulty={t: float(dif[i]) for t, i in tix.items()},
        posterior={t: float(post1[i]) for t, i in tix.items()},
        converged=converged,
        iterations=it,
        log_likelihood=history,
    )


def majority_vote(trace) -> dict:
    """Per-task majority label; ties go to 1."""
    ones, total = {}, {}
    for e in trace:
        ones[e.task_id] = ones.get(e.task_id, 0) + e.label
        total[e.task_id] = total.get(e.task_id, 0) + 1
    return {t: int(2 * ones[t] >= total[t]) for t in total}
