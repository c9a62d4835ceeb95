"""Per-task belief tracking and the ballot/stop policy.

A belief is a (difficulty bin x answer) weight matrix. Lookahead always
assumes the average worker, so every belief reachable from a root by
hypothetical ballots is determined by the count of 1-ballots and 0-ballots
received since the root. That count lattice is what ``Lattice`` evaluates;
the depth-limited expectimax over it is exact, not an approximation of the
search tree.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .workers import DifficultyPrior, _accuracy, _check_gamma

NORM_TOL = 1e-9
# value(ballot) must beat value(stop) by this much to ask for another ballot
DECISION_EPS = 1e-9


class Action(Enum):
    TAKE_BALLOT = "ballot"
    MARK_COMPLETE = "complete"


class DegenerateBelief(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class BeliefState:
    weights: np.ndarray  # (D, 2); column t is "true answer = t"
    centers: np.ndarray  # difficulty bin centers
    ballots_taken: int = 0
    cost_spent: float = 0.0

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2 or w.shape[1] != 2 or w.shape[0] != len(self.centers):
            raise ValueError("belief weights must be (D, 2) matching the difficulty bins")
        if np.any(w < 0) or abs(w.sum() - 1.0) > NORM_TOL:
            raise ValueError("belief weights must be nonnegative and sum to 1")
        w.setflags(write=False)

    @property
    def answer_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    @property
    def difficulty_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @property
    def v(self) -> float:
        return float(self.answer_marginal.max())

    @property
    def map_answer(self) -> int:
        v0, v1 = self.answer_marginal
        return 1 if v1 >= v0 else 0


@dataclass(frozen=True)
class QualityConfig:
    penalty: float = 200.0
    pay_grid: tuple = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    mean_worker: float = 1.0
    lookahead_depth: int = 6
    prob_threshold: float = 1e-7
    max_depth: int = 24

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")
        pg = tuple(float(c) for c in self.pay_grid)
        if not pg or any(b <= a for a, b in zip(pg, pg[1:])):
            raise ValueError("pay grid must be strictly increasing")
        object.__setattr__(self, "pay_grid", pg)
        _check_gamma(self.mean_worker)
        if self.lookahead_depth < 1 or self.max_depth < 1:
            raise ValueError("lookahead and max depth must be >= 1")
        if not 0 < self.prob_threshold < 1:
            raise ValueError("prob_threshold must be in (0, 1)")


def init_belief(prior: DifficultyPrior) -> BeliefState:
    w = np.outer(prior.masses, [0.5, 0.5])
    return BeliefState(w / w.sum(), prior.centers)


def belief_at_confidence(prior: DifficultyPrior, v: float, answer: int = 1) -> BeliefState:
    """Belief whose answer marginal puts ``v`` on ``answer`` and whose
    difficulty marginal equals the prior."""
    if not 0.0 <= v <= 1.0:
        raise ValueError("confidence must be in [0, 1]")
    col = np.array([1.0 - v, v]) if answer == 1 else np.array([v, 1.0 - v])
    return BeliefState(np.outer(prior.masses, col), prior.centers)


def update_belief(b: BeliefState, ballot: int, gamma: float, pay: float = 0.0) -> BeliefState:
    if ballot not in (0, 1):
        raise ValueError("ballot must be 0 or 1")
    _check_gamma(gamma)
    a = _accuracy(gamma, b.centers)
    lik = np.empty_like(b.weights)
    lik[:, ballot] = a
    lik[:, 1 - ballot] = 1.0 - a
    w = b.weights * lik
    z = w.sum()
    if not z > 0:
        raise DegenerateBelief("ballot has zero likelihood under the current belief")
    return BeliefState(w / z, b.centers, b.ballots_taken + 1, b.cost_spent + pay)


def task_quality(b: BeliefState) -> float:
    return 2.0 * b.v - 1.0


def expected_task_utility(b: BeliefState, penalty: float) -> float:
    return -penalty * (1.0 - b.v)


class Lattice:
    """Beliefs reachable from ``root`` by up to ``depth`` average-worker ballots.

    ``mass[k1, k0]`` is the probability of one particular ordering of
    ``k1`` ones and ``k0`` zeros; ``v[k1, k0]`` the posterior confidence
    there. Entries with ``k1 + k0 > depth`` are unused.
    """

    def __init__(self, weights: np.ndarray, centers: np.ndarray, gamma: float, depth: int):
        a = _accuracy(gamma, centers)
        K = depth + 1
        k = np.arange(K)
        pa = a[None, :] ** k[:, None]  # (K, D)
        pb = (1.0 - a)[None, :] ** k[:, None]
        w0, w1 = weights[:, 0], weights[:, 1]
        # m1[k1,k0] = sum_d w1 a^k1 (1-a)^k0 ; m0[k1,k0] = sum_d w0 a^k0 (1-a)^k1
        m1 = np.einsum("d,id,jd->ij", w1, pa, pb)
        m0 = np.einsum("d,id,jd->ij", w0, pb, pa)
        self.depth = depth
        self.mass = m1 + m0
        with np.errstate(invalid="ignore", divide="ignore"):
            v1 = np.where(self.mass > 0, m1 / self.mass, 0.5)
        self.v = np.maximum(v1, 1.0 - v1)
        with np.errstate(invalid="ignore", divide="ignore"):
            p1 = np.zeros_like(self.mass)
            p1[:-1, :] = np.where(self.mass[:-1, :] > 0, self.mass[1:, :] / self.mass[:-1, :], 0.5)
        self.p_one = p1

    def values(self, penalty: float, pay: float, horizon: int) -> np.ndarray:
        """Expectimax value of each lattice node with ``horizon`` steps left.

        Valid on nodes with ``k1 + k0 <= depth - horizon``.
        """
        stop = -penalty * (1.0 - self.v)
        val = stop.copy()
        for _ in range(horizon):
            cont = np.full_like(val, -np.inf)
            cont[:-1, :-1] = -pay + self.p_one[:-1, :-1] * val[1:, :-1] \
                + (1.0 - self.p_one[:-1, :-1]) * val[:-1, 1:]
            val = np.maximum(stop, cont)
        return val

    def decisions(self, penalty: float, pay: float, horizon: int) -> np.ndarray:
        """True where the policy takes another ballot (valid as ``values``)."""
        stop = -penalty * (1.0 - self.v)
        val = stop.copy()
        cont = np.full_like(val, -np.inf)
        for _ in range(horizon):
            cont = np.full_like(val, -np.inf)
            cont[:-1, :-1] = -pay + self.p_one[:-1, :-1] * val[1:, :-1] \
                + (1.0 - self.p_one[:-1, :-1]) * val[:-1, 1:]
            val = np.maximum(stop, cont)
        return cont > stop + DECISION_EPS


def lattice_for(b: BeliefState, cfg: QualityConfig, depth: int) -> Lattice:
    return Lattice(b.weights, b.centers, cfg.mean_worker, depth)


def decide(b: BeliefState, cfg: QualityConfig, pay: float) -> Action:
    """Depth-limited expectimax over future average-worker ballots."""
    L = cfg.lookahead_depth
    lat = lattice_for(b, cfg, L)
    take = lat.decisions(cfg.penalty, pay, L)[0, 0]
    return Action.TAKE_BALLOT if take else Action.MARK_COMPLETE


def expectimax_value(b: BeliefState, cfg: QualityConfig, pay: float, depth: int | None = None) -> float:
    L = cfg.lookahead_depth if depth is None else depth
    lat = lattice_for(b, cfg, L)
    return float(lat.values(cfg.penalty, pay, L)[0, 0])
