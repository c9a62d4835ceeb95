"""Per-state tables for batches updated with the average worker.

When every ballot is folded in with the average worker's error, a task's
belief is fixed by its starting belief and the number of 1- and 0-ballots
it has received. ``StateTables`` evaluates confidence, routing priority,
ballot/stop decisions and expected ballots on that count lattice once, so
simulations and rollouts only move integer counts around.
"""
from __future__ import annotations

import numpy as np

from .belief import BeliefState, Lattice, QualityConfig, belief_at_confidence
from .frontier import frontier_on_lattice
from .workers import DifficultyPrior

BALLOT_CAP = 40  # per-task ballots the tables cover; tasks at the cap go dark


class StateTables:
    def __init__(self, prior: DifficultyPrior, cfg: QualityConfig, v0: float = 0.5,
                 cap: int = BALLOT_CAP, with_theta: bool = True):
        self.prior = prior
        self.cfg = cfg
        self.cap = cap
        self.K = cap + 1
        root = belief_at_confidence(prior, v0)
        self.root = root
        depth = cap + cfg.lookahead_depth + (cfg.max_depth if with_theta else 0)
        self.lat = Lattice(root.weights, root.centers, cfg.mean_worker, depth)
        K = self.K
        lat = self.lat
        P = cfg.penalty
        self.v = lat.v[:K, :K].copy()
        self.nu = 2.0 * self.v - 1.0
        self.p_one = lat.p_one[:K, :K].copy()
        u = -P * (1.0 - lat.v)
        self.phi = (lat.p_one[:K, :K] * u[1:K + 1, :K] + (1.0 - lat.p_one[:K, :K]) * u[:K, 1:K + 1]
                    - u[:K, :K])
        self._take = [lat.decisions(P, c, cfg.lookahead_depth) for c in cfg.pay_grid]
        tot = np.add.outer(np.arange(K), np.arange(K))
        self.light = np.stack([t[:K, :K] & (tot < cap) for t in self._take])
        self._theta = {}
        self._grids = {}

    def light_at_pay(self, pay_idx: int) -> np.ndarray:
        return self.light[pay_idx]

    def theta(self, k1: int, k0: int, pay_idx: int) -> float:
        key = (k1, k0, pay_idx)
        th = self._theta.get(key)
        if th is None:
            if not self.light[pay_idx, k1, k0]:
                th = 0.0
            else:
                th = frontier_on_lattice(self.lat, self.cfg, self.cfg.pay_grid[pay_idx],
                                         root=(k1, k0), take=self._take[pay_idx])[0]
            self._theta[key] = th
        return th

    def theta_grid(self, pay_idx: int) -> np.ndarray:
        """Expected remaining ballots for every count state at one pay."""
        g = self._grids.get(pay_idx)
        if g is None:
            g = np.zeros((self.K, self.K))
            for k1, k0 in zip(*np.nonzero(self.light[pay_idx])):
                g[k1, k0] = self.theta(int(k1), int(k0), pay_idx)
            self._grids[pay_idx] = g
        return g

    def label(self, k1, k0):
        """MAP answer; with a symmetric start the more frequent label wins, ties go to 1."""
        return (np.asarray(k1) >= np.asarray(k0)).astype(np.int64)

    def belief(self, k1: int, k0: int) -> BeliefState:
        a = 0.5 * (1.0 + (1.0 - self.root.centers) ** self.cfg.mean_worker)
        w = self.root.weights.copy()
        w[:, 1] *= a ** k1 * (1.0 - a) ** k0
        w[:, 0] *= a ** k0 * (1.0 - a) ** k1
        return BeliefState(w / w.sum(), self.root.centers, k1 + k0)
