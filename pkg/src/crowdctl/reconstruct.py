"""Batch quality histograms from the aggregate pair (mean quality, ballots left).

The histogram of per-task quality is modelled as Beta(lam * nu_bar,
lam * (1 - nu_bar)); the mean pins one parameter and the expected number
of remaining ballots pins the concentration ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .frontier import ThetaTable

LAMBDA_GRID = np.round(np.arange(1, 2001) * 0.1, 10)


@dataclass(frozen=True)
class BetaFit:
    lam: float
    nu_bar: float
    residual: float = 0.0
    feasible: bool = True

    @property
    def lambda1(self) -> float:
        return self.lam * self.nu_bar

    @property
    def lambda2(self) -> float:
        return self.lam * (1.0 - self.nu_bar)


@dataclass(frozen=True)
class BatchHistogram:
    edges: np.ndarray
    counts: np.ndarray
    means: np.ndarray | None = None  # mean quality inside each bin; centers if unknown

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def mean(self) -> float:
        m = self.centers if self.means is None else self.means
        return float(np.dot(self.counts, m) / max(self.n, 1))

    @classmethod
    def from_samples(cls, qualities, bins: int = 100) -> "BatchHistogram":
        q = np.clip(np.asarray(qualities, dtype=float), 0.0, 1.0)
        edges = np.linspace(0.0, 1.0, bins + 1)
        idx = np.minimum((q * bins).astype(int), bins - 1)
        counts = np.bincount(idx, minlength=bins)
        sums = np.bincount(idx, weights=q, minlength=bins)
        centers = 0.5 * (edges[:-1] + edges[1:])
        means = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        return cls(edges, counts, means)


def clamp_nu_bar(nu_bar: float, n: int) -> float:
    eps = 1.0 / (2 * max(n, 1))
    return float(min(max(nu_bar, eps), 1.0 - eps))


@lru_cache(maxsize=4096)
def _cell_masses(nu_bar: float, G: int, lam_key: tuple) -> np.ndarray:
    """Beta probability of each theta-grid cell, shape (len(lams), G)."""
    lams = np.asarray(lam_key)
    edges = np.arange(G + 1) / G
    cdf = special.betainc((lams * nu_bar)[:, None], (lams * (1.0 - nu_bar))[:, None], edges[None, :])
    cdf[:, 0], cdf[:, -1] = 0.0, 1.0
    out = np.diff(cdf, axis=1)
    out.setflags(write=False)
    return out


def expected_theta_curve(lams, nu_bar: float, pay_idx: int, table: ThetaTable, n: int) -> np.ndarray:
    """theta-hat over an array of concentrations (piecewise-constant theta~)."""
    col = table.column(pay_idx)
    if nu_bar <= 0.0 or nu_bar >= 1.0:
        # point mass
        return np.full(len(lams), n * float(table.lookup(nu_bar, pay_idx)))
    m = _cell_masses(float(nu_bar), table.G, tuple(float(x) for x in np.atleast_1d(lams)))
    return n * (m @ col[:-1])


def expected_theta(lam: float, nu_bar: float, pay_idx: int, table: ThetaTable, n: int) -> float:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return float(expected_theta_curve([lam], nu_bar, pay_idx, table, n)[0])


def fit_lambda(nu_bar: float, theta: float, pay_idx: int, table: ThetaTable, n: int,
               dtheta: float = 10.0, lams=LAMBDA_GRID) -> BetaFit:
    """Linear search for the concentration whose expected ballots match ``theta``."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    nb = clamp_nu_bar(nu_bar, n)
    curve = expected_theta_curve(lams, nb, pay_idx, table, n)
    err = np.abs(curve - theta)
    # smallest lambda among minima equal up to float noise
    i = int(np.flatnonzero(err <= err.min() + 1e-12 * max(1.0, theta))[0])
    res = float(err[i])
    return BetaFit(float(lams[i]), nb, res, res <= 0.5 * dtheta)


def largest_remainder(weights, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if n == 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    quota = n * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    short = n - int(base.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(w)), -(quota - base)))
        base[order[:short]] += 1
    return base


def reconstruct_histogram(fit: BetaFit, n: int, bins: int = 100) -> BatchHistogram:
    edges = np.linspace(0.0, 1.0, bins + 1)
    cdf = special.betainc(fit.lambda1, fit.lambda2, edges)
    cdf[0], cdf[-1] = 0.0, 1.0
    mass = np.diff(cdf)
    # E[x; bin] = nu_bar * (mass of the bin under Beta(lambda1 + 1, lambda2))
    cdf1 = special.betainc(fit.lambda1 + 1.0, fit.lambda2, edges)
    cdf1[0], cdf1[-1] = 0.0, 1.0
    centers = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(mass > 1e-300, fit.nu_bar * np.diff(cdf1) / mass, centers)
    means = np.clip(means, edges[:-1], edges[1:])
    return BatchHistogram(edges, largest_remainder(mass, n), means)


def _theta_integral(x, col: np.ndarray, G: int) -> np.ndarray:
    """Integral of the piecewise-constant theta~ column from 0 to ``x``."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    cum = np.concatenate([[0.0], np.cumsum(col[:-1]) / G])
    k = np.minimum(np.floor(x * G).astype(int), G - 1)
    return cum[k] + (x - k / G) * col[k]


def histogram_aggregates(hist: BatchHistogram, table: ThetaTable, pay_idx: int):
    """(nu_bar, theta) of a histogram with tasks spread uniformly inside each bin.

    Integrating theta~ over each bin keeps the aggregates on the same footing
    as ``expected_theta``, so a reconstructed histogram re-fits to its own
    concentration.
    """
    e = hist.edges
    F = _theta_integral(e, table.column(pay_idx), table.G)
    per_task = np.diff(F) / np.diff(e)
    return hist.mean(), float(np.dot(hist.counts, per_task))


def feasible_thetas(nu_bar: float, pay_idx: int, table: ThetaTable, n: int, theta_grid,
                    dtheta: float = 10.0, lams=LAMBDA_GRID) -> np.ndarray:
    """Boolean mask over ``theta_grid``: is the pair reachable by some Beta fit?"""
    curve = np.sort(expected_theta_curve(lams, clamp_nu_bar(nu_bar, n), pay_idx, table, n))
    tg = np.asarray(theta_grid, dtype=float)
    pos = np.clip(np.searchsorted(curve, tg), 1, len(curve) - 1)
    nearest = np.minimum(np.abs(curve[pos] - tg), np.abs(curve[pos - 1] - tg))
    return nearest <= 0.5 * dtheta
