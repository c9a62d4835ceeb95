"""Expected ballots-to-completion under the ballot/stop policy.

``expected_ballots`` folds the binary outcome tree onto the count lattice:
a node's path probability depends only on how many 1s and 0s lead to it,
so the number of tree paths reaching each lattice node is tracked instead
of the paths themselves. ``build_tree`` expands the tree literally and is
kept as an independent check.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .belief import (Action, BeliefState, Lattice, QualityConfig, belief_at_confidence,
                     decide, update_belief)
from .workers import DifficultyPrior, _accuracy

TABLE_VERSION = 1


class Leaf(Enum):
    POLICY_STOPPED = "stopped"
    PROBABILITY_PRUNED = "pruned"
    DEPTH_CAPPED = "capped"


def frontier_on_lattice(lat: Lattice, cfg: QualityConfig, pay: float, root=(0, 0), take=None):
    """Return (expected depth, total leaf probability) from lattice node ``root``.

    ``take`` may pass precomputed ``lat.decisions`` for this pay.
    """
    D = cfg.max_depth
    r1, r0 = root
    if take is None:
        take = lat.decisions(cfg.penalty, pay, cfg.lookahead_depth)
    base = lat.mass[r1, r0]
    if base <= 0:
        return 0.0, 1.0
    paths = np.zeros((D + 2, D + 2))
    paths[0, 0] = 1.0
    theta = 0.0
    leaf_p = 0.0
    for t in range(D + 1):
        for k1 in range(t + 1):
            k0 = t - k1
            c = paths[k1, k0]
            if c == 0.0:
                continue
            m = lat.mass[r1 + k1, r0 + k0] / base
            internal = take[r1 + k1, r0 + k0] and t < D and (t == 0 or m >= cfg.prob_threshold)
            if internal:
                paths[k1 + 1, k0] += c
                paths[k1, k0 + 1] += c
            else:
                theta += c * m * t
                leaf_p += c * m
    return theta, leaf_p


def expected_ballots(b: BeliefState, cfg: QualityConfig, pay: float) -> float:
    lat = Lattice(b.weights, b.centers, cfg.mean_worker, cfg.max_depth + cfg.lookahead_depth)
    return frontier_on_lattice(lat, cfg, pay)[0]


def batch_theta(beliefs, cfg: QualityConfig, pay: float) -> float:
    return float(sum(expected_ballots(b, cfg, pay) for b in beliefs))


@dataclass
class TreeNode:
    belief: BeliefState
    prob: float
    depth: int
    children: dict = field(default_factory=dict)  # outcome -> TreeNode
    leaf: Leaf | None = None


def outcome_prob(b: BeliefState, gamma: float, outcome: int) -> float:
    """Predictive probability of the next ballot under the belief."""
    a = _accuracy(gamma, b.centers)
    w0, w1 = b.weights[:, 0], b.weights[:, 1]
    p1 = float(np.sum(w1 * a + w0 * (1.0 - a)))
    return p1 if outcome == 1 else 1.0 - p1


def build_tree(b: BeliefState, cfg: QualityConfig, pay: float) -> TreeNode:
    """Literal trajectory tree; exponential in max_depth, use for checks only."""
    root = TreeNode(b, 1.0, 0)
    stack = [root]
    while stack:
        node = stack.pop()
        if decide(node.belief, cfg, pay) is Action.MARK_COMPLETE:
            node.leaf = Leaf.POLICY_STOPPED
        elif node.depth >= cfg.max_depth:
            node.leaf = Leaf.DEPTH_CAPPED
        elif node.depth > 0 and node.prob < cfg.prob_threshold:
            node.leaf = Leaf.PROBABILITY_PRUNED
        if node.leaf is not None:
            continue
        for o in (0, 1):
            p = outcome_prob(node.belief, cfg.mean_worker, o)
            if p <= 0.0:
                continue
            child = TreeNode(update_belief(node.belief, o, cfg.mean_worker), node.prob * p, node.depth + 1)
            node.children[o] = child
            stack.append(child)
    return root


def tree_leaves(root: TreeNode):
    out, stack = [], [root]
    while stack:
        n = stack.pop()
        if n.leaf is not None:
            out.append(n)
        stack.extend(n.children.values())
    return out


def tree_expected_depth(root: TreeNode) -> float:
    return sum(n.prob * n.depth for n in tree_leaves(root))


class ThetaTable:
    """theta~(nu, c): expected ballots for one task at quality nu and pay c.

    Lookup is piecewise constant: nu in [i/G, (i+1)/G) maps to grid point i.
    """

    def __init__(self, values: np.ndarray, pay_grid):
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(pay_grid):
            raise ValueError("theta table must be (G+1, n_pays)")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("theta table entries must be finite and nonnegative")
        self.values = values
        self.values.setflags(write=False)
        self.pay_grid = tuple(float(c) for c in pay_grid)

    @property
    def G(self) -> int:
        return self.values.shape[0] - 1

    @property
    def nu_grid(self) -> np.ndarray:
        return np.arange(self.G + 1) / self.G

    def column(self, pay_idx: int) -> np.ndarray:
        return self.values[:, pay_idx]

    def lookup(self, nu, pay_idx: int):
        i = np.clip(np.floor(np.asarray(nu, dtype=float) * self.G + 1e-9).astype(int), 0, self.G)
        return self.values[i, pay_idx]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# crowdctl theta table v{TABLE_VERSION} G={self.G}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["nu", "pay_level", "theta"])
        for i, nu in enumerate(self.nu_grid):
            for j, c in enumerate(self.pay_grid):
                w.writerow([repr(float(nu)), repr(c), repr(float(self.values[i, j]))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, path) -> "ThetaTable":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# crowdctl theta table v"):
            raise ValueError("not a theta table cache file")
        version = int(lines[0].split(" v")[1].split()[0])
        if version != TABLE_VERSION:
            raise ValueError(f"theta table version {version} unsupported")
        rows = list(csv.DictReader(lines[1:]))
        nus = sorted({float(r["nu"]) for r in rows})
        pays = sorted({float(r["pay_level"]) for r in rows})
        vals = np.zeros((len(nus), len(pays)))
        ni = {v: i for i, v in enumerate(nus)}
        pi = {v: i for i, v in enumerate(pays)}
        for r in rows:
            vals[ni[float(r["nu"])], pi[float(r["pay_level"])]] = float(r["theta"])
        return cls(vals, pays)


def nonincreasing_fit(y) -> np.ndarray:
    """Least-squares nonincreasing fit (pool adjacent violators)."""
    blocks = []  # [mean, weight, length]
    for v in np.asarray(y, dtype=float):
        blocks.append([v, 1.0, 1])
        while len(blocks) > 1 and blocks[-2][0] < blocks[-1][0]:
            m2, w2, n2 = blocks.pop()
            m1, w1, n1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, n1 + n2])
    return np.concatenate([np.full(n, m) for m, _, n in blocks])


def raw_theta_grid(cfg: QualityConfig, prior: DifficultyPrior, G: int) -> np.ndarray:
    vals = np.zeros((G + 1, len(cfg.pay_grid)))
    for i in range(G + 1):
        nu = i / G
        b = belief_at_confidence(prior, 0.5 * (nu + 1.0))
        lat = Lattice(b.weights, b.centers, cfg.mean_worker, cfg.max_depth + cfg.lookahead_depth)
        for j, c in enumerate(cfg.pay_grid):
            vals[i, j] = frontier_on_lattice(lat, cfg, c)[0]
    return vals


def build_theta_table(cfg: QualityConfig, prior: DifficultyPrior, G: int = 40) -> ThetaTable:
    """Tabulate theta~ on a G-point nu grid for every pay level.

    The depth-limited policy switches actions at discrete belief
    boundaries, so raw frontier values wobble slightly in nu; each column
    is projected onto the nearest nonincreasing sequence. The unprojected
    grid is kept as ``table.raw``.
    """
    if G < 10:
        raise ValueError("theta table resolution must be >= 10")
    raw = raw_theta_grid(cfg, prior, G)
    vals = np.column_stack([nonincreasing_fit(raw[:, j]) for j in range(raw.shape[1])])
    table = ThetaTable(vals, cfg.pay_grid)
    table.raw = raw
    return table
