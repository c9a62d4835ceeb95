import numpy as np
import pytest

from crowdctl.belief import Action, QualityConfig, belief_at_confidence, decide, init_belief, update_belief
from crowdctl.frontier import (ThetaTable, batch_theta, build_theta_table, build_tree, expected_ballots,
                               nonincreasing_fit, tree_expected_depth, tree_leaves)
from crowdctl.workers import DifficultyPrior

B22 = DifficultyPrior.beta(2, 2)
SMALL = QualityConfig(max_depth=8, prob_threshold=1e-3)


@pytest.mark.parametrize("v0,pay", [(0.5, 1.0), (0.7, 1.0), (0.5, 4.0), (0.85, 2.0)])
def test_lattice_fold_equals_literal_tree(v0, pay):
    b = belief_at_confidence(B22, v0)
    root = build_tree(b, SMALL, pay)
    assert expected_ballots(b, SMALL, pay) == pytest.approx(tree_expected_depth(root), abs=1e-9)
    assert sum(n.prob for n in tree_leaves(root)) == pytest.approx(1.0, abs=1e-6)


def test_tree_structure():
    root = build_tree(init_belief(B22), SMALL, 1.0)
    stack = [root]
    while stack:
        n = stack.pop()
        if n.leaf is None:
            assert set(n.children) == {0, 1}
            assert sum(c.prob for c in n.children.values()) == pytest.approx(n.prob, abs=1e-9)
            stack.extend(n.children.values())


def test_zero_iff_stop():
    q = QualityConfig()
    certain = belief_at_confidence(B22, 0.999)
    assert decide(certain, q, 1.0) is Action.MARK_COMPLETE
    assert expected_ballots(certain, q, 1.0) == 0.0
    fresh = init_belief(B22)
    assert expected_ballots(fresh, q, 1.0) > 0


def test_depth_cap_bounds_theta():
    q = QualityConfig(max_depth=3)
    assert expected_ballots(init_belief(B22), q, 1.0) <= 3 + 1e-12


def test_batch_theta_is_sum():
    q = QualityConfig()
    bs = [init_belief(B22), update_belief(init_belief(B22), 1, 1.0), belief_at_confidence(B22, 0.99)]
    assert batch_theta(bs, q, 2.0) == pytest.approx(sum(expected_ballots(b, q, 2.0) for b in bs))


def test_theta_table_monotone_and_cached(tmp_path):
    q = QualityConfig()
    t = build_theta_table(q, B22, 20)
    assert np.all(np.diff(t.values, axis=0) <= 0)
    assert np.all(np.isfinite(t.values))
    assert t.values[-1].max() == 0.0  # nu = 1 means nothing to ask
    p = tmp_path / "t.csv"
    t.to_csv(p)
    back = ThetaTable.from_csv(p)
    assert np.array_equal(back.values, t.values)
    assert back.pay_grid == t.pay_grid


def test_theta_table_lookup_is_piecewise_constant():
    vals = np.column_stack([np.linspace(10, 0, 11)])
    t = ThetaTable(vals, (1.0,))
    assert t.lookup(0.0, 0) == 10
    assert t.lookup(0.149, 0) == 9
    assert t.lookup(0.1, 0) == 9
    assert t.lookup(1.0, 0) == 0


def test_theta_table_rejects_bad(tmp_path):
    with pytest.raises(ValueError):
        ThetaTable(np.array([[1.0, -1.0]]), (1.0, 2.0))
    with pytest.raises(ValueError):
        ThetaTable(np.ones((3, 2)), (1.0,))
    p = tmp_path / "bad.csv"
    p.write_text("nu,pay_level,theta\n")
    with pytest.raises(ValueError):
        ThetaTable.from_csv(p)
    with pytest.raises(ValueError):
        build_theta_table(QualityConfig(), B22, 5)


def test_nonincreasing_fit():
    y = np.array([5.0, 6.0, 4.0, 4.5, 1.0])
    f = nonincreasing_fit(y)
    assert np.all(np.diff(f) <= 0)
    assert f.sum() == pytest.approx(y.sum())
    assert np.array_equal(nonincreasing_fit([3.0, 2.0, 1.0]), [3.0, 2.0, 1.0])
