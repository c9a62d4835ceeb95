import functools

import numpy as np
import pytest
from scipy import stats

from crowdctl.batch import StateTables
from crowdctl.belief import QualityConfig, task_quality
from crowdctl.costsetter import (AggregateState, CompletionModel, CostPolicy, InvalidAction, NuTransitionCache,
                                 PayAction, Plan, PriceController, estimate_nu_transition, inspect_rows,
                                 monotone_runs, no_change_transition, pay_change_transition, predict_nu,
                                 rollout_tables, terminal_reward, theta_shift_buckets, value_iteration)
from crowdctl.frontier import build_theta_table, expected_ballots
from crowdctl.selector import Routing
from crowdctl.sim import _Batch
from crowdctl.workers import DifficultyPrior


# --------------------------------------------------------------------------
# terminal reward and completion model
# --------------------------------------------------------------------------

def test_terminal_reward_examples():
    assert terminal_reward(1.0, 200, 500) == 0.0
    assert terminal_reward(0.0, 200, 500) == -50000.0
    assert terminal_reward(0.5, 200, 1) == -50.0


def test_poisson_truncation_keeps_mass():
    m = CompletionModel([50.0], dtheta=10.0)
    p = m.pmf(0)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert stats.poisson.cdf(len(p) - 1, 50.0) >= 0.999
    assert m.bucket_probs(0).sum() == pytest.approx(1.0, abs=1e-9)
    # buckets round n_b to the nearest multiple of dtheta
    b = m.bucket_probs(0)
    assert b[5] == pytest.approx(stats.poisson.cdf(54, 50) - stats.poisson.cdf(44, 50), rel=1e-3)


def test_completion_model_rejects_negative_rate():
    with pytest.raises(ValueError):
        CompletionModel([1.0, -2.0])


# --------------------------------------------------------------------------
# single-step transitions
# --------------------------------------------------------------------------

def test_pay_change_examples():
    same = theta_shift_buckets([500, 500], 10)
    s = AggregateState(3, 12, 2, 0)
    assert pay_change_transition(s, PayAction.UP, same).theta_idx == 12
    shift = theta_shift_buckets([1000, 800], 10)
    up = pay_change_transition(AggregateState(3, 60, 2, 0), PayAction.UP, shift)
    assert up == AggregateState(3, 40, 2, 1)
    assert pay_change_transition(up, PayAction.DOWN, shift) == AggregateState(3, 60, 2, 0)
    assert pay_change_transition(AggregateState(0, 10, 0, 0), PayAction.UP, shift).theta_idx == 0  # clamped


def test_pay_change_edges_invalid():
    shift = theta_shift_buckets([1000, 800], 10)
    with pytest.raises(InvalidAction):
        pay_change_transition(AggregateState(0, 5, 0, 0), PayAction.DOWN, shift)
    with pytest.raises(InvalidAction):
        pay_change_transition(AggregateState(0, 5, 0, 1), PayAction.UP, shift)
    with pytest.raises(InvalidAction):
        pay_change_transition(AggregateState(0, 5, 0, 0), PayAction.NO_CHANGE, shift)


def identity_cache(levels=4, buckets=3, k=1):
    L = levels
    dist = np.zeros((k, L + 1, buckets + 1, L + 1))
    dist[..., np.arange(L + 1), :, np.arange(L + 1)] = 1.0
    mean = np.broadcast_to((np.arange(L + 1) / L)[None, :, None], (k, L + 1, buckets + 1)).copy()
    return NuTransitionCache(dist, mean, np.zeros((k, L + 1)))


def test_no_change_with_zero_rate_is_identity():
    s = AggregateState(2, 3, 0, 0)
    out = no_change_transition(s, CompletionModel([0.0]), identity_cache(), 1.0, 10.0, 4)
    assert out == {(AggregateState(2, 3, 1, 0), 0.0): 1.0}


def test_no_change_clamps_theta():
    model = CompletionModel([100.0], 10.0)
    out = no_change_transition(AggregateState(2, 1, 0, 0), model, identity_cache(), 2.0, 10.0, 4)
    assert sum(out.values()) == pytest.approx(1.0)
    p0 = model.bucket_probs(0)[0]
    assert sum(v for (s, _), v in out.items() if s.theta_idx == 0) == pytest.approx(1 - p0)
    assert all(r in (0.0, -20.0) for _, r in out)


def test_no_change_at_deadline_invalid():
    with pytest.raises(InvalidAction):
        no_change_transition(AggregateState(0, 1, 4, 0), CompletionModel([1.0]), identity_cache(), 1.0, 10.0, 4)


# --------------------------------------------------------------------------
# nu_bar transitions
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def uniform_setup():
    q = QualityConfig(mean_worker=1.0)
    prior = DifficultyPrior()
    return q, build_theta_table(q, prior, 40), rollout_tables(prior, q, 100, 0)


def test_fresh_batch_one_ballot_each(uniform_setup):
    # one ballot from gamma = 1 on a uniform prior gives v = 0.75, i.e. quality 0.5
    _, table, tabs = uniform_setup
    n = 100
    mean, per, _ = estimate_nu_transition(0.0, n * table.values[0, 0], [0, n], 0, table, n, tabs, 32,
                                          np.random.default_rng(0))
    assert mean[0] == 0.0
    assert mean[1] == pytest.approx(0.5, abs=0.03)


def test_nu_transition_fixed_points(uniform_setup):
    _, table, tabs = uniform_setup
    rng = np.random.default_rng(1)
    mean, _, _ = estimate_nu_transition(1.0, 0.0, [0, 30, 300], 0, table, 50, tabs, 4, rng)
    assert np.all(mean == 1.0)
    mean, _, _ = estimate_nu_transition(0.4, 50 * table.lookup(0.4, 0), [0], 0, table, 50, tabs, 4, rng)
    assert mean[0] == 0.4


def test_nu_transition_infeasible(uniform_setup):
    _, table, tabs = uniform_setup
    with pytest.raises(ValueError):
        estimate_nu_transition(0.2, 1e7, [10], 0, table, 50, tabs, 2, np.random.default_rng(0))


def test_monotone_runs_orders_rows():
    rng = np.random.default_rng(0)
    runs = rng.random((6, 20, 3))
    m = monotone_runs(runs)
    assert np.all(np.diff(m, axis=0) >= 0)
    assert np.allclose(np.sort(runs[0], axis=0), m[0])


def test_plan_cache_rows_stochastic(resources):
    cache = resources.plan.cache
    assert np.allclose(cache.dist.sum(axis=-1), 1.0, atol=1e-6)
    L = cache.n_levels
    assert np.allclose(cache.mean[:, :, 0], np.arange(L + 1) / L)


def test_predict_nu_zero_ballots(resources):
    plan = resources.plan
    for nu in (0.0, 0.37, 0.9):
        assert predict_nu(plan.cache, 0, nu, 0.0, plan.cfg.dtheta) == pytest.approx(nu, abs=1e-12)
    assert predict_nu(plan.cache, 0, 0.2, 500.0, plan.cfg.dtheta) >= 0.2


# --------------------------------------------------------------------------
# value iteration against a brute-force search
# --------------------------------------------------------------------------

def toy_instance(seed):
    rng = np.random.default_rng(seed)
    L, Nth, E = 4, 5, 3
    pay_grid = (1.0, 2.0, 3.0)
    model = CompletionModel([5.0, 15.0, 30.0], 10.0)
    NB = model.max_bucket()
    dist = np.zeros((3, L + 1, NB + 1, L + 1))
    for p in range(3):
        for i in range(L + 1):
            dist[p, i, 0, i] = 1.0
            for j in range(1, NB + 1):
                dist[p, i, j, i:] = rng.dirichlet(np.ones(L + 1 - i))
    cache = NuTransitionCache(dist, np.zeros(dist.shape[:3]), np.zeros((3, L + 1)))
    theta0 = np.array([40.0, 30.0, 10.0])
    terminal = np.repeat(terminal_reward(np.arange(L + 1) / L, 200, 10)[:, None], Nth, axis=1)
    return pay_grid, model, cache, theta0, terminal, E


def brute_values(pay_grid, model, cache, theta0, terminal, E, eps):
    shift = theta_shift_buckets(theta0, 10.0)
    Nth = terminal.shape[1]
    k = len(pay_grid)

    @functools.lru_cache(maxsize=None)
    def base(s):
        if s.tau_idx == E:
            return terminal[s.nu_idx, s.theta_idx]
        nc = sum(p * (r + value(nxt))
                 for (nxt, r), p in no_change_transition(s, model, cache, pay_grid[s.pay_idx], 10.0, E).items())
        return max(terminal[s.nu_idx, s.theta_idx], nc)

    @functools.lru_cache(maxsize=None)
    def value(s):
        best = base(s)
        if s.tau_idx == E:
            return best
        for d in (PayAction.UP, PayAction.DOWN):
            cur, cost = s, 0.0
            while 0 <= cur.pay_idx + (1 if d is PayAction.UP else -1) < k:
                cur = pay_change_transition(cur, d, shift, Nth)
                cost += eps
                best = max(best, base(cur) - cost)
        return best

    return value


@pytest.mark.parametrize("seed,eps", [(0, 0.1), (1, 0.0), (2, 5.0)])
def test_value_iteration_matches_brute_force(seed, eps):
    pay_grid, model, cache, theta0, terminal, E = toy_instance(seed)
    T = [cache.matrices(p) for p in range(3)]
    probs = [model.bucket_probs(p) for p in range(3)]
    shift = theta_shift_buckets(theta0, 10.0)
    action, value, entered = value_iteration(terminal, T, probs, pay_grid, 10.0, shift, E, eps)
    oracle = brute_values(pay_grid, model, cache, theta0, terminal, E, eps)
    for idx in np.ndindex(value.shape):
        e, p, i, t = idx
        assert value[idx] == pytest.approx(oracle(AggregateState(i, t, e, p)), abs=1e-7)
    assert np.all(action[E] == PayAction.TERMINATE)


def test_single_pay_zero_rate_is_terminal():
    L = 4
    terminal = np.repeat(terminal_reward(np.arange(L + 1) / L, 200, 10)[:, None], 3, axis=1)
    T = [np.eye(L + 1)[None]]
    action, value, _ = value_iteration(terminal, T, [np.ones(1)], (1.0,), 10.0, np.zeros((1, 1), int), 4)
    assert np.allclose(value[0], terminal)
    assert np.all(action[0] == PayAction.TERMINATE)


def test_dominance_instance_goes_up():
    # pay 2 brings ballots that raise quality, pay 1 brings none; both nearly free
    L, Nth = 4, 5
    terminal = np.repeat(terminal_reward(np.arange(L + 1) / L, 200, 10)[:, None], Nth, axis=1)
    probs = [np.ones(1), CompletionModel([0.0, 30.0], 10.0).bucket_probs(1)]
    NB = len(probs[1]) - 1
    adv = np.zeros((NB + 1, L + 1, L + 1))
    for j in range(NB + 1):
        adv[j, np.arange(L + 1), np.minimum(np.arange(L + 1) + j, L)] = 1.0
    T = [np.eye(L + 1)[None], adv]
    action, value, _ = value_iteration(terminal, T, probs, (1e-6, 2e-6), 10.0, np.zeros((2, 2), int), 2, 0.1)
    assert action[0, 0, 0, Nth - 1] == PayAction.UP
    assert value[0, 0, 0, Nth - 1] > terminal[0, 0]


def test_negative_switch_cost_rejected():
    with pytest.raises(ValueError):
        value_iteration(np.zeros((2, 2)), [np.eye(2)[None]], [np.ones(1)], (1.0,), 10.0, np.zeros((1, 1), int), 2,
                        -1.0)


# --------------------------------------------------------------------------
# the planned policy
# --------------------------------------------------------------------------

def test_policy_invariants(resources):
    plan = resources.plan
    pol = plan.policy
    A, V = pol.action, pol.value
    E, k, Nnu, Nth = A.shape
    assert np.all(A[-1] == PayAction.TERMINATE)
    assert not np.any(A[:, -1] == PayAction.UP)
    assert not np.any(A[:, 0] == PayAction.DOWN)
    # a state entered by Up never moves Down and vice versa
    assert not np.any(pol.entered[0] == PayAction.DOWN)
    assert not np.any(pol.entered[1] == PayAction.UP)
    term = terminal_reward(np.arange(Nnu) / pol.nu_levels, plan.cfg.penalty, plan.cfg.n)
    assert np.all(V >= term[None, None, :, None] - 1e-9)
    assert np.all(np.diff(V, axis=2) >= -1e-9)


def test_policy_save_load(tmp_path, resources):
    pol = resources.plan.policy
    pol.save(tmp_path / "p.npz")
    back = CostPolicy.load(tmp_path / "p.npz")
    assert np.array_equal(back.action, pol.action) and np.array_equal(back.value, pol.value)
    assert np.array_equal(back.entered, pol.entered)
    assert back.pay_grid == pol.pay_grid and back.nu_levels == pol.nu_levels


def test_plan_save_load_and_key(tmp_path, resources):
    plan = resources.plan
    plan.save(tmp_path / "plan")
    back = Plan.load(tmp_path / "plan", plan.cfg.replace(seed=99))  # the seed is not part of the key
    assert np.array_equal(back.policy.action, plan.policy.action)
    assert np.array_equal(back.cache.dist, plan.cache.dist)
    with pytest.raises(ValueError):
        Plan.load(tmp_path / "plan", plan.cfg.replace(penalty=100.0))


def test_inspect_rows_columns(resources):
    rows = list(zip(range(5), inspect_rows(resources.plan.policy)))
    nu, theta, tau, pay, action, value = rows[0][1]
    assert 0 <= nu <= 1 and theta >= 0 and tau == 0 and pay in resources.plan.cfg.pay_grid
    assert action in {"no_change", "up", "down", "terminate"}


# --------------------------------------------------------------------------
# runtime controller
# --------------------------------------------------------------------------

def test_synchronize_fresh_and_done(resources):
    plan = resources.plan
    ctl = PriceController(plan.policy, plan.theta0, plan.cache)
    batch = _Batch(resources.tables, plan.cfg.n, Routing.GREEDY, np.random.default_rng(0), 0)
    assert ctl.synchronize(batch.nu_bar(), batch.theta(), 0) == plan.start_state()
    s = ctl.synchronize(1.0, 0.0, 3)
    assert (s.nu_idx, s.theta_idx, s.tau_idx) == (plan.policy.nu_levels, 0, 3)


def test_synchronized_values_match_beliefs(resources):
    st = resources.tables
    q = resources.cfg.quality()
    rng = np.random.default_rng(4)
    batch = _Batch(st, 30, Routing.GREEDY, rng, 1)
    for _ in range(60):
        t = batch.router.select()
        if t is None:
            break
        batch.add(t, int(rng.integers(2)))
    beliefs = [st.belief(a, b) for a, b in zip(batch.k1, batch.k0)]
    assert batch.nu_bar() == pytest.approx(np.mean([task_quality(b) for b in beliefs]), abs=1e-9)
    direct = sum(expected_ballots(b, q, q.pay_grid[1]) for b in beliefs)
    assert batch.theta() == pytest.approx(direct, rel=1e-6)


def toy_policy(first, after_up, k=2, E=3):
    shape = (E + 1, k, 3, 5)
    action = np.full(shape, first, dtype=np.int8)
    action[E] = PayAction.TERMINATE
    entered = np.stack([np.full(shape, after_up, dtype=np.int8), np.full(shape, PayAction.NO_CHANGE, np.int8)])
    entered[:, E] = PayAction.TERMINATE
    return CostPolicy(action, np.zeros(shape), (1.0, 2.0)[:k], 10.0, 2, 15.0,
                      theta_shift_buckets([40.0, 20.0][:k], 10.0), entered=entered)


def test_controller_moves_then_reads_entered_table():
    ctl = PriceController(toy_policy(PayAction.UP, PayAction.NO_CHANGE), [40.0, 20.0])
    assert ctl.act(0) is PayAction.NO_CHANGE
    assert ctl.pay_idx == 1 and ctl.theta == 20.0
    ctl.observe(50)
    assert ctl.theta == 0.0
    assert ctl.act(3) is PayAction.TERMINATE


def test_controller_theta_callback_and_errors():
    ctl = PriceController(toy_policy(PayAction.UP, PayAction.UP), [40.0, 20.0])
    with pytest.raises(InvalidAction):
        ctl.act(0, theta_at=lambda p: 7.0)
    with pytest.raises(ValueError):
        PriceController(toy_policy(PayAction.UP, PayAction.UP), [40.0, 20.0], n_epochs=9)


def test_controller_offset_aligns_short_deadline():
    ctl = PriceController(toy_policy(PayAction.NO_CHANGE, PayAction.NO_CHANGE), [40.0, 20.0], n_epochs=1)
    assert ctl.offset == 2 and ctl.state(0).tau_idx == 2
    assert ctl.act(1) is PayAction.TERMINATE
