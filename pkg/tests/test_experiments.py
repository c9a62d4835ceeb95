import math

import numpy as np
import pytest
from scipy import stats

from crowdctl import SimConfig
from crowdctl.experiments import (CELL_FIELDS, PLOT_FILES, TRACK_FIELDS, ComparisonReport, ExperimentSpec,
                                  avg_pay_per_ballot, ci_half_width, emit_plots_data, normalize, run_suite, welch)
from crowdctl.sim import Resources, RunResult

SMALL = SimConfig(n=40, seed=2)


@pytest.fixture(scope="module")
def small_res():
    return {1.0: Resources(SMALL)}


def result(cost, ballots, utility=-10.0):
    return RunResult("x", 0, 60.0, 1, 200.0, utility, 1.0, 0, cost, ballots, None, [], [], [1], [1])


def test_avg_pay_examples():
    assert avg_pay_per_ballot(result(30.0, 10)) == 3.0
    assert avg_pay_per_ballot(result(2 * 5 + 4 * 5, 10)) == 3.0
    assert avg_pay_per_ballot(result(0.0, 0)) is None


def test_normalize_sign_conventions():
    assert normalize(-500.0, -500.0) == 1.0
    assert normalize(300.0, 300.0) == 1.0
    assert normalize(600.0, 300.0) == pytest.approx(2.0)
    assert normalize(-750.0, -500.0) == pytest.approx(0.5)
    assert normalize(5.0, 0.0) is None


def test_normalize_preserves_order():
    rng = np.random.default_rng(0)
    for ref in (-1234.0, 87.0):
        xs = rng.normal(ref, 500, 50)
        ys = np.array([normalize(x, ref) for x in xs])
        assert np.array_equal(np.argsort(xs), np.argsort(ys))


def test_welch_against_scipy_and_edges():
    a, b = [1.0, 2.0, 4.0, 3.5], [0.5, 0.1, 1.2]
    assert welch(a, b) == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue)
    assert welch([3.0, 3.0], [3.0, 3.0]) == 1.0
    assert welch([3.0, 3.0], [4.0, 4.0]) == 0.0
    assert math.isnan(welch([1.0], [2.0, 3.0]))


def test_ci_half_width():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    assert ci_half_width(x) == pytest.approx(stats.t.ppf(0.975, 3) * x.std(ddof=1) / 2)
    assert math.isnan(ci_half_width([1.0]))


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(["octopus"], [60], seeds=1)
    with pytest.raises(ValueError):
        ExperimentSpec([], [60])
    with pytest.raises(ValueError):
        ExperimentSpec(["nobody"], [60])
    assert ExperimentSpec(["static-1"], [60], seeds=3, seed_offset=5).seed_list() == [5, 6, 7]


def test_one_cell_report(small_res):
    rep = run_suite(ExperimentSpec(["static-2"], [60], seeds=2), SMALL, resources=small_res)
    assert len(rep.cells) == 1 and rep.complete
    c = rep.cell("static-2", 60.0)
    assert c["n_seeds"] == 2 and c["reference"] == "static-2"
    assert c["p_value"] == 1.0 and not c["significant"] and c["normalized_utility"] in (1.0, None)


def test_octopus_against_itself(small_res):
    rep = run_suite(ExperimentSpec(["octopus"], [60, 120], seeds=3), SMALL, resources=small_res)
    for c in rep.cells:
        assert c["normalized_utility"] == 1.0
        assert not c["significant"] and c["delta_vs_reference"] == 0.0


def test_reference_normalization_in_mixed_suite(small_res, tmp_path):
    spec = ExperimentSpec(["octopus", "static-1", "gao-1"], [60, 120], seeds=3, out_dir=str(tmp_path))
    rep = run_suite(spec, SMALL, resources=small_res)
    assert len(rep.cells) == 6
    for c in rep.cells:
        ref = rep.cell("octopus", c["deadline_min"])
        assert c["reference"] == "octopus"
        assert c["normalized_utility"] == pytest.approx(normalize(c["utility_mean"], ref["utility_mean"]))
    for name in list(PLOT_FILES) + ["tracking.csv"]:
        assert (tmp_path / name).exists()
    rows = (tmp_path / "utility_vs_deadline.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 3 * 2
    assert (tmp_path / "cells.csv").read_text().split("\n")[0] == ",".join(CELL_FIELDS)


def test_reports_reproducible(small_res, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        run_suite(ExperimentSpec(["octopus", "static-3"], [60], seeds=2, out_dir=str(d)), SMALL,
                  resources=small_res)
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()})
    assert outs[0] == outs[1]


def test_failed_cell_is_recorded(small_res):
    rep = run_suite(ExperimentSpec(["static-1", "static-9"], [60], seeds=2), SMALL, resources=small_res)
    assert not rep.complete
    assert rep.failures[0]["controller"] == "static-9"
    assert [c["controller"] for c in rep.cells] == ["static-1"]


def test_parallel_matches_serial(small_res):
    a = run_suite(ExperimentSpec(["static-1", "static-4"], [60, 120], seeds=2), SMALL, resources=small_res)
    b = run_suite(ExperimentSpec(["static-1", "static-4"], [60, 120], seeds=2, workers=2), SMALL,
                  resources=small_res)
    assert a.to_json() == b.to_json()


def test_save_runs(small_res, tmp_path):
    run_suite(ExperimentSpec(["static-1"], [60], seeds=2, out_dir=str(tmp_path)), SMALL, resources=small_res,
              save_runs=True)
    files = sorted(p.name for p in (tmp_path / "runs").iterdir())
    assert files == ["static-1_d60_x1_s0.csv", "static-1_d60_x1_s0.json",
                     "static-1_d60_x1_s1.csv", "static-1_d60_x1_s1.json"]


def test_empty_report_headers_only(tmp_path):
    rep = ComparisonReport([], [], [])
    emit_plots_data(rep, tmp_path)
    for name, cols in PLOT_FILES.items():
        assert (tmp_path / name).read_text() == ",".join(["controller", "deadline_min", "rate_scale", *cols]) + "\n"
    assert (tmp_path / "tracking.csv").read_text() == ",".join(TRACK_FIELDS) + "\n"


def test_report_json_round_trip(small_res, tmp_path):
    rep = run_suite(ExperimentSpec(["octopus"], [60], seeds=2), SMALL, resources=small_res)
    back = ComparisonReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()
    assert len(back.tracks) == 4  # four epochs in one hour
    rep.save(tmp_path)
    assert ComparisonReport.from_json((tmp_path / "report.json").read_text()).cells == back.cells


def test_rate_scales_build_their_own_plans(tmp_path):
    cfg = SimConfig(n=20, seed=1, tau_max_min=60.0)
    spec = ExperimentSpec(["octopus"], [60], seeds=2, rate_scales=[0.8, 1.2])
    rep = run_suite(spec, cfg, plan_cache=tmp_path)
    assert {c["rate_scale"] for c in rep.cells} == {0.8, 1.2}
    assert (tmp_path / "scale-0.8" / "meta.json").exists()
