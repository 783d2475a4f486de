import csv
import math

import numpy as np
import pytest

from helpers import INIT, oracle_instance, three_outcome_params, three_outcome_spec, two_outcome_spec
from markovem.datagen import ItemNonresponse, MissingnessPlan, apply_missingness, generate_panel
from markovem.em import ScheduleConfig, complete_case_rows, initialize, run_em, step_schedule, write_trace
from markovem.errors import ConvergenceWarning, InitializationError
from markovem.model import MISSING, make_panel


def test_schedule_holds_while_q_improves():
    cfg = ScheduleConfig()
    assert step_schedule(10, 3, 1.0, cfg) == (10, 3)
    assert step_schedule(10, 3, cfg.threshold(10) * 1.0001, cfg) == (10, 3)


def test_schedule_grows_r_then_optimizer_cap():
    cfg = ScheduleConfig()
    state, seen = (10, 3), [(10, 3)]
    for _ in range(6):
        state = step_schedule(*state, 0.0, cfg)
        seen.append(state)
    assert seen == [(10, 3), (100, 3), (1000, 3), (1000, 30), (1000, 300), (1000, 300), (1000, 300)]


def test_schedule_threshold_is_inclusive_and_scales_with_r():
    cfg = ScheduleConfig()
    assert cfg.threshold(100) == pytest.approx(1.97e-3)
    assert step_schedule(100, 3, cfg.threshold(100), cfg) == (1000, 3)
    # a decrease in Q also triggers growth
    assert step_schedule(1000, 3, -5.0, cfg) == (1000, 30)


def test_schedule_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(R_init=0)
    with pytest.raises(ValueError):
        ScheduleConfig(R_init=50, R_max=10)
    with pytest.raises(ValueError):
        ScheduleConfig(em_tolerance=0)


def test_complete_case_rows_skip_gaps_with_missing_lags():
    spec = two_outcome_spec(4)
    panel = make_panel(spec, ["a"], np.zeros((1, 0)), [[[1, 0], [MISSING, 0], [0, 0], [1, 0]]])
    rows = complete_case_rows(spec, panel, 0)
    # smk observed at 1, 3, 4 -> transitions 1->3 and 3->4
    assert rows.X.tolist() == [[1.0, 1.0], [1.0, 0.0]]
    assert rows.w1.tolist() == [0.0, 1.0]


def test_initialize_requires_transitions():
    spec = two_outcome_spec(3)
    panel = make_panel(spec, ["a"], np.zeros((1, 0)), [[[0, 0], [MISSING, MISSING], [MISSING, MISSING]]])
    with pytest.raises(InitializationError, match="no complete-case transitions"):
        initialize(spec, panel)


def test_initialize_falls_back_on_constant_outcome():
    spec = two_outcome_spec(3)
    panel = make_panel(spec, ["a", "b"], np.zeros((2, 0)), [[[0, 0], [1, 0], [0, 0]], [[1, 0], [1, 0], [0, 0]]])
    with pytest.warns(ConvergenceWarning, match="'dead'"):
        beta = initialize(spec, panel)
    assert np.all(beta[1] == 0)


def test_complete_data_converges_after_one_iteration():
    spec = three_outcome_spec(5)
    panel = generate_panel(spec, three_outcome_params(), 600, INIT, 6)
    res = run_em(spec, panel, ScheduleConfig(), seed=1)
    assert res.converged
    assert len(res.trace) == 2
    assert res.trace[1]["q_gain"] == 0.0


def test_exact_em_climbs_the_observed_likelihood():
    spec, panel = oracle_instance()
    res = run_em(spec, panel, ScheduleConfig(em_tolerance=1e-10, em_max_iterations=60), exact=True,
                 track_loglik=True)
    ll = [res.trace[0]["loglik_start"]] + [r["loglik"] for r in res.trace]
    assert all(b >= a for a, b in zip(ll, ll[1:]))
    assert ll[-1] > ll[0]


def test_monte_carlo_em_runs_and_writes_trace(tmp_path):
    spec = three_outcome_spec(5)
    truth = generate_panel(spec, three_outcome_params(), 150, INIT, 7)
    panel, _ = apply_missingness(truth, spec, MissingnessPlan([ItemNonresponse(0.25)]), 7)
    with pytest.warns(ConvergenceWarning, match="safety cap"):
        res = run_em(spec, panel, ScheduleConfig(R_init=5, R_max=20, em_max_iterations=4), seed=3)
    assert not res.converged and len(res.trace) == 4
    assert [r["R"] for r in res.trace][0] == 5
    write_trace(res.trace, tmp_path / "trace.csv", tmp_path / "timing.csv")
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert list(rows[0]) == ["k", "Q", "q_gain", "R", "opt_iter", "q_evals", "grad_evals"]
    assert rows[0]["q_gain"] == "nan"
    assert math.isfinite(float(rows[-1]["Q"]))
    timing = list(csv.DictReader(open(tmp_path / "timing.csv")))
    assert len(timing) == 4 and float(timing[0]["seconds"]) > 0
