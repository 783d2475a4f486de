import math

import numpy as np
import pytest

from helpers import INIT, oracle_instance, three_outcome_params, three_outcome_spec, two_outcome_params, two_outcome_spec
from markovem.datagen import generate_panel
from markovem.errors import BudgetExceededError
from markovem.likelihood import complete_loglik, panel_rows
from markovem.model import DEAD, MISSING, ParamSet, make_panel, propagate_absorbing
from markovem.mstep import NEWTON, OptimizerConfig, maximize_q
from markovem.oracle import (Enumeration, EnumerationBudget, direct_mle, enumerate_completions, exact_estep,
                             exact_observed_loglik)

NA = MISSING


def test_enumeration_of_two_unknown_times():
    spec = two_outcome_spec(3)
    cells = np.array([[1, 0], [NA, NA], [NA, NA]], np.int8)
    comp = enumerate_completions(spec, cells, 0)
    # at each step: alive with smk 0/1, or dead; the dead branch stops
    assert comp.shape == (2 * 3 + 1, 3, 2)
    assert len({c.tobytes() for c in comp}) == comp.shape[0]
    dead_early = [c for c in comp if c[1, 1] == 1]
    assert len(dead_early) == 1 and dead_early[0][2].tolist() == [DEAD, DEAD]


def test_enumeration_respects_absorbing_outcomes():
    spec = three_outcome_spec(3)
    cells = np.array([[0, 1, 0], [NA, NA, 0], [0, NA, 0]], np.int8)
    p = propagate_absorbing(make_panel(spec, ["a"], [[1945, 0]], cells[None]), spec)
    comp = enumerate_completions(spec, p.cells[0], 0)
    assert np.all(comp[:, :, 1] == 1)
    assert comp.shape[0] == 2


def test_posterior_probabilities_sum_to_one():
    spec, panel = oracle_instance()
    panel = propagate_absorbing(panel, spec)
    for i in range(panel.n):
        post = exact_estep(spec, two_outcome_params(), panel.record(i))
        assert post.probs.sum() == pytest.approx(1.0, abs=1e-14)


def test_budget_is_enforced():
    spec = two_outcome_spec(8)
    cells = np.full((1, 8, 2), NA, np.int8)
    cells[0, 0] = 0
    panel = make_panel(spec, ["a"], np.zeros((1, 0)), cells)
    with pytest.raises(BudgetExceededError, match="14 missing cells"):
        exact_observed_loglik(spec, two_outcome_params(), panel, EnumerationBudget(10))
    assert EnumerationBudget(10).max_completions == 1024


def test_complete_panel_matches_complete_loglik():
    spec = three_outcome_spec(4)
    params = three_outcome_params()
    panel = generate_panel(spec, params, 30, INIT, 12)
    assert exact_observed_loglik(spec, params, panel) == pytest.approx(complete_loglik(spec, params, panel),
                                                                       rel=1e-13)


def test_marginalizing_one_cell_by_hand():
    spec = two_outcome_spec(3)
    params = two_outcome_params()
    full = [[[1, 0], [x, 0], [1, 0]] for x in (0, 1)]
    lls = [complete_loglik(spec, params, make_panel(spec, ["a"], np.zeros((1, 0)), [c])) for c in full]
    one = make_panel(spec, ["a"], np.zeros((1, 0)), [[[1, 0], [NA, 0], [1, 0]]])
    assert exact_observed_loglik(spec, params, one) == pytest.approx(math.log(sum(map(math.exp, lls))),
                                                                     rel=1e-13)


def test_score_matches_finite_differences():
    spec, panel = oracle_instance()
    enum = Enumeration(spec, panel)
    params = ParamSet((np.array([-0.3, 0.8]), np.array([-1.0, 0.2])))
    score = np.concatenate(enum.score(params))
    flat = params.flat()
    fd = np.empty_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = 1e-5
        up = ParamSet(tuple(np.split(flat + e, [2])))
        dn = ParamSet(tuple(np.split(flat - e, [2])))
        fd[k] = (enum.loglik(up) - enum.loglik(dn)) / 2e-5
    np.testing.assert_allclose(score, fd, rtol=1e-7, atol=1e-9)


def test_direct_mle_on_complete_data_is_the_probit_mle():
    spec = three_outcome_spec(4)
    panel = generate_panel(spec, three_outcome_params(), 200, INIT, 13)
    res = direct_mle(spec, panel, init=three_outcome_params())
    ref, _ = maximize_q(spec, three_outcome_params(), panel_rows(spec, panel),
                        OptimizerConfig(NEWTON, 200, rel_tol=1e-15))
    assert res.converged
    assert res.params.max_abs_diff(ref) < 1e-6


def test_direct_mle_on_oracle_instance():
    spec, panel = oracle_instance()
    res = direct_mle(spec, panel)
    assert res.converged and res.max_score < 1e-9
    assert max(res.fd_check) < 1e-6
    # frozen reference values for this instance
    assert res.loglik == pytest.approx(-13.22339796885907, abs=1e-9)
    np.testing.assert_allclose(res.params.flat(), [-0.63681094, 1.12626731, -1.75642553, 1.22844065], atol=1e-7)
