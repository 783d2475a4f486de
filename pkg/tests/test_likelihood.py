import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import three_outcome_params, three_outcome_spec, two_outcome_params, two_outcome_spec
from markovem.datagen import InitialDistribution, generate_panel
from markovem.errors import ContractError
from markovem.likelihood import (WeightedRows, complete_loglik, complete_loglik_by_outcome, lik_absorbing,
                                 lik_mortality, lik_transient, panel_rows, weighted_probit)
from markovem.model import DEAD, ParamSet, make_panel
from markovem.presets import fem_mini_initial, fem_mini_params, fem_mini_spec


def fd_grad(f, x, h=1e-6):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def richardson_grad(f, x, h=1e-4):
    """Central differences with one Richardson step; truncation error O(h^4)."""
    return (4 * fd_grad(f, x, h / 2) - fd_grad(f, x, h)) / 3


# ---------------------------------------------------------------- single terms

def test_zero_coefficients_give_log_half():
    z = np.array([1.0, 0.3])
    for x in (0, 1):
        assert lik_transient(np.zeros(2), z, x, 0).value == pytest.approx(math.log(0.5), abs=1e-15)


def test_gating():
    b, z = np.array([0.2, -0.4]), np.array([1.0, 2.0])
    assert lik_transient(b, z, 1, 1).value == 0.0
    assert lik_absorbing(b, z, 1, 1, 0).value == 0.0
    assert lik_absorbing(b, z, 0, 1, 1).value == 0.0
    assert lik_mortality(b, z, 1, 1).value == 0.0
    assert np.all(lik_mortality(b, z, 1, 1).gradient == 0)
    assert lik_absorbing(b, z, 0, 1, 0).value == pytest.approx(math.log(0.5 * math.erfc(0.6 / math.sqrt(2))))


def test_impossible_transitions_raise():
    b, z = np.zeros(1), np.ones(1)
    with pytest.raises(ContractError):
        lik_absorbing(b, z, 1, 0, 0)
    with pytest.raises(ContractError):
        lik_mortality(b, z, 1, 0)
    with pytest.raises(ContractError):
        lik_transient(b, z, 2, 0)
    with pytest.raises(ContractError, match="design vector"):
        lik_transient(np.zeros(2), np.ones(3), 1, 0)


@given(seed=st.integers(0, 2**32 - 1), x=st.integers(0, 1))
def test_term_gradient_and_hessian_match_finite_differences(seed, x):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    b = rng.normal(0, 1, k)
    z = rng.normal(0, 1, k)
    f = lambda v: lik_transient(v, z, x, 0).value
    term = lik_transient(b, z, x, 0)
    np.testing.assert_allclose(term.gradient, fd_grad(f, b), rtol=1e-6, atol=1e-8)
    H = np.array([fd_grad(lambda v: lik_transient(v, z, x, 0).gradient[i], b) for i in range(k)])
    np.testing.assert_allclose(term.hessian, H, rtol=1e-5, atol=1e-7)


@given(seed=st.integers(0, 2**32 - 1))
def test_weighted_probit_derivatives(seed):
    rng = np.random.default_rng(seed)
    u, p = int(rng.integers(1, 20)), int(rng.integers(1, 5))
    rows = WeightedRows(rng.normal(0, 1, (u, p)), rng.exponential(1, u) * (rng.random(u) < 0.7),
                        rng.exponential(1, u) * (rng.random(u) < 0.7))
    b = rng.normal(0, 0.7, p)
    v, g, H = weighted_probit(b, rows, order=2)
    assert v == pytest.approx(weighted_probit(b, rows, order=0))
    np.testing.assert_allclose(g, fd_grad(lambda x: weighted_probit(x, rows, 0), b), rtol=1e-6, atol=1e-7)
    Hfd = np.array([fd_grad(lambda x: weighted_probit(x, rows, 1)[1][i], b) for i in range(p)])
    np.testing.assert_allclose(H, Hfd, rtol=1e-5, atol=1e-6)


def test_weighted_probit_extreme_index_is_finite():
    rows = WeightedRows(np.array([[1.0], [1.0]]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    v, g, H = weighted_probit(np.array([35.0]), rows, order=2)
    assert np.isfinite(v) and np.all(np.isfinite(g)) and np.all(np.isfinite(H))


# ---------------------------------------------------------------- panels

def _mp_log_phi(x):
    return mp.log(mp.ncdf(x))


def test_complete_loglik_matches_hand_product():
    spec = two_outcome_spec(3)
    params = two_outcome_params()
    cells = [[[1, 0], [1, 0], [0, 0]],
             [[0, 0], [1, 1], [DEAD, DEAD]],
             [[1, 0], [0, 0], [DEAD, 1]]]
    panel = make_panel(spec, ["a", "b", "c"], np.zeros((3, 0)), cells)
    bs, bd = (np.asarray(b, float) for b in params.betas)
    mp.mp.dps = 40
    ref = mp.mpf(0)
    # a: 1 -> (1, alive) -> (0, alive)
    ref += _mp_log_phi(-(bd[0] + bd[1])) + _mp_log_phi(bs[0] + bs[1])
    ref += _mp_log_phi(-(bd[0] + bd[1])) + _mp_log_phi(-(bs[0] + bs[1]))
    # b: 0 -> dead at time 2
    ref += _mp_log_phi(bd[0])
    # c: 1 -> (0, alive) -> dead
    ref += _mp_log_phi(-(bd[0] + bd[1])) + _mp_log_phi(-(bs[0] + bs[1]))
    ref += _mp_log_phi(bd[0])
    assert complete_loglik(spec, params, panel) == pytest.approx(float(ref), rel=1e-14)


def test_loglik_at_zero_counts_terms():
    spec = three_outcome_spec(4)
    panel = generate_panel(spec, three_outcome_params(), 50, InitialDistribution({"smk": 0.4}), seed=3)
    zero = ParamSet(tuple(np.zeros(spec.n_coef(j)) for j in range(spec.J)))
    m = sum(r.total_weight for r in panel_rows(spec, panel))
    assert complete_loglik(spec, zero, panel) == pytest.approx(m * math.log(0.5), rel=1e-13)


def test_outcome_sums_add_up_and_gradient_matches():
    spec = fem_mini_spec(6)
    params = fem_mini_params(spec)
    panel = generate_panel(spec, params, 300, fem_mini_initial(), seed=8)
    total, grads = complete_loglik(spec, params, panel, gradient=True)
    parts = complete_loglik_by_outcome(spec, params, panel)
    assert math.fsum(parts) == pytest.approx(total, rel=1e-12)
    j = spec.index("heart")

    def f(b):
        betas = list(params.betas)
        betas[j] = b
        return complete_loglik(spec, ParamSet(tuple(betas)), panel)

    np.testing.assert_allclose(grads[j], richardson_grad(f, params[j]), rtol=1e-6, atol=1e-6)


def test_individual_order_does_not_matter():
    spec = three_outcome_spec(4)
    params = three_outcome_params()
    panel = generate_panel(spec, params, 40, InitialDistribution({"smk": 0.4}), seed=4)
    perm = np.random.default_rng(0).permutation(panel.n)
    shuffled = make_panel(spec, [panel.ids[i] for i in perm], panel.covariates[perm], panel.cells[perm],
                          panel.start_year)
    assert complete_loglik(spec, params, shuffled) == pytest.approx(complete_loglik(spec, params, panel),
                                                                     rel=1e-13)


def test_missing_cells_rejected():
    spec = two_outcome_spec(3)
    panel = make_panel(spec, ["a"], np.zeros((1, 0)), [[[0, 0], [-1, 0], [0, 0]]])
    with pytest.raises(ContractError, match="missing cells"):
        complete_loglik(spec, two_outcome_params(), panel)
