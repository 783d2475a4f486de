"""Complete-data log-likelihood of the Probit transition model.

Each outcome j contributes, for every individual i and time t after the
individual's start, a gated Bernoulli-Probit term

    gate * (x log Phi(z'b) + (1 - x) log(1 - Phi(z'b)))

where the gate is "alive at t" for transient outcomes, "alive at t and not yet
absorbed at t-1" for absorbing outcomes and "alive at t-1" for mortality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import MISSING, ModelSpec, OutcomeKind, ParamSet, Panel, covariate_values, effective_starts
from .probit import _log_ndtr, _mills, log_phi_cdf, mills


@dataclass(frozen=True)
class LikTerm:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    outcome: int | None = None


def _bernoulli_term(beta, z, x: int, outcome=None) -> LikTerm:
    beta = np.asarray(beta, dtype=float)
    z = np.asarray(z, dtype=float)
    if beta.shape != z.shape:
        raise ContractError(f"beta has {beta.size} entries but design vector has {z.size}")
    if x not in (0, 1):
        raise ContractError(f"outcome value must be 0 or 1, got {x}")
    s = 2.0 * x - 1.0
    eta = s * float(z @ beta)
    lam = mills(eta)
    d1 = s * lam
    d2 = -lam * (eta + lam)
    return LikTerm(log_phi_cdf(eta), d1 * z, d2 * np.outer(z, z), outcome)


def _zero_term(beta, outcome=None) -> LikTerm:
    k = np.asarray(beta).size
    return LikTerm(0.0, np.zeros(k), np.zeros((k, k)), outcome)


def _binary(*vals):
    for v in vals:
        if v not in (0, 1):
            raise ContractError(f"expected a 0/1 value, got {v!r}")


def lik_transient(beta_j, z, x_now: int, dead_now: int, outcome=None) -> LikTerm:
    """Term for a transient outcome; zero once the individual has died."""
    _binary(x_now, dead_now)
    if dead_now:
        return _zero_term(beta_j, outcome)
    return _bernoulli_term(beta_j, z, x_now, outcome)


def lik_absorbing(beta_j, z, x_prev: int, x_now: int, dead_now: int, outcome=None) -> LikTerm:
    """Term for an absorbing outcome; zero once absorbed or dead."""
    _binary(x_prev, x_now, dead_now)
    if x_prev == 1 and x_now == 0:
        raise ContractError("absorbing outcome returns from 1 to 0")
    if dead_now or x_prev:
        return _zero_term(beta_j, outcome)
    return _bernoulli_term(beta_j, z, x_now, outcome)


def lik_mortality(beta_m, z, dead_prev: int, dead_now: int, outcome=None) -> LikTerm:
    """Term for the mortality outcome; zero after death."""
    _binary(dead_prev, dead_now)
    if dead_prev and not dead_now:
        raise ContractError("mortality returns from 1 to 0")
    if dead_prev:
        return _zero_term(beta_m, outcome)
    return _bernoulli_term(beta_m, z, dead_now, outcome)


# ---------------------------------------------------------------------------
# Weighted Probit objective on aggregated rows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightedRows:
    """Distinct design rows with the total weight of y=1 and y=0 outcomes."""

    X: np.ndarray  # (u, p)
    w1: np.ndarray  # (u,)
    w0: np.ndarray  # (u,)

    @property
    def total_weight(self) -> float:
        return float(self.w1.sum() + self.w0.sum())


def weighted_probit(beta, rows: WeightedRows, order: int = 1):
    """Value, and optionally gradient (order >= 1) and Hessian (order 2), of
    ``sum w1 log Phi(X b) + w0 log(1 - Phi(X b))``.

    One pass produces all requested pieces.
    """
    eta = rows.X @ np.asarray(beta, dtype=float)
    pos = rows.w1 > 0
    neg = rows.w0 > 0
    val = float(np.dot(rows.w1[pos], _log_ndtr(eta[pos])) + np.dot(rows.w0[neg], _log_ndtr(-eta[neg])))
    if order == 0:
        return val
    lam_p = _mills(eta)
    lam_n = _mills(-eta)
    d1 = rows.w1 * lam_p - rows.w0 * lam_n
    grad = rows.X.T @ d1
    if order == 1:
        return val, grad
    d2 = rows.w1 * lam_p * (eta + lam_p) + rows.w0 * lam_n * (lam_n - eta)
    hess = -(rows.X.T * d2) @ rows.X
    return val, grad, 0.5 * (hess + hess.T)


# ---------------------------------------------------------------------------
# Batch evaluation over complete trajectories
# ---------------------------------------------------------------------------

def linear_index(beta, cov_t: np.ndarray, lagged: np.ndarray) -> np.ndarray:
    """``z'b`` summed term by term in layout order (no BLAS, so bitwise stable
    regardless of batch shape)."""
    eta = np.full(cov_t.shape[:-1], beta[0], dtype=float)
    C = cov_t.shape[-1]
    for c in range(C):
        eta = eta + beta[1 + c] * cov_t[..., c]
    for k in range(lagged.shape[-1]):
        eta = eta + beta[1 + C + k] * lagged[..., k]
    return eta


def trajectory_loglik(spec: ModelSpec, params: ParamSet, cells: np.ndarray, cov: np.ndarray,
                      starts: np.ndarray, strict: bool = True) -> np.ndarray:
    """Complete-data log-likelihood of each trajectory in a batch.

    ``cells`` is ``(B, T, J)``, ``cov`` is ``(B, T, C)``, ``starts`` holds
    0-based start indices (-1 skips the trajectory).  Terms are added in a
    fixed order: time, then mortality, then the other outcomes as declared.
    With ``strict=False`` impossible transitions give ``-inf`` instead of
    raising.
    """
    cells = np.asarray(cells)
    B, T, _ = cells.shape
    m = spec.mortality_index
    total = np.zeros(B)
    for t in range(1, T):
        live_t = (starts >= 0) & (t > starts)
        prev = cells[:, t - 1, :]
        now = cells[:, t, :]
        for j in spec.process_order:
            kind = spec.outcomes[j].kind
            if kind is OutcomeKind.MORTALITY:
                active = live_t & (prev[:, m] == 0)
            else:
                active = live_t & (now[:, m] == 0)
                if kind is OutcomeKind.ABSORBING:
                    absorbed = active & (prev[:, j] == 1)
                    if np.any(absorbed & (now[:, j] == 0)):
                        if strict:
                            raise ContractError(
                                f"absorbing outcome '{spec.names[j]}' returns to 0 at time {t + 1}")
                        total = np.where(absorbed & (now[:, j] == 0), -np.inf, total)
                    active = active & (prev[:, j] == 0)
            if not active.any():
                continue
            deps = list(spec.dep_indices[j])
            y = now[:, j]
            lagged = prev[:, deps]
            if np.any(active & (y == MISSING)) or np.any(active[:, None] & (lagged < 0)):
                raise ContractError(
                    f"missing cell for outcome '{spec.names[j]}' at time {t + 1}; run the E-step first")
            eta = linear_index(params[j], cov[:, t, :], lagged.astype(float))
            term = _log_ndtr(np.where(y == 1, eta, -eta))
            total = total + np.where(active, term, 0.0)
    return total


def complete_loglik(spec: ModelSpec, params: ParamSet, panel: Panel, gradient: bool = False):
    """Complete-data log-likelihood summed over individuals.

    The panel must contain no missing cells (cells removed by death are
    fine).  With ``gradient=True`` returns ``(value, [grad_j for each outcome])``.
    """
    params.check(spec)
    if np.any(panel.cells == MISSING):
        raise ContractError("panel has missing cells; complete it with the E-step first")
    starts = effective_starts(panel, spec)
    cov = covariate_values(spec, panel.covariates, panel.start_year, panel.T)
    per_ind = trajectory_loglik(spec, params, panel.cells, cov, starts)
    value = math.fsum(per_ind)
    if not gradient:
        return value
    rows = panel_rows(spec, panel)
    return value, [weighted_probit(params[j], rows[j])[1] for j in range(spec.J)]


def complete_loglik_by_outcome(spec: ModelSpec, params: ParamSet, panel: Panel) -> np.ndarray:
    """Outcome-by-outcome partial sums; they add up to :func:`complete_loglik`."""
    rows = panel_rows(spec, panel)
    return np.array([weighted_probit(params[j], rows[j], order=0) for j in range(spec.J)])


def panel_rows(spec: ModelSpec, panel: Panel) -> list[WeightedRows]:
    """Aggregated design rows for a complete panel (unit weights)."""
    from .stats import StatsAccumulator

    if np.any(panel.cells == MISSING):
        raise ContractError("panel has missing cells; complete it with the E-step first")
    acc = StatsAccumulator(spec, panel)
    starts = effective_starts(panel, spec)
    acc.add(np.arange(panel.n), panel.cells[:, None], np.ones((panel.n, 1)), starts)
    return acc.rows()
