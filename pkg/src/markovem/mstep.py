"""Weighted Probit M-step.

The weighted objective separates by outcome, so each coefficient vector is
maximized on its own.  Two optimizers are available, both with a
backtracking Armijo line search that never accepts a step lowering Q:

* ``quasi-newton``: limited-memory BFGS (two-loop recursion);
* ``newton``: analytic Hessian, with a ridge added whenever the Hessian of
  the negated objective is not positive definite.

Design columns are centered and scaled inside the optimizer (age in years
would otherwise dominate the curvature) and coefficients are mapped back on
exit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InitializationError
from .likelihood import WeightedRows, weighted_probit
from .model import ModelSpec, ParamSet

log = logging.getLogger(__name__)

_Q_RESOLUTION = 64 * np.finfo(float).eps

QUASI_NEWTON = "quasi-newton"
NEWTON = "newton"


@dataclass
class OptimizerConfig:
    method: str = QUASI_NEWTON
    max_iterations: int = 100
    rel_tol: float = 1e-8
    memory: int = 10
    grad_tol: float = 1e-12

    def __post_init__(self):
        if self.method not in (QUASI_NEWTON, NEWTON):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class QEvaluation:
    q_value: float
    values: np.ndarray
    gradients: list[np.ndarray]
    hessians: list[np.ndarray] | None
    q_evals: int = 1
    grad_evals: int = 1


def eval_q(spec: ModelSpec, beta: ParamSet, rows: list[WeightedRows], hessian: bool = True) -> QEvaluation:
    """Weighted complete-data log-likelihood with per-outcome derivatives.

    ``rows`` are the aggregated replicate statistics from the E-step (or from
    a complete panel).
    """
    beta.check(spec)
    if len(rows) != spec.J:
        raise ContractError(f"expected statistics for {spec.J} outcomes, got {len(rows)}")
    vals, grads, hesses = [], [], []
    for j in range(spec.J):
        if rows[j].X.shape[1] != spec.n_coef(j):
            raise ContractError(f"statistics for '{spec.names[j]}' have {rows[j].X.shape[1]} columns, "
                                f"expected {spec.n_coef(j)}")
        out = weighted_probit(beta[j], rows[j], order=2 if hessian else 1)
        vals.append(out[0])
        grads.append(out[1])
        if hessian:
            hesses.append(out[2])
    vals = np.array(vals)
    return QEvaluation(float(vals.sum()), vals, grads, hesses if hessian else None)


@dataclass
class OutcomeReport:
    outcome: str
    iterations: int = 0
    converged: bool = False
    line_search_failed: bool = False
    q_start: float = 0.0
    q_end: float = 0.0
    q_evals: int = 0
    grad_evals: int = 0
    message: str = ""


@dataclass
class _Counter:
    f: int = 0
    g: int = 0


class _Scaled:
    """Objective ``-Q_j / W`` on standardized columns."""

    def __init__(self, rows: WeightedRows, counter: _Counter):
        X = rows.X
        wt = rows.w1 + rows.w0
        self.W = float(wt.sum())
        mu = (wt @ X) / self.W
        sd = np.sqrt(np.maximum(wt @ (X - mu) ** 2 / self.W, 0.0))
        const = sd < 1e-12
        mu[const] = 0.0
        sd[const] = 1.0
        mu[0], sd[0] = 0.0, 1.0
        self.mu, self.sd = mu, sd
        self.rows = WeightedRows((X - mu) / sd, rows.w1, rows.w0)
        self.count = counter

    def to_internal(self, beta):
        b = beta * self.sd
        b[0] = beta[0] + beta[1:] @ self.mu[1:]
        return b

    def to_external(self, b):
        beta = b / self.sd
        beta[0] = b[0] - beta[1:] @ self.mu[1:]
        return beta

    def f(self, b):
        self.count.f += 1
        return -weighted_probit(b, self.rows, order=0) / self.W

    def fg(self, b):
        self.count.f += 1
        self.count.g += 1
        v, g = weighted_probit(b, self.rows, order=1)
        return -v / self.W, -g / self.W

    def fgh(self, b):
        self.count.f += 1
        self.count.g += 1
        v, g, h = weighted_probit(b, self.rows, order=2)
        return -v / self.W, -g / self.W, -h / self.W


def _armijo(obj: _Scaled, x, f, g, d, c1=1e-4, floor=1e-12):
    slope = float(g @ d)
    step = 1.0
    while step >= floor:
        x_new = x + step * d
        f_new = obj.f(x_new)
        if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
            return x_new, f_new
        step *= 0.5
    return None, None


def _converged(f_old, f_new, tol):
    return abs(f_old - f_new) <= tol * (abs(f_old) + tol)


def _lbfgs(obj: _Scaled, x, cfg: OptimizerConfig, rep: OutcomeReport):
    f, g = obj.fg(x)
    S, Y = [], []
    for it in range(cfg.max_iterations):
        if np.max(np.abs(g)) <= cfg.grad_tol:
            rep.converged = True
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q /= max(1.0, np.linalg.norm(g))
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            b = (y @ q) / (y @ s)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:
            S.clear()
            Y.clear()
            d = -g / max(1.0, np.linalg.norm(g))
        x_new, _ = _armijo(obj, x, f, g, d)
        rep.iterations = it + 1
        if x_new is None:
            rep.line_search_failed = True
            rep.message = "line search failed; returning last accepted point"
            break
        f_new, g_new = obj.fg(x_new)
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > cfg.memory:
                S.pop(0)
                Y.pop(0)
        done = _converged(f, f_new, cfg.rel_tol)
        x, f, g = x_new, f_new, g_new
        if done:
            rep.converged = True
            break
    return x


def _newton(obj: _Scaled, x, cfg: OptimizerConfig, rep: OutcomeReport):
    f, g, H = obj.fgh(x)
    for it in range(cfg.max_iterations):
        if np.max(np.abs(g)) <= cfg.grad_tol:
            rep.converged = True
            break
        ridge = 0.0
        scale = max(1e-12, float(np.max(np.abs(np.diag(H)))))
        while True:
            try:
                L = np.linalg.cholesky(H + ridge * np.eye(H.shape[0]))
                break
            except np.linalg.LinAlgError:
                ridge = max(1e-10 * scale, ridge * 10.0)
        d = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        x_new, _ = _armijo(obj, x, f, g, d)
        rep.iterations = it + 1
        if x_new is None:
            rep.line_search_failed = True
            rep.message = "line search failed; returning last accepted point"
            break
        f_new, g_new, H_new = obj.fgh(x_new)
        done = _converged(f, f_new, cfg.rel_tol)
        x, f, g, H = x_new, f_new, g_new, H_new
        if done:
            rep.converged = True
            break
    return x


def maximize_outcome(beta0: np.ndarray, rows: WeightedRows, config: OptimizerConfig,
                     name: str = "") -> tuple[np.ndarray, OutcomeReport]:
    """Maximize one outcome's weighted Probit objective starting from ``beta0``."""
    rep = OutcomeReport(name)
    beta0 = np.array(beta0, dtype=float)
    if rows.total_weight <= 0:
        rep.converged = True
        rep.message = "no weighted transitions; coefficients unchanged"
        return beta0, rep
    counter = _Counter()
    q0 = weighted_probit(beta0, rows, order=0)
    counter.f += 1
    if not np.isfinite(q0):
        raise InitializationError(f"objective for '{name}' is not finite at the starting point")
    obj = _Scaled(rows, counter)
    x0 = obj.to_internal(beta0.copy())
    opt = _newton if config.method == NEWTON else _lbfgs
    x = opt(obj, x0, config, rep)
    beta = obj.to_external(x.copy())
    q1 = weighted_probit(beta, rows, order=0)
    counter.f += 1
    if not q1 > q0 + _Q_RESOLUTION * max(1.0, abs(q0)):
        # a gain inside rounding error is no move; keeps iterates from drifting on noise
        beta, q1 = beta0, q0
    rep.q_start, rep.q_end = q0, q1
    rep.q_evals, rep.grad_evals = counter.f, counter.g
    return beta, rep


def maximize_q(spec: ModelSpec, beta_init: ParamSet, rows: list[WeightedRows],
               config: OptimizerConfig) -> tuple[ParamSet, list[OutcomeReport]]:
    """One M-step: maximize every outcome's share of Q independently."""
    beta_init.check(spec)
    betas, reports = [], []
    for j in range(spec.J):
        b, rep = maximize_outcome(beta_init[j], rows[j], config, spec.names[j])
        if rep.line_search_failed:
            log.warning("M-step for '%s': %s", spec.names[j], rep.message)
        betas.append(b)
        reports.append(rep)
    return ParamSet(tuple(betas)), reports
