"""Exact computations by enumerating every completion of the missing cells.

Only usable on small instances; everything here is ground truth for tests.
Completions are generated time step by time step: a missing mortality cell
branches into "alive" and "dead" (death ends the enumeration for that
branch), an absorbing outcome that is already 1 stays 1, and every other
missing cell branches into 0 and 1.  Completions therefore do not depend on
the parameters and are built once per panel.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceededError, ConvergenceWarning
from .likelihood import trajectory_loglik, weighted_probit
from .model import (DEAD, MISSING, IndividualRecord, ModelSpec, OutcomeKind, ParamSet, Panel,
                    covariate_values, effective_starts, propagate_absorbing)
from .stats import StatsAccumulator


@dataclass(frozen=True)
class EnumerationBudget:
    max_missing_cells: int = 20

    @property
    def max_completions(self) -> int:
        return 2 ** self.max_missing_cells


def _logsumexp(v: np.ndarray) -> float:
    top = float(np.max(v))
    if not np.isfinite(top):
        return top
    return top + math.log(float(np.sum(np.exp(v - top))))


def enumerate_completions(spec: ModelSpec, cells: np.ndarray, start: int) -> np.ndarray:
    """All completions ``(K, T, J)`` of one propagated record's missing cells."""
    T, J = cells.shape
    if start < 0:
        return cells[None].copy()
    m = spec.mortality_index
    out = []

    def rec(t, cur):
        if t == T:
            out.append(cur)
            return
        code = cells[t, m]
        choices = (0, 1) if code == MISSING else (int(code),)
        for mv in choices:
            nxt = cur.copy()
            nxt[t, m] = mv
            if mv == 1:
                nxt[t, list(spec.others)] = DEAD
                nxt[t + 1:, :] = DEAD
                out.append(nxt)
                continue
            slots, options = [], []
            for j in spec.others:
                c = cells[t, j]
                if c != MISSING:
                    continue
                slots.append(j)
                if spec.outcomes[j].kind is OutcomeKind.ABSORBING and nxt[t - 1, j] == 1:
                    options.append((1,))
                else:
                    options.append((0, 1))
            for combo in itertools.product(*options):
                branch = nxt.copy()
                branch[t, slots] = combo
                rec(t + 1, branch)

    rec(start + 1, cells.copy())
    return np.stack(out)


def _count_missing(cells: np.ndarray, start: int) -> int:
    if start < 0:
        return 0
    return int(np.sum(cells[start + 1:] == MISSING))


@dataclass(frozen=True, eq=False)
class ExactPosterior:
    id: str
    trajectories: np.ndarray  # (K, T, J)
    log_joint: np.ndarray  # (K,) complete-data log-likelihood of each completion
    probs: np.ndarray  # (K,) conditional probability given the observed cells

    @property
    def log_marginal(self) -> float:
        return _logsumexp(self.log_joint)


class Enumeration:
    """Cached completions of every individual in a panel."""

    def __init__(self, spec: ModelSpec, panel: Panel, budget: EnumerationBudget = EnumerationBudget()):
        self.spec = spec
        self.panel = propagate_absorbing(panel, spec)
        self.starts = effective_starts(self.panel, spec)
        self.cov = covariate_values(spec, self.panel.covariates, self.panel.start_year, self.panel.T)
        self.completions = []
        for i in range(self.panel.n):
            k = _count_missing(self.panel.cells[i], self.starts[i])
            if k > budget.max_missing_cells:
                raise BudgetExceededError(
                    f"individual {self.panel.ids[i]} has {k} missing cells; enumeration budget "
                    f"is {budget.max_missing_cells}")
            self.completions.append(enumerate_completions(spec, self.panel.cells[i], int(self.starts[i])))

    def log_joints(self, params: ParamSet) -> list[np.ndarray]:
        out = []
        for i, comp in enumerate(self.completions):
            K = comp.shape[0]
            lj = trajectory_loglik(self.spec, params, comp, np.repeat(self.cov[i:i + 1], K, axis=0),
                                   np.full(K, self.starts[i]), strict=False)
            out.append(lj)
        return out

    def loglik(self, params: ParamSet) -> float:
        return math.fsum(_logsumexp(lj) for lj in self.log_joints(params))

    def posteriors(self, params: ParamSet) -> list[ExactPosterior]:
        out = []
        for i, lj in enumerate(self.log_joints(params)):
            keep = np.isfinite(lj)
            lj_k = lj[keep]
            probs = np.exp(lj_k - _logsumexp(lj_k))
            probs = probs / probs.sum()
            out.append(ExactPosterior(self.panel.ids[i], self.completions[i][keep], lj_k, probs))
        return out

    def stats(self, params: ParamSet) -> list:
        """Exact conditional-expectation statistics (the exact E-step)."""
        acc = StatsAccumulator(self.spec, self.panel)
        for i, post in enumerate(self.posteriors(params)):
            acc.add([i], post.trajectories[None], post.probs[None], self.starts[i:i + 1])
        return acc.rows()

    def score(self, params: ParamSet) -> list[np.ndarray]:
        """Gradient of the observed-data log-likelihood, one block per outcome.

        Uses the identity: observed score = conditional expectation of the
        complete-data score at the same parameters.
        """
        rows = self.stats(params)
        return [weighted_probit(params[j], rows[j])[1] for j in range(self.spec.J)]


def exact_observed_loglik(spec: ModelSpec, params: ParamSet, panel: Panel,
                          budget: EnumerationBudget = EnumerationBudget()) -> float:
    """Observed-data log-likelihood: per individual, log of the summed
    probability of every completion of the missing cells."""
    params.check(spec)
    return Enumeration(spec, panel, budget).loglik(params)


def exact_estep(spec: ModelSpec, params_k: ParamSet, record: IndividualRecord,
                budget: EnumerationBudget = EnumerationBudget()) -> ExactPosterior:
    """Exact conditional distribution of one record's missing cells."""
    one = Panel((record.id,), np.asarray(record.covariates)[None], np.asarray(record.cells)[None],
                record.start_year)
    return Enumeration(spec, one, budget).posteriors(params_k)[0]


@dataclass
class MLEResult:
    params: ParamSet
    loglik: float
    iterations: int
    converged: bool
    max_score: float
    fd_check: list[float] = field(default_factory=list)


def _fd_score(enum: Enumeration, params: ParamSet, h: float = 1e-5) -> np.ndarray:
    flat = params.flat()
    sizes = [len(b) for b in params.betas]
    out = np.empty_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        out[k] = (enum.loglik(_unflat(flat + e, sizes)) - enum.loglik(_unflat(flat - e, sizes))) / (2 * h)
    return out


def _unflat(flat, sizes) -> ParamSet:
    return ParamSet(tuple(np.split(np.asarray(flat, float), np.cumsum(sizes)[:-1])))


def _rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def direct_mle(spec: ModelSpec, panel: Panel, budget: EnumerationBudget = EnumerationBudget(),
               init: ParamSet | None = None, tol: float = 1e-11, max_iterations: int = 200) -> MLEResult:
    """Maximize the exact observed-data log-likelihood by Newton's method.

    The score is exact (via the conditional expectation identity) and is
    checked against central differences of the log-likelihood at the start
    and at the optimum.  The Hessian is the central difference of the score.
    """
    enum = Enumeration(spec, panel, budget)
    params = (init or ParamSet.zeros(spec)).check(spec)
    sizes = [spec.n_coef(j) for j in range(spec.J)]
    x = params.flat()

    def score(v):
        return np.concatenate(enum.score(_unflat(v, sizes)))

    fd = [_rel_err(score(x), _fd_score(enum, params))]
    ll = enum.loglik(params)
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        g = score(x)
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        h = 1e-6
        H = np.empty((x.size, x.size))
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = h
            H[:, k] = (score(x + e) - score(x - e)) / (2 * h)
        H = 0.5 * (H + H.T)
        ridge = 0.0
        while True:
            try:
                L = np.linalg.cholesky(-H + ridge * np.eye(x.size))
                break
            except np.linalg.LinAlgError:
                ridge = max(1e-8, ridge * 10)
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        t = 1.0
        while t > 1e-10:
            cand = x + t * step
            ll_c = enum.loglik(_unflat(cand, sizes))
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        x, ll = cand, ll_c
        if np.max(np.abs(t * step)) < 1e-12:
            converged = True
            break
    params = _unflat(x, sizes)
    fd.append(_rel_err(score(x), _fd_score(enum, params)))
    if not converged:
        import warnings

        warnings.warn("direct_mle did not converge", ConvergenceWarning, stacklevel=2)
    return MLEResult(params, enum.loglik(params), it, converged, float(np.max(np.abs(score(x)))), fd)
