"""EM driver: initialization, adaptive replicate schedule, convergence."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConvergenceWarning, InitializationError
from .estep import NORMALIZED, run_estep
from .likelihood import WeightedRows
from .model import ModelSpec, OutcomeKind, ParamSet, Panel, covariate_values, propagate_absorbing
from .mstep import NEWTON, OptimizerConfig, maximize_outcome, maximize_q
from .oracle import Enumeration, EnumerationBudget

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    R_init: int = 10
    R_growth_factor: int = 10
    R_max: int = 1000
    opt_iter_init: int = 3
    opt_iter_growth: int = 10
    opt_iter_max: int = 300
    trigger_coefficient: float = 1.97e-4
    em_tolerance: float = 1e-4
    em_max_iterations: int = 200

    def __post_init__(self):
        for name in ("R_init", "R_growth_factor", "R_max", "opt_iter_init", "opt_iter_growth",
                     "opt_iter_max", "em_max_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.trigger_coefficient <= 0 or self.em_tolerance <= 0:
            raise ValueError("trigger_coefficient and em_tolerance must be positive")
        if self.R_init > self.R_max:
            raise ValueError("R_init exceeds R_max")
        if self.opt_iter_init > self.opt_iter_max:
            raise ValueError("opt_iter_init exceeds opt_iter_max")

    def threshold(self, R: int) -> float:
        return self.trigger_coefficient * math.sqrt(R)


@dataclass
class EmState:
    k: int
    beta: ParamSet
    R: int
    opt_iter: int
    seed: int
    q_history: list[tuple[int, float]] = field(default_factory=list)
    q_evals: int = 0
    grad_evals: int = 0


@dataclass
class EmResult:
    params: ParamSet
    state: EmState
    trace: list[dict]
    converged: bool
    degenerate: dict[int, list[str]] = field(default_factory=dict)


TRACE_COLUMNS = ["k", "Q", "q_gain", "R", "opt_iter", "q_evals", "grad_evals"]


def step_schedule(R: int, opt_iter: int, q_gain: float, config: ScheduleConfig) -> tuple[int, int]:
    """Grow the replicate count, then the optimizer cap, when Q stalls.

    A gain at or below ``c * sqrt(R)`` first multiplies R (up to ``R_max``);
    once R is at its cap the optimizer iteration cap is multiplied instead.
    """
    if q_gain > config.threshold(R):
        return R, opt_iter
    if R < config.R_max:
        return min(R * config.R_growth_factor, config.R_max), opt_iter
    return R, min(opt_iter * config.opt_iter_growth, config.opt_iter_max)


# ---------------------------------------------------------------------------
# Complete-case initialization
# ---------------------------------------------------------------------------

def complete_case_rows(spec: ModelSpec, panel: Panel, j: int) -> WeightedRows:
    """Transitions between consecutive observations of outcome j whose lagged
    dependencies are observed, treating the gap as a single step."""
    cells = panel.cells
    m = spec.mortality_index
    kind = spec.outcomes[j].kind
    deps = list(spec.dep_indices[j])
    cov = covariate_values(spec, panel.covariates, panel.start_year, panel.T)
    X, y = [], []
    for i in range(panel.n):
        times = np.flatnonzero(np.isin(cells[i, :, j], (0, 1)))
        for a, b in zip(times[:-1], times[1:]):
            lag = cells[i, a, deps]
            if np.any((lag != 0) & (lag != 1)):
                continue
            if kind is OutcomeKind.MORTALITY:
                if cells[i, a, m] != 0:
                    continue
            else:
                if cells[i, b, m] != 0:
                    continue
                if kind is OutcomeKind.ABSORBING and cells[i, a, j] != 0:
                    continue
            X.append(np.concatenate(([1.0], cov[i, b], lag.astype(float))))
            y.append(cells[i, b, j])
    if not X:
        return WeightedRows(np.zeros((0, spec.n_coef(j))), np.zeros(0), np.zeros(0))
    y = np.array(y, dtype=float)
    return WeightedRows(np.array(X), y, 1.0 - y)


SEPARATION_INDEX = 6.0


def initialize(spec: ModelSpec, panel: Panel) -> ParamSet:
    """Complete-case Probit fit of every outcome."""
    panel = propagate_absorbing(panel, spec)
    cfg = OptimizerConfig(method=NEWTON, max_iterations=200, rel_tol=1e-14)
    betas = []
    for j, name in enumerate(spec.names):
        rows = complete_case_rows(spec, panel, j)
        if rows.X.shape[0] == 0:
            raise InitializationError(
                f"outcome '{name}' has no complete-case transitions (never observed together with "
                f"its dependencies)")
        zero = np.zeros(spec.n_coef(j))
        if rows.w1.sum() == 0 or rows.w0.sum() == 0:
            warnings.warn(f"outcome '{name}': complete-case outcome is constant; starting from zero",
                          ConvergenceWarning, stacklevel=2)
            betas.append(zero)
            continue
        beta, rep = maximize_outcome(zero, rows, cfg, name)
        # separation drives fitted probabilities to 0 or 1; |z'b| > 6 means below 1e-9
        if not rep.converged or np.max(np.abs(rows.X @ beta)) > SEPARATION_INDEX:
            warnings.warn(f"outcome '{name}': complete-case fit separates the data; starting from zero",
                          ConvergenceWarning, stacklevel=2)
            beta = zero
        betas.append(beta)
    return ParamSet(tuple(betas))


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def run_em(spec: ModelSpec, panel: Panel, schedule: ScheduleConfig | None = None,
           optimizer: OptimizerConfig | None = None, seed: int = 0, *, exact: bool = False,
           budget: EnumerationBudget = EnumerationBudget(), convention: str = NORMALIZED,
           workers: int = 1, init: ParamSet | None = None, track_loglik: bool = False) -> EmResult:
    """Fit the transition model by Monte Carlo (or exact) EM.

    Each iteration draws fresh replicates at the current coefficients, runs a
    capped M-step, then updates the schedule from the change in Q.  Stops when
    ``|Q(b_{k+1}; b_k) - Q(b_k; b_{k-1})| < em_tolerance`` or at the safety
    cap.  With ``exact=True`` the E-step enumerates completions instead of
    sampling, and ``track_loglik`` records the exact observed-data
    log-likelihood of every iterate.
    """
    schedule = schedule or ScheduleConfig()
    optimizer = optimizer or OptimizerConfig()
    enum = Enumeration(spec, panel, budget) if exact or track_loglik else None
    propagated = propagate_absorbing(panel, spec)
    beta = (init or initialize(spec, propagated)).check(spec)
    state = EmState(0, beta, schedule.R_init, schedule.opt_iter_init, seed)
    trace: list[dict] = []
    degenerate: dict[int, list[str]] = {}
    converged = False
    prev_q = None
    executor = ProcessPoolExecutor(workers) if workers > 1 and not exact else None
    try:
        for k in range(schedule.em_max_iterations):
            state.k = k
            t0 = time.perf_counter()
            if exact:
                rows = enum.stats(state.beta)
            else:
                res = run_estep(spec, state.beta, propagated, state.R, seed, k, convention, executor)
                rows = res.rows
                if res.degenerate:
                    degenerate[k] = res.degenerate
            cfg = replace(optimizer, max_iterations=state.opt_iter)
            new_beta, reports = maximize_q(spec, state.beta, rows, cfg)
            q_new = math.fsum(r.q_end for r in reports)
            q_gain = float("nan") if prev_q is None else q_new - prev_q
            q_ev = sum(r.q_evals for r in reports)
            g_ev = sum(r.grad_evals for r in reports)
            state.q_evals += q_ev
            state.grad_evals += g_ev
            state.q_history.append((k, q_new))
            row = {"k": k, "Q": q_new, "q_gain": q_gain, "R": state.R, "opt_iter": state.opt_iter,
                   "q_evals": q_ev, "grad_evals": g_ev,
                   "beta_change": new_beta.max_abs_diff(state.beta)}
            if enum is not None and track_loglik:
                if k == 0:
                    row["loglik_start"] = enum.loglik(state.beta)
                row["loglik"] = enum.loglik(new_beta)
            state.beta = new_beta
            row["seconds"] = time.perf_counter() - t0
            trace.append(row)
            log.info("EM %d: Q=%.6f gain=%s R=%d opt_iter=%d", k, q_new, q_gain, state.R, state.opt_iter)
            if prev_q is not None:
                if abs(q_gain) < schedule.em_tolerance:
                    converged = True
                    break
                state.R, state.opt_iter = step_schedule(state.R, state.opt_iter, q_gain, schedule)
            prev_q = q_new
    finally:
        if executor is not None:
            executor.shutdown()
    if not converged:
        warnings.warn(f"EM stopped at the safety cap of {schedule.em_max_iterations} iterations",
                      ConvergenceWarning, stacklevel=2)
    return EmResult(state.beta, state, trace, converged, degenerate)


def write_trace(trace: list[dict], path, timing_path=None) -> None:
    """Trace CSV (deterministic columns); wall times go to ``timing_path``."""
    extra = [c for c in ("loglik",) if trace and c in trace[0]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS + extra)
        for row in trace:
            w.writerow([_fmt(row[c]) for c in TRACE_COLUMNS + extra])
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "seconds"])
            for row in trace:
                w.writerow([row["k"], repr(row["seconds"])])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
