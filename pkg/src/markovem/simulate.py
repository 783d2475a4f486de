"""Forward and bridge simulation from a fitted transition model.

Both reuse the E-step sweep: a forward run is a record whose cells after the
start are all missing, and a bridge run additionally carries the observed end
state, so the sweep's weight is exactly the probability of the observed end
cells given the simulated history.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DataError, InfeasibleBridgeError
from .estep import log_normalize, sweep
from .model import MISSING, ModelSpec, ParamSet, covariate_values, make_panel, propagate_absorbing
from .rng import BRIDGE, FORWARD, RngStream

FORWARD_MODE = "forward"
BRIDGE_MODE = "bridge"


@dataclass(frozen=True)
class SimulationConfig:
    M: int
    horizon: int
    seed: int = 0
    mode: str = FORWARD_MODE
    start_time: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.horizon <= self.start_time:
            raise ValueError("horizon must be after the start time")
        if self.mode not in (FORWARD_MODE, BRIDGE_MODE):
            raise ValueError(f"unknown simulation mode {self.mode!r}")


@dataclass(frozen=True, eq=False)
class BridgeResult:
    trajectories: np.ndarray  # (M, T, J), times 1..T
    bridge_weight: np.ndarray  # (M,) probability of the observed end cells
    norm_weight: np.ndarray  # (M,)

    @property
    def ess(self) -> float:
        """Effective sample size ``1 / sum(normalized weight ** 2)``."""
        return float(1.0 / np.sum(self.norm_weight ** 2))


def _spec_for(spec: ModelSpec, T: int) -> ModelSpec:
    from dataclasses import replace

    return replace(spec, time_steps=T)


def _run(spec, params, covariates, start_year, cells, uniforms):
    T = cells.shape[0]
    cov = covariate_values(spec, np.asarray(covariates, float)[None], start_year, T)
    return sweep(spec, params, cells[None], cov, np.array([0]), uniforms[None])


def simulate_forward(spec: ModelSpec, params: ParamSet, initial_state, config: SimulationConfig,
                     covariates=(), start_year: int | None = None, individual: int = 0) -> np.ndarray:
    """M trajectories ``(M, horizon - start_time + 1, J)`` starting from a complete state.

    Time index 0 of the result is ``config.start_time``.  Absorbed outcomes
    stay at 1; after death every cell is ``DEAD``.
    """
    params.check(spec)
    state = np.asarray(initial_state)
    if state.shape != (spec.J,) or np.any((state != 0) & (state != 1)):
        raise ContractError("initial state must be a complete 0/1 vector over all outcomes")
    if state[spec.mortality_index] == 1:
        raise ContractError("initial state is already dead")
    T = config.horizon - config.start_time + 1
    cells = np.full((T, spec.J), MISSING, dtype=np.int8)
    cells[0] = state
    sy = spec.start_year if start_year is None else start_year
    sy += config.start_time - 1
    U = RngStream(config.seed).uniforms((config.M, T, spec.J), FORWARD, individual)
    traj, _ = _run(_spec_for(spec, T), params, covariates, sy, cells, U)
    return traj[0]


def simulate_bridge(spec: ModelSpec, params: ParamSet, start_state, end_state, config: SimulationConfig,
                    covariates=(), start_year: int | None = None, individual: int = 0) -> BridgeResult:
    """Simulate times 2..T-1 given a complete start at t=1 and observed end cells at T.

    ``end_state`` uses ``MISSING`` (or ``None``) for unobserved end cells.
    The weight of replicate m is the probability of the observed end cells
    given its state at T-1.  Raises ``InfeasibleBridgeError`` if no replicate
    can reach the end state.
    """
    params.check(spec)
    T = config.horizon
    if T < 3:
        raise ContractError("a bridge needs at least one intermediate time (T >= 3)")
    start = np.asarray(start_state)
    if start.shape != (spec.J,) or np.any((start != 0) & (start != 1)):
        raise ContractError("start state must be a complete 0/1 vector")
    end = np.array([MISSING if v is None else v for v in end_state], dtype=np.int8)
    if end.shape != (spec.J,):
        raise ContractError("end state must have one entry per outcome")
    sspec = _spec_for(spec, T)
    cells = np.full((T, spec.J), MISSING, dtype=np.int8)
    cells[0] = start
    cells[-1] = end
    sy = spec.start_year if start_year is None else start_year
    try:
        panel = propagate_absorbing(make_panel(sspec, ["bridge"], np.asarray(covariates, float)[None],
                                               cells[None], sy), sspec)
    except DataError as exc:
        raise InfeasibleBridgeError(f"end state unreachable from start state: {exc}") from exc
    U = RngStream(config.seed).uniforms((config.M, T, spec.J), BRIDGE, individual)
    traj, log_w = _run(sspec, params, covariates, sy, panel.cells[0], U)
    log_w = log_w[0]
    if not np.any(np.isfinite(log_w)) or np.max(log_w) < -745.0:
        raise InfeasibleBridgeError("every bridge replicate has zero weight; end state unreachable")
    res = BridgeResult(traj[0], np.exp(log_w), log_normalize(log_w))
    if res.ess < 0.01 * config.M:
        warnings.warn(f"bridge weights are degenerate (ESS {res.ess:.1f} of {config.M}); "
                      "weighted estimates may be biased", RuntimeWarning, stacklevel=2)
    return res


def weighted_estimate(result: BridgeResult, statistic: Callable[[np.ndarray], float]) -> float:
    """Self-normalized weighted average of ``statistic(path)`` over replicates."""
    if not np.sum(result.bridge_weight) > 0:
        raise InfeasibleBridgeError("total bridge weight is zero")
    vals = np.array([statistic(p) for p in result.trajectories], dtype=float)
    w = result.norm_weight
    return float(np.sum(w * vals) / np.sum(w))


def write_trajectories(path, spec: ModelSpec, rows) -> None:
    """Trajectory CSV: one row per (individual, replicate, time).

    ``rows`` yields ``(id, trajectories (M, T, J), first_time, weights or None, ess or None)``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["id", "m", "time", *spec.names]
        bridge = None
        for pid, traj, t0, weights, ess in rows:
            if bridge is None:
                bridge = weights is not None
                w.writerow(header + (["weight", "norm_weight", "ess"] if bridge else []))
            norm = None if weights is None else weights / np.sum(weights)
            for m in range(traj.shape[0]):
                for t in range(traj.shape[1]):
                    cells = ["NA" if v < 0 else int(v) for v in traj[m, t]]
                    extra = [repr(float(weights[m])), repr(float(norm[m])), repr(float(ess))] if bridge else []
                    w.writerow([pid, m, t0 + t, *cells, *extra])
