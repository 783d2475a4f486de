"""Importance-sampling E-step: impute missing cells, weight observed ones.

For every replicate the sweep moves forward in time.  At each step mortality
is handled first: a missing value is drawn from its transition probability
(the draw is the proposal), an observed value adds its log-probability to the
replicate's log-weight.  A replicate that dies is truncated.  Surviving
replicates then treat every other outcome the same way; because outcomes are
conditionally independent given the previous state, the order does not
matter and is fixed only for reproducibility.

The weight of replicate r is the product of the probabilities of the observed
cells given the imputed history, so the self-normalized weighted replicates
target the distribution of the missing cells given all observed cells.
"""

from __future__ import annotations

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateIndividualError
from .likelihood import linear_index
from .model import (DEAD, MISSING, IndividualRecord, ModelSpec, OutcomeKind, ParamSet, Panel,
                    covariate_values, effective_starts)
from .probit import _cdf, _log_ndtr
from .rng import ESTEP, RngStream
from .stats import FULL_STATE_MAX, StatsAccumulator, _sub_codes, chunk_stats

log = logging.getLogger(__name__)

NORMALIZED = "normalized"
RAW = "raw"

SHARD_ROWS = 16384


@dataclass(frozen=True, eq=False)
class ReplicateSet:
    id: str
    trajectories: np.ndarray  # (R, T, J)
    log_weight: np.ndarray  # (R,)
    norm_weight: np.ndarray  # (R,)

    @property
    def R(self) -> int:
        return self.trajectories.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.norm_weight ** 2))

    def to_csv(self, path, spec: ModelSpec) -> None:
        """Debug dump: one row per (replicate, time) with the replicate log-weight."""
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["r", "time", *spec.names, "log_weight", "norm_weight"])
            for r in range(self.R):
                for t in range(self.trajectories.shape[1]):
                    cells = ["NA" if v < 0 else int(v) for v in self.trajectories[r, t]]
                    w.writerow([r, t + 1, *cells, repr(float(self.log_weight[r])),
                                repr(float(self.norm_weight[r]))])


def log_normalize(log_w: np.ndarray) -> np.ndarray:
    """Row-wise ``exp(lw - logsumexp(lw))`` with the max subtracted first.

    Rows whose entries are all ``-inf`` come back as NaN.
    """
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(log_w - top)
        return e / np.sum(e, axis=-1, keepdims=True)


def normalize_weights(rs: ReplicateSet) -> ReplicateSet:
    if not np.any(np.isfinite(rs.log_weight)):
        raise DegenerateIndividualError(f"individual {rs.id}: every replicate has zero weight")
    return ReplicateSet(rs.id, rs.trajectories, rs.log_weight, log_normalize(rs.log_weight))


def _bit_table(d: int) -> np.ndarray:
    """``(1, 2**d, d)`` lag values; row c holds the bits of c."""
    c = np.arange(1 << d)
    return ((c[:, None] >> np.arange(d)[None, :]) & 1).astype(float)[None]


def sweep(spec: ModelSpec, params: ParamSet, cells: np.ndarray, cov: np.ndarray, starts: np.ndarray,
          uniforms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Impute and weight a batch of individuals.

    Parameters
    ----------
    cells : (m, T, J) int8
        Propagated panel cells.
    cov : (m, T, C)
        Covariate values by time.
    starts : (m,)
        0-based effective start per individual, -1 to skip.
    uniforms : (m, R, T, J)
        Draw for coordinate (individual, replicate, time, outcome).

    Returns
    -------
    traj : (m, R, T, J) int8 completed cells
    log_w : (m, R) replicate log-weights
    """
    m_, R, T, J = uniforms.shape
    sub_codes = _sub_codes(spec) if J <= FULL_STATE_MAX else None
    mort = spec.mortality_index
    traj = np.repeat(cells[:, None], R, axis=1)
    log_w = np.zeros((m_, R))
    alive = np.broadcast_to((starts >= 0)[:, None], (m_, R)).copy()
    death = np.full((m_, R), T)
    for t in range(1, T):
        act = alive & (t > starts)[:, None]
        if not act.any():
            continue
        prev = traj[:, :, t - 1, :]
        state = None
        if J <= FULL_STATE_MAX:
            state = np.zeros((m_, R), dtype=np.intp)
            for j in range(J):
                state |= (prev[:, :, j] == 1).astype(np.intp) << j
        obs_now = cells[:, t, :]

        def step(j, rows):
            # eta takes at most 2**len(deps) values per individual: tabulate, then gather
            deps = spec.dep_indices[j]
            if state is not None:
                code = sub_codes[j][state]
            else:
                code = np.zeros(rows.shape, dtype=np.intp)
                for k, dj in enumerate(deps):
                    code |= (prev[:, :, dj] == 1).astype(np.intp) << k
            eta = linear_index(params[j], cov[:, None, t, :], _bit_table(len(deps)))
            obs = obs_now[:, j][:, None]
            miss = rows & (obs == MISSING)
            seen = rows & ((obs == 0) | (obs == 1))
            if miss.any():
                draw = uniforms[:, :, t, j] < np.take_along_axis(_cdf(eta), code, axis=1)
                traj[:, :, t, j] = np.where(miss, draw, traj[:, :, t, j])
            if seen.any():
                signed = np.where(obs == 1, eta, -eta)
                return np.where(seen, np.take_along_axis(_log_ndtr(signed), code, axis=1), 0.0)
            return 0.0

        log_w = log_w + step(mort, act)
        died = act & (traj[:, :, t, mort] == 1)
        if died.any():
            others = list(spec.others)
            sub = traj[:, :, t, :]
            sub[..., others] = np.where(died[..., None], DEAD, sub[..., others])
            death[died] = t
            alive = alive & ~died
        live = act & ~died
        for j in spec.others:
            rows = live
            if spec.outcomes[j].kind is OutcomeKind.ABSORBING:
                absorbed = live & (prev[:, :, j] == 1)
                if absorbed.any():
                    code = obs_now[:, j][:, None]
                    traj[:, :, t, j] = np.where(absorbed & (code == MISSING), 1, traj[:, :, t, j])
                    log_w = np.where(absorbed & (code == 0), -np.inf, log_w)
                rows = live & ~absorbed
            log_w = log_w + step(j, rows)
    after = np.arange(T)[None, None, :] > death[:, :, None]
    if after.any():
        traj[after] = DEAD
    return traj, log_w


def _draws(rng: RngStream, iteration: int, individuals, R: int, T: int, J: int) -> np.ndarray:
    return np.stack([rng.uniforms((R, T, J), ESTEP, iteration, int(i)) for i in individuals])


def impute_individual(spec: ModelSpec, params_k: ParamSet, record: IndividualRecord, R: int,
                      rng: RngStream, iteration: int = 0, index: int = 0) -> ReplicateSet:
    """R weighted completions of one (propagated) record.

    ``index`` is the individual's stream coordinate; pass its panel row to get
    the same draws as a full-panel E-step.
    """
    cells = np.asarray(record.cells)[None]
    T, J = cells.shape[1:]
    one = Panel((record.id,), np.asarray(record.covariates)[None], cells, record.start_year)
    starts = effective_starts(one, spec)
    cov = covariate_values(spec, one.covariates, record.start_year, T)
    U = _draws(rng, iteration, [index], R, T, J)
    traj, log_w = sweep(spec, params_k, cells, cov, starts, U)
    return normalize_weights(ReplicateSet(record.id, traj[0], log_w[0], np.full(R, np.nan)))


@dataclass
class EStepResult:
    rows: list  # WeightedRows per outcome
    degenerate: list[str] = field(default_factory=list)
    mean_ess: float = float("nan")
    replicates: list[ReplicateSet] | None = None


def _shard_job(args):
    (spec, params, cells, cov, starts, groups, index, ids, R, seed, iteration, convention, keep) = args
    T, J = cells.shape[1:]
    U = _draws(RngStream(seed), iteration, index, R, T, J)
    traj, log_w = sweep(spec, params, cells, cov, starts, U)
    finite = np.isfinite(log_w).any(axis=1)
    usable = finite & (starts >= 0)
    degenerate = [ids[i] for i in np.flatnonzero(~finite & (starts >= 0))]
    norm = log_normalize(np.where(usable[:, None], log_w, 0.0))
    if convention == RAW:
        weights = np.exp(log_w)
    else:
        weights = norm
    weights = np.where(usable[:, None], weights, 0.0)
    st = np.where(usable, starts, -1)
    chunk = chunk_stats(spec, traj, weights, st, groups, T)
    ess = 1.0 / np.sum(norm[usable] ** 2, axis=1)
    reps = None
    if keep:
        reps = [ReplicateSet(ids[i], traj[i], log_w[i], norm[i]) for i in range(len(ids))]
    return chunk, degenerate, ess, reps


def shard_bounds(n: int, R: int) -> list[tuple[int, int]]:
    """Fixed shards of whole individuals; depends only on ``n`` and ``R``."""
    size = max(1, SHARD_ROWS // max(1, R))
    return [(a, min(n, a + size)) for a in range(0, n, size)]


def run_estep(spec: ModelSpec, params: ParamSet, panel: Panel, R: int, seed: int, iteration: int,
              convention: str = NORMALIZED, executor: Executor | None = None,
              keep_replicates: bool = False) -> EStepResult:
    """E-step over a propagated panel.

    Work is split into fixed shards of individuals.  Shards may run on an
    executor; their statistics are merged in shard order, so the result is
    identical for any number of workers.
    """
    if convention not in (NORMALIZED, RAW):
        raise ValueError(f"unknown weight convention {convention!r}")
    starts = effective_starts(panel, spec)
    cov = covariate_values(spec, panel.covariates, panel.start_year, panel.T)
    acc = StatsAccumulator(spec, panel)
    jobs = []
    for a, b in shard_bounds(panel.n, R):
        jobs.append((spec, params, np.asarray(panel.cells[a:b]), cov[a:b], starts[a:b], acc.groups[a:b],
                     np.arange(a, b), panel.ids[a:b], R, seed, iteration, convention, keep_replicates))
    results = executor.map(_shard_job, jobs) if executor is not None else map(_shard_job, jobs)
    degenerate: list[str] = []
    ess_parts = []
    reps: list[ReplicateSet] | None = [] if keep_replicates else None
    for chunk, deg, ess, rs in results:
        acc.merge(chunk)
        degenerate.extend(deg)
        ess_parts.append(ess)
        if keep_replicates:
            reps.extend(rs)
    if degenerate:
        log.warning("E-step %d: %d degenerate individual(s) excluded: %s", iteration, len(degenerate),
                    ", ".join(degenerate[:10]))
    ess_all = np.concatenate(ess_parts) if ess_parts else np.zeros(0)
    return EStepResult(acc.rows(), degenerate, float(ess_all.mean()) if ess_all.size else float("nan"), reps)
