"""Weighted sufficient statistics of imputed trajectories.

The weighted complete-data log-likelihood only depends on how much weight
each distinct (design row, outcome value) pair carries.  A design row is
fully determined by the individual's covariate group, the time step and the
lagged dependency bits, so trajectories are folded into integer keys and
summed with ``bincount``.  Chunks are merged in the order they were added,
which keeps sums bitwise reproducible for a fixed chunking.
"""

from __future__ import annotations

import numpy as np

from .likelihood import WeightedRows
from .model import ModelSpec, OutcomeKind, Panel, covariate_groups, covariate_values

FULL_STATE_MAX = 12  # encode the whole lagged state once when J is small


def _sub_codes(spec: ModelSpec) -> list[np.ndarray]:
    """Per outcome, map a full-state bit code to its dependency bit code."""
    full = np.arange(1 << spec.J)
    out = []
    for deps in spec.dep_indices:
        code = np.zeros_like(full)
        for k, dj in enumerate(deps):
            code |= ((full >> dj) & 1) << k
        out.append(code.astype(np.intp))
    return out


class StatsAccumulator:
    def __init__(self, spec: ModelSpec, panel: Panel):
        self.spec = spec
        self.T = panel.T
        self.start_year = panel.start_year
        self.group_cov, self.groups = covariate_groups(panel.covariates)
        self._chunks: list[list[tuple[np.ndarray, np.ndarray, np.ndarray]]] = [[] for _ in range(spec.J)]
        for j in range(spec.J):
            if len(spec.dep_indices[j]) > 40:
                raise ValueError("too many dependencies to key design rows")

    def add(self, individuals, traj: np.ndarray, weights: np.ndarray, starts: np.ndarray) -> None:
        """Fold trajectories ``(m, R, T, J)`` with weights ``(m, R)`` into the totals."""
        self.merge(chunk_stats(self.spec, traj, weights, starts, self.groups[np.asarray(individuals)], self.T))

    def merge(self, chunk) -> None:
        for j, part in enumerate(chunk):
            if part[0].size:
                self._chunks[j].append(part)

    def rows(self) -> list[WeightedRows]:
        out = []
        for j in range(self.spec.J):
            keys, w1, w0 = _combine(self._chunks[j])
            out.append(WeightedRows(self._decode(j, keys), w1, w0))
        return out

    def _decode(self, j: int, keys: np.ndarray) -> np.ndarray:
        d = len(self.spec.dep_indices[j])
        bits = keys % (1 << d)
        rest = keys >> d
        t = rest % self.T
        g = rest // self.T
        C = len(self.spec.covariates)
        X = np.empty((keys.size, 1 + C + d))
        X[:, 0] = 1.0
        if C:
            cov = covariate_values(self.spec, self.group_cov, self.start_year, self.T)
            X[:, 1:1 + C] = cov[g, t]
        for k in range(d):
            X[:, 1 + C + k] = (bits >> k) & 1
        return X


def _combine(parts):
    if not parts:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    keys = np.concatenate([p[0] for p in parts])
    w1 = np.concatenate([p[1] for p in parts])
    w0 = np.concatenate([p[2] for p in parts])
    uniq, inv = np.unique(keys, return_inverse=True)
    return uniq, np.bincount(inv, w1, uniq.size), np.bincount(inv, w0, uniq.size)


def chunk_stats(spec: ModelSpec, traj: np.ndarray, weights: np.ndarray, starts: np.ndarray,
                groups: np.ndarray, T: int):
    """Per-outcome ``(keys, w1, w0)`` for one chunk of trajectories."""
    traj = np.asarray(traj)
    m = spec.mortality_index
    prev = traj[:, :, :-1, :]
    now = traj[:, :, 1:, :]
    tt = np.arange(1, T)
    live = (starts[:, None, None] >= 0) & (tt[None, None, :] > starts[:, None, None])
    live = live & (weights[:, :, None] != 0)
    n = traj.shape[0]
    local = np.arange(n, dtype=np.int64)[:, None, None] * T + tt[None, None, :]
    w = np.broadcast_to(weights[:, :, None], live.shape)
    state = sub = None
    if spec.J <= FULL_STATE_MAX:
        sub = _sub_codes(spec)
        state = np.zeros(prev.shape[:-1], dtype=np.int64)
        for j in range(spec.J):
            state |= (prev[..., j] == 1).astype(np.int64) << j
    out = []
    for j in range(spec.J):
        kind = spec.outcomes[j].kind
        if kind is OutcomeKind.MORTALITY:
            active = live & (prev[..., m] == 0)
        else:
            active = live & (now[..., m] == 0)
            if kind is OutcomeKind.ABSORBING:
                active = active & (prev[..., j] == 0)
        deps = spec.dep_indices[j]
        d = len(deps)
        if state is not None:
            key = (local << d) | sub[j][state]
        else:
            key = np.broadcast_to(local << d, active.shape)
            for k, dj in enumerate(deps):
                key = key | ((prev[..., dj] == 1).astype(np.int64) << k)
        ka = key[active]
        if ka.size == 0:
            out.append((ka, np.zeros(0), np.zeros(0)))
            continue
        ya = now[..., j][active]
        wa = w[active]
        # dense bins over (individual, time, bits) within the chunk, then regroup
        size = (n * T) << d
        hit = np.flatnonzero(np.bincount(ka, minlength=size))
        w1 = np.bincount(ka, np.where(ya == 1, wa, 0.0), size)[hit]
        w0 = np.bincount(ka, np.where(ya == 0, wa, 0.0), size)[hit]
        rest = hit >> d
        gkey = ((groups[rest // T].astype(np.int64) * T + rest % T) << d) | (hit & ((1 << d) - 1))
        uniq, inv = np.unique(gkey, return_inverse=True)
        out.append((uniq, np.bincount(inv, w1, uniq.size), np.bincount(inv, w0, uniq.size)))
    return out
