"""Synthetic panels from a known model, and missingness applied to them.

Masks are built from the panel's shape, the mechanism and the random stream
only.  ``Mechanism.observed`` never sees a cell value, so every plan is
missing at random by construction.
"""

from __future__ import annotations

import csv
import json
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .estep import sweep
from .model import (DEAD, MISSING, ModelSpec, OutcomeKind, ParamSet, Panel, covariate_values,
                    make_panel)
from .rng import GENERATE, INITIAL, MASK, RngStream

BLOCK = 4096


def _block_uniforms(rng: RngStream, purpose: int, key: int, n: int, tail: tuple) -> np.ndarray:
    """(n, *tail) uniforms in fixed blocks of individuals."""
    parts = [rng.uniforms((min(BLOCK, n - a), *tail), purpose, key, a // BLOCK) for a in range(0, n, BLOCK)]
    return np.concatenate(parts) if parts else np.zeros((0, *tail))


# ---------------------------------------------------------------------------
# Complete panels
# ---------------------------------------------------------------------------

@dataclass
class InitialDistribution:
    """Independent draws of the state at t=1 and of the fixed covariates.

    ``prevalence`` maps outcome name to P(outcome = 1 at t=1) (default 0.1;
    mortality is always 0).  Age covariates get a birth year uniform on
    ``birth_years`` (inclusive); other covariates are 0/1 indicators with
    P(1) from ``indicator_prob`` (default 0.5).
    """

    prevalence: dict[str, float] = field(default_factory=dict)
    birth_years: tuple[int, int] = (1930, 1950)
    indicator_prob: dict[str, float] = field(default_factory=dict)
    default_prevalence: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InitialDistribution":
        d = dict(d)
        if "birth_years" in d:
            d["birth_years"] = tuple(d["birth_years"])
        return cls(**d)


def generate_panel(spec: ModelSpec, true_params: ParamSet, n: int,
                   init: InitialDistribution | None = None, seed: int = 0) -> Panel:
    """n independent complete trajectories from the model with ``true_params``."""
    true_params.check(spec)
    init = init or InitialDistribution()
    rng = RngStream(seed)
    T, J, C = spec.T, spec.J, len(spec.covariates)
    u0 = _block_uniforms(rng, INITIAL, 0, n, (J + C,))
    cov = np.empty((n, C))
    lo, hi = init.birth_years
    for c, cd in enumerate(spec.covariates):
        u = u0[:, J + c]
        if cd.kind == "age":
            cov[:, c] = lo + np.floor(u * (hi - lo + 1))
        else:
            cov[:, c] = (u < init.indicator_prob.get(cd.name, 0.5)).astype(float)
    cells = np.full((n, T, J), MISSING, dtype=np.int8)
    for j, o in enumerate(spec.outcomes):
        p = 0.0 if o.kind is OutcomeKind.MORTALITY else init.prevalence.get(o.name, init.default_prevalence)
        cells[:, 0, j] = u0[:, j] < p
    U = _block_uniforms(rng, GENERATE, 0, n, (T, J))[:, None]
    cv = covariate_values(spec, cov, spec.start_year, T)
    traj, _ = sweep(spec, true_params, cells, cv, np.zeros(n, dtype=int), U)
    return make_panel(spec, [f"i{i:06d}" for i in range(n)], cov, traj[:, 0], spec.start_year)


# ---------------------------------------------------------------------------
# Missingness mechanisms
# ---------------------------------------------------------------------------

class Mechanism:
    """Base class: ``observed`` returns a boolean (n, T, J) mask."""

    kind = ""

    def observed(self, n: int, T: int, names: Sequence[str], u) -> np.ndarray:
        raise NotImplementedError

    def needs_uniforms(self) -> tuple:
        """Per-individual uniform shape (without n) given (T, J); () if deterministic."""
        return ()

    def to_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self)}

    def key(self) -> int:
        return zlib.crc32(json.dumps(self.to_dict(), sort_keys=True).encode())


def _outcome_mask(names, outcomes) -> np.ndarray:
    if outcomes is None:
        return np.ones(len(names), dtype=bool)
    unknown = set(outcomes) - set(names)
    if unknown:
        raise ValueError(f"unknown outcomes in missingness plan: {sorted(unknown)}")
    return np.array([nm in outcomes for nm in names])


def _check_rate(x, what):
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"{what} must be in [0, 1], got {x}")


@dataclass
class CoarseSpacing(Mechanism):
    """Waves every ``period`` steps starting at t=1; nothing in between."""

    period: int
    kind = "coarse_spacing"

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")

    def observed(self, n, T, names, u):
        times = (np.arange(T) % self.period) == 0
        return np.broadcast_to(times[None, :, None], (n, T, len(names))).copy()


@dataclass
class IrregularWaves(Mechanism):
    """Listed outcomes (default all) observed only at the listed 1-based times."""

    times: tuple[int, ...]
    outcomes: tuple[str, ...] | None = None
    kind = "irregular_waves"

    def __post_init__(self):
        self.times = tuple(int(t) for t in self.times)
        if self.outcomes is not None:
            self.outcomes = tuple(self.outcomes)

    def observed(self, n, T, names, u):
        if any(not 1 <= t <= T for t in self.times):
            raise ValueError(f"observed times {self.times} not within 1..{T}")
        times = np.isin(np.arange(1, T + 1), self.times)
        affected = _outcome_mask(names, self.outcomes)
        m = times[:, None] | ~affected[None, :]
        return np.broadcast_to(m[None], (n, T, len(names))).copy()


@dataclass
class IndividualGaps(Mechanism):
    """Each individual skips each wave entirely with ``probability``."""

    probability: float
    kind = "individual_gaps"

    def __post_init__(self):
        _check_rate(self.probability, "probability")

    def needs_uniforms(self):
        return ("T",)

    def observed(self, n, T, names, u):
        return np.broadcast_to((u >= self.probability)[:, :, None], (n, T, len(names))).copy()


@dataclass
class Subsample(Mechanism):
    """At each listed wave a ``fraction`` of individuals answer the listed outcomes.

    Individuals rotate: with an offset ``u`` per individual, wave k is
    answered when ``(u + k * fraction) mod 1 < fraction``.  A fraction of 0.5
    gives alternating halves.
    """

    fraction: float
    outcomes: tuple[str, ...] | None = None
    waves: tuple[int, ...] | None = None
    kind = "subsample"

    def __post_init__(self):
        _check_rate(self.fraction, "fraction")
        if self.outcomes is not None:
            self.outcomes = tuple(self.outcomes)
        if self.waves is not None:
            self.waves = tuple(int(t) for t in self.waves)

    def needs_uniforms(self):
        return (1,)

    def observed(self, n, T, names, u):
        waves = np.arange(1, T + 1) if self.waves is None else np.array(self.waves)
        if np.any((waves < 1) | (waves > T)):
            raise ValueError(f"subsample waves {self.waves} not within 1..{T}")
        affected = _outcome_mask(names, self.outcomes)
        k = np.arange(waves.size)
        answered = np.mod(u[:, :1] + k[None, :] * self.fraction, 1.0) < self.fraction
        by_time = np.ones((n, T), dtype=bool)
        by_time[:, waves - 1] = answered
        m = by_time[:, :, None] | ~affected[None, None, :]
        return np.broadcast_to(m, (n, T, len(names))).copy()


@dataclass
class Structural(Mechanism):
    """Listed outcomes enter the survey at ``first_observed`` (1-based)."""

    outcomes: tuple[str, ...]
    first_observed: int
    kind = "structural"

    def __post_init__(self):
        self.outcomes = tuple(self.outcomes)

    def observed(self, n, T, names, u):
        if not 1 <= self.first_observed <= T:
            raise ValueError(f"first_observed {self.first_observed} not within 1..{T}")
        affected = _outcome_mask(names, self.outcomes)
        before = np.arange(1, T + 1) < self.first_observed
        m = ~(before[:, None] & affected[None, :])
        return np.broadcast_to(m[None], (n, T, len(names))).copy()


@dataclass
class ItemNonresponse(Mechanism):
    """Every cell independently missing with ``rate``."""

    rate: float
    kind = "item_nonresponse"

    def __post_init__(self):
        _check_rate(self.rate, "rate")

    def needs_uniforms(self):
        return ("T", "J")

    def observed(self, n, T, names, u):
        return u >= self.rate


MECHANISMS = {c.kind: c for c in (CoarseSpacing, IrregularWaves, IndividualGaps, Subsample, Structural,
                                  ItemNonresponse)}


@dataclass
class MissingnessPlan:
    mechanisms: list[Mechanism] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mechanisms": [m.to_dict() for m in self.mechanisms]}

    @classmethod
    def from_dict(cls, d: dict) -> "MissingnessPlan":
        mechs = []
        for entry in d.get("mechanisms", []):
            entry = dict(entry)
            kind = entry.pop("kind", None)
            if kind not in MECHANISMS:
                raise ValueError(f"unknown missingness mechanism {kind!r}")
            mechs.append(MECHANISMS[kind](**entry))
        return cls(mechs)

    def __add__(self, other: "MissingnessPlan") -> "MissingnessPlan":
        return MissingnessPlan(self.mechanisms + other.mechanisms)


def load_plan(path) -> MissingnessPlan:
    with open(path) as fh:
        return MissingnessPlan.from_dict(json.load(fh))


def dump_plan(plan: MissingnessPlan, path) -> None:
    with open(path, "w") as fh:
        json.dump(plan.to_dict(), fh, indent=2)
        fh.write("\n")


def observation_mask(plan: MissingnessPlan, n: int, T: int, names: Sequence[str], seed: int) -> np.ndarray:
    """Intersected observedness ``(n, T, J)``; depends on shapes, plan and seed only."""
    rng = RngStream(seed)
    J = len(names)
    mask = np.ones((n, T, J), dtype=bool)
    for mech in plan.mechanisms:
        shape = tuple({"T": T, "J": J}.get(s, s) for s in mech.needs_uniforms())
        u = _block_uniforms(rng, MASK, mech.key(), n, shape) if shape else None
        mask &= mech.observed(n, T, names, u)
    return mask


def raw_view(panel: Panel, spec: ModelSpec) -> np.ndarray:
    """Cells as a survey would record them: dead people report mortality 1, nothing else."""
    cells = np.array(panel.cells)
    m = spec.mortality_index
    cells[:, :, m][cells[:, :, m] == DEAD] = 1
    cells[cells == DEAD] = MISSING
    return cells


def apply_missingness(panel: Panel, spec: ModelSpec, plan: MissingnessPlan,
                      seed: int = 0) -> tuple[Panel, np.ndarray]:
    """Mask a panel; returns the masked panel and the observedness mask.

    Missing-by-death is re-derived from the first observed death.
    """
    mask = observation_mask(plan, panel.n, panel.T, spec.names, seed)
    cells = raw_view(panel, spec)
    cells[~mask] = MISSING
    out = make_panel(spec, panel.ids, panel.covariates, cells, panel.start_year)
    empty = ~np.isin(out.cells, (0, 1)).any(axis=(1, 2))
    if empty.any():
        ids = [out.ids[i] for i in np.flatnonzero(empty)[:5]]
        warnings.warn(f"{int(empty.sum())} individual(s) have no observed cells after masking "
                      f"(e.g. {', '.join(ids)}); they are kept", UserWarning, stacklevel=2)
    return out, mask


def write_mask_csv(mask: np.ndarray, ids: Sequence[str], spec: ModelSpec, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", *spec.names])
        for i, pid in enumerate(ids):
            for t in range(mask.shape[1]):
                w.writerow([pid, t + 1, *(int(v) for v in mask[i, t])])


def read_mask_csv(path, spec: ModelSpec) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = list(dict.fromkeys(r["id"] for r in rows))
    pos = {p: i for i, p in enumerate(ids)}
    mask = np.zeros((len(ids), spec.T, spec.J), dtype=bool)
    for r in rows:
        mask[pos[r["id"]], int(r["time"]) - 1] = [r[nm] == "1" for nm in spec.names]
    return ids, mask
