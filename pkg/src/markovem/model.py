"""Transition model definition, panel data with missingness, and parameters.

Cells of a panel are stored as ``int8`` codes: 0 and 1 for observed binary
values, ``MISSING`` for cells the survey did not record and ``DEAD`` for cells
that do not exist because the individual had already died.  ``DEAD`` is always
derived from the mortality column, so two panels with the same observed
values are identical after construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, SpecError

MISSING = -1
DEAD = -2

_CELL_TEXT = {0: "0", 1: "1", MISSING: "NA", DEAD: "NA"}


class OutcomeKind(str, Enum):
    TRANSIENT = "transient"
    ABSORBING = "absorbing"
    MORTALITY = "mortality"


@dataclass(frozen=True)
class OutcomeDef:
    name: str
    kind: OutcomeKind
    dependencies: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", OutcomeKind(self.kind))
        object.__setattr__(self, "dependencies", tuple(self.dependencies))


@dataclass(frozen=True)
class CovariateDef:
    """A fixed individual covariate.

    ``kind="age"`` covariates are stored as a birth year in column ``source``
    and evaluated as ``calendar year - birth year`` at each time step.
    """

    name: str
    kind: str = "fixed"
    source: str | None = None

    @property
    def column(self) -> str:
        if self.source:
            return self.source
        return "birth_year" if self.kind == "age" else self.name


@dataclass(frozen=True)
class ModelSpec:
    outcomes: tuple[OutcomeDef, ...]
    covariates: tuple[CovariateDef, ...] = ()
    time_steps: int = 2
    step_unit: str = "year"
    start_year: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def J(self) -> int:
        return len(self.outcomes)

    @property
    def T(self) -> int:
        return self.time_steps

    @cached_property
    def names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.outcomes)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @cached_property
    def mortality_index(self) -> int:
        return next(j for j, o in enumerate(self.outcomes) if o.kind is OutcomeKind.MORTALITY)

    @cached_property
    def dep_indices(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(self.index(d) for d in o.dependencies) for o in self.outcomes)

    @cached_property
    def absorbing(self) -> np.ndarray:
        """Boolean mask of outcomes that never return to 0 (mortality included)."""
        return np.array([o.kind is not OutcomeKind.TRANSIENT for o in self.outcomes])

    @cached_property
    def process_order(self) -> tuple[int, ...]:
        """Mortality first, then every other outcome in declared order."""
        m = self.mortality_index
        return (m,) + tuple(j for j in range(self.J) if j != m)

    @cached_property
    def others(self) -> tuple[int, ...]:
        return self.process_order[1:]

    @cached_property
    def covariate_columns(self) -> tuple[str, ...]:
        return tuple(c.column for c in self.covariates)

    def n_coef(self, j: int) -> int:
        return 1 + len(self.covariates) + len(self.outcomes[j].dependencies)

    def coef_names(self, j: int) -> list[str]:
        return (["intercept"] + [c.name for c in self.covariates]
                + ["lag_" + d for d in self.outcomes[j].dependencies])


def validate_spec(spec: ModelSpec) -> ModelSpec:
    """Return ``spec`` unchanged if it is well formed, else raise ``SpecError``.

    All violations are collected and reported together.
    """
    problems = []
    if spec.J < 1:
        problems.append("model needs at least one outcome")
    if spec.time_steps < 2:
        problems.append(f"time_steps must be >= 2, got {spec.time_steps}")
    names = [o.name for o in spec.outcomes]
    dups = sorted({n for n in names if names.count(n) > 1})
    if dups:
        problems.append(f"duplicate outcome names: {', '.join(dups)}")
    n_mort = sum(o.kind is OutcomeKind.MORTALITY for o in spec.outcomes)
    if n_mort == 0:
        problems.append("no mortality outcome")
    elif n_mort > 1:
        problems.append("multiple mortality outcomes")
    declared = set(names)
    for o in spec.outcomes:
        for d in o.dependencies:
            if d not in declared:
                problems.append(f"dangling reference: outcome '{o.name}' depends on undeclared '{d}'")
        if len(set(o.dependencies)) != len(o.dependencies):
            problems.append(f"outcome '{o.name}' lists a dependency twice")
    cov_names = [c.name for c in spec.covariates]
    if len(set(cov_names)) != len(cov_names):
        problems.append("duplicate covariate names")
    for c in spec.covariates:
        if c.kind not in ("age", "fixed"):
            problems.append(f"covariate '{c.name}' has unknown kind '{c.kind}'")
    cols = [c.column for c in spec.covariates]
    if set(cols) & {"id", "time"} or set(cols) & declared:
        problems.append("covariate columns clash with reserved or outcome column names")
    if problems:
        raise SpecError(problems)
    return spec


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "outcomes": [
            {"name": o.name, "kind": o.kind.value, "dependencies": list(o.dependencies)}
            for o in spec.outcomes
        ],
        "covariates": [
            {"name": c.name, "kind": c.kind, **({"source": c.source} if c.source else {})}
            for c in spec.covariates
        ],
        "time_steps": spec.time_steps,
        "step_unit": spec.step_unit,
        "start_year": spec.start_year,
    }


def spec_from_dict(d: dict) -> ModelSpec:
    try:
        outcomes = tuple(
            OutcomeDef(o["name"], OutcomeKind(o["kind"]), tuple(o.get("dependencies", ())))
            for o in d["outcomes"]
        )
        covariates = tuple(
            CovariateDef(c["name"], c.get("kind", "fixed"), c.get("source"))
            for c in d.get("covariates", ())
        )
        spec = ModelSpec(outcomes, covariates, int(d["time_steps"]),
                         d.get("step_unit", "year"), int(d.get("start_year", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError([f"malformed model document: {exc!r}"]) from exc
    return validate_spec(spec)


def load_spec(path) -> ModelSpec:
    with open(path) as fh:
        return spec_from_dict(json.load(fh))


def dump_spec(spec: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Panel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IndividualRecord:
    id: str
    covariates: np.ndarray  # raw values, birth year for age covariates
    cells: np.ndarray  # (T, J)
    start_year: int


@dataclass(frozen=True, eq=False)
class Panel:
    """n individuals x T times x J outcomes plus fixed covariates.

    Build with :func:`make_panel`; the arrays are read-only.
    """

    ids: tuple[str, ...]
    covariates: np.ndarray  # (n, C)
    cells: np.ndarray  # (n, T, J) int8
    start_year: int = 0

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return self.cells.shape[1]

    @property
    def J(self) -> int:
        return self.cells.shape[2]

    def record(self, i: int) -> IndividualRecord:
        return IndividualRecord(self.ids[i], self.covariates[i], self.cells[i], self.start_year)

    def subset(self, rows: Sequence[int]) -> "Panel":
        rows = np.asarray(rows, dtype=int)
        return Panel(tuple(self.ids[i] for i in rows), _frozen(self.covariates[rows]),
                     _frozen(self.cells[rows]), self.start_year)

    def equals(self, other: "Panel") -> bool:
        return (self.ids == other.ids and self.start_year == other.start_year
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.cells, other.cells))

    @property
    def missing_fraction(self) -> float:
        live = self.cells != DEAD
        return float(np.sum(self.cells == MISSING) / max(1, np.sum(live)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def _check_closure(spec: ModelSpec, cells: np.ndarray, ids) -> None:
    for j in np.flatnonzero(spec.absorbing):
        col = cells[:, :, j]
        ones = col == 1
        zeros = col == 0
        # first observed one vs last observed zero
        T = col.shape[1]
        first_one = np.where(ones.any(1), ones.argmax(1), T)
        last_zero = np.where(zeros.any(1), T - 1 - zeros[:, ::-1].argmax(1), -1)
        bad = np.flatnonzero(last_zero > first_one)
        if bad.size:
            i = bad[0]
            raise DataError(
                f"individual {ids[i]}: absorbing outcome '{spec.names[j]}' is 1 at time "
                f"{first_one[i] + 1} but 0 at time {last_zero[i] + 1}")


def _check_after_death(spec: ModelSpec, cells: np.ndarray, ids) -> None:
    mort = cells[:, :, spec.mortality_index] == 1
    T = cells.shape[1]
    death_t = np.where(mort.any(1), mort.argmax(1), T)
    later = np.arange(T)[None, :] > death_t[:, None]
    for j in spec.others:
        bad = np.flatnonzero((np.isin(cells[:, :, j], (0, 1)) & later).any(1))
        if bad.size:
            i = bad[0]
            raise DataError(f"individual {ids[i]}: outcome '{spec.names[j]}' observed after death "
                            f"at time {death_t[i] + 1}")


def _derive_death(spec: ModelSpec, cells: np.ndarray) -> None:
    """In place: recompute DEAD from the first observed death."""
    m = spec.mortality_index
    cells[cells == DEAD] = MISSING
    mort = cells[:, :, m] == 1
    T = cells.shape[1]
    died = mort.any(1)
    death_t = np.where(died, mort.argmax(1), T)
    t = np.arange(T)
    after = t[None, :] > death_t[:, None]
    at_or_after = t[None, :] >= death_t[:, None]
    cells[:, :, m][after] = DEAD
    for j in spec.others:
        cells[:, :, j][at_or_after] = DEAD


def make_panel(spec: ModelSpec, ids: Iterable, covariates, cells, start_year: int | None = None) -> Panel:
    """Validate raw arrays and return a canonical :class:`Panel`.

    Non-mortality cells at and after the first observed death, and mortality
    cells after it, become ``DEAD``.
    """
    ids = tuple(str(i) for i in ids)
    cells = np.array(cells, dtype=np.int8, copy=True)
    n = len(ids)
    cov = np.array(covariates, dtype=float).reshape(n, len(spec.covariates))
    if cells.shape != (n, spec.T, spec.J):
        raise DataError(f"cells shape {cells.shape} does not match (n={n}, T={spec.T}, J={spec.J})")
    if len(set(ids)) != n:
        raise DataError("duplicate individual ids")
    if not np.all(np.isfinite(cov)):
        raise DataError("fixed covariates must never be missing")
    if not np.all(np.isin(cells, (0, 1, MISSING, DEAD))):
        raise DataError("cell codes must be 0, 1, MISSING or DEAD")
    _check_closure(spec, np.where(cells == DEAD, MISSING, cells), ids)
    _check_after_death(spec, cells, ids)
    _derive_death(spec, cells)
    return Panel(ids, _frozen(cov), _frozen(cells), spec.start_year if start_year is None else start_year)


def propagate_absorbing(panel: Panel, spec: ModelSpec) -> Panel:
    """Fill missing cells that absorption or survival make certain.

    * an absorbing outcome that is 1 stays 1: missing cells after an observed
      1 become 1, missing cells before an observed 0 become 0;
    * a respondent with any observed non-mortality value at time t was alive
      then, so missing mortality cells up to t become 0.  Repeated 1s of an
      absorbing outcome do not count, which keeps the operation idempotent.

    Observed cells are never changed.  Raises ``DataError`` on a closure
    violation.
    """
    cells = np.array(panel.cells)
    _check_closure(spec, np.where(cells == DEAD, MISSING, cells), panel.ids)
    T = panel.T
    t = np.arange(T)[None, :]
    m = spec.mortality_index

    seen_alive = np.zeros(cells.shape[:2], dtype=bool)
    for j in spec.others:
        col = cells[:, :, j]
        if spec.outcomes[j].kind is OutcomeKind.ABSORBING:
            # a 1 after the first 1 is indistinguishable from our own fill, so it is not evidence
            ones = col == 1
            first = np.where(ones.any(1), ones.argmax(1), T)
            seen_alive |= (col == 0) | (ones & (t == first[:, None]))
        else:
            seen_alive |= np.isin(col, (0, 1))
    seen_alive |= cells[:, :, m] == 0
    last_alive = np.where(seen_alive.any(1), T - 1 - seen_alive[:, ::-1].argmax(1), -1)
    mort = cells[:, :, m]
    mort[(mort == MISSING) & (t <= last_alive[:, None])] = 0

    for j in np.flatnonzero(spec.absorbing):
        if j == m:
            continue
        col = cells[:, :, j]
        zeros = col == 0
        ones = col == 1
        last_zero = np.where(zeros.any(1), T - 1 - zeros[:, ::-1].argmax(1), -1)
        first_one = np.where(ones.any(1), ones.argmax(1), T)
        miss = col == MISSING
        col[miss & (t < last_zero[:, None])] = 0
        col[miss & (t > first_one[:, None])] = 1
    return make_panel(spec, panel.ids, panel.covariates, cells, panel.start_year)


def effective_starts(panel: Panel, spec: ModelSpec) -> np.ndarray:
    """0-based index of each individual's first complete, alive time.

    Transitions into times after this index enter the likelihood.  Individuals
    with no usable start get -1.
    """
    complete = np.all(np.isin(panel.cells, (0, 1)), axis=2) & (panel.cells[:, :, spec.mortality_index] == 0)
    complete[:, -1] = False  # a start needs at least one later transition
    return np.where(complete.any(1), complete.argmax(1), -1)


def covariate_values(spec: ModelSpec, raw: np.ndarray, start_year: int, T: int) -> np.ndarray:
    """Covariate values by time, shape ``raw.shape[:-1] + (T, C)``."""
    raw = np.asarray(raw, dtype=float)
    out = np.repeat(raw[..., None, :], T, axis=-2)
    years = start_year + np.arange(T, dtype=float)
    for c, cov in enumerate(spec.covariates):
        if cov.kind == "age":
            out[..., c] = years - raw[..., None, c]
    return out


def covariate_groups(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique covariate rows and each individual's group index."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[1] == 0:
        return np.zeros((1, 0)), np.zeros(raw.shape[0], dtype=np.int64)
    uniq, inverse = np.unique(raw, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1).astype(np.int64)


def build_design_vector(spec: ModelSpec, individual: IndividualRecord, j: int, t: int,
                        prev_state) -> np.ndarray:
    """Design vector ``[1, covariates at t, lagged dependencies]`` for outcome j.

    ``t`` is 1-based; ``prev_state`` is the length-J state at ``t - 1``.
    """
    prev_state = np.asarray(prev_state)
    deps = spec.dep_indices[j]
    lagged = prev_state[list(deps)] if deps else np.zeros(0)
    if np.any((lagged != 0) & (lagged != 1)):
        raise ContractError(
            f"dependency of '{spec.names[j]}' unresolved at time {t - 1}; impute before building design")
    cov = covariate_values(spec, individual.covariates[None, :], individual.start_year, t)[0, t - 1]
    return np.concatenate(([1.0], cov, lagged.astype(float)))


# ---------------------------------------------------------------------------
# Panel CSV
# ---------------------------------------------------------------------------

def write_panel_csv(panel: Panel, spec: ModelSpec, path) -> None:
    cols = list(dict.fromkeys(spec.covariate_columns))
    col_idx = [spec.covariate_columns.index(c) for c in cols]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", *cols, *spec.names])
        for i, pid in enumerate(panel.ids):
            cov = [_fmt_num(panel.covariates[i, c]) for c in col_idx]
            for t in range(panel.T):
                w.writerow([pid, t + 1, *cov, *(_CELL_TEXT[int(v)] for v in panel.cells[i, t])])


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def read_panel_csv(path, spec: ModelSpec, start_year: int | None = None) -> Panel:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = ["id", "time", *dict.fromkeys(spec.covariate_columns), *spec.names]
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = list(reader)
    ids: list[str] = []
    by_id: dict[str, tuple[list, np.ndarray]] = {}
    for lineno, row in enumerate(rows, start=2):
        pid = row["id"]
        try:
            t = int(row["time"])
            cov = [float(row[c]) for c in spec.covariate_columns]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not 1 <= t <= spec.T:
            raise DataError(f"{path}:{lineno}: time {t} outside 1..{spec.T}")
        if pid not in by_id:
            ids.append(pid)
            by_id[pid] = (cov, np.full((spec.T, spec.J), -99, dtype=np.int8))
        elif by_id[pid][0] != cov:
            raise DataError(f"{path}:{lineno}: covariates of individual {pid} change over time")
        grid = by_id[pid][1]
        if grid[t - 1, 0] != -99:
            raise DataError(f"{path}:{lineno}: duplicate row for individual {pid}, time {t}")
        for j, name in enumerate(spec.names):
            v = row[name].strip()
            if v == "NA":
                grid[t - 1, j] = MISSING
            elif v in ("0", "1"):
                grid[t - 1, j] = int(v)
            else:
                raise DataError(f"{path}:{lineno}: outcome '{name}' has value {v!r}; expected 0, 1 or NA")
    covs = np.array([by_id[p][0] for p in ids], dtype=float).reshape(len(ids), len(spec.covariates))
    cells = np.stack([by_id[p][1] for p in ids]) if ids else np.zeros((0, spec.T, spec.J), np.int8)
    if np.any(cells == -99):
        raise DataError(f"{path}: every individual needs one row per time 1..{spec.T}")
    return make_panel(spec, ids, covs, cells, start_year)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParamSet:
    """One Probit coefficient vector per outcome, aligned with ``spec.outcomes``."""

    betas: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(np.array(b, dtype=float) for b in self.betas))

    def __getitem__(self, j: int) -> np.ndarray:
        return self.betas[j]

    def __len__(self) -> int:
        return len(self.betas)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamSet":
        return cls(tuple(np.zeros(spec.n_coef(j)) for j in range(spec.J)))

    def replace(self, j: int, beta) -> "ParamSet":
        betas = list(self.betas)
        betas[j] = np.array(beta, dtype=float)
        return ParamSet(tuple(betas))

    def check(self, spec: ModelSpec) -> "ParamSet":
        if len(self.betas) != spec.J:
            raise ContractError(f"expected {spec.J} coefficient vectors, got {len(self.betas)}")
        for j, b in enumerate(self.betas):
            if b.shape != (spec.n_coef(j),):
                raise ContractError(
                    f"outcome '{spec.names[j]}' needs {spec.n_coef(j)} coefficients, got {b.shape}")
            if not np.all(np.isfinite(b)):
                raise ContractError(f"outcome '{spec.names[j]}' has non-finite coefficients")
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate(self.betas) if self.betas else np.zeros(0)

    def max_abs_diff(self, other: "ParamSet") -> float:
        return float(np.max(np.abs(self.flat() - other.flat())))

    def to_dict(self, spec: ModelSpec) -> dict:
        return {spec.names[j]: {name: float(v) for name, v in zip(spec.coef_names(j), b)}
                for j, b in enumerate(self.betas)}

    @classmethod
    def from_dict(cls, spec: ModelSpec, d: dict) -> "ParamSet":
        betas = []
        for j, name in enumerate(spec.names):
            if name not in d:
                raise ContractError(f"parameters missing outcome '{name}'")
            coefs = d[name]
            missing = [c for c in spec.coef_names(j) if c not in coefs]
            if missing:
                raise ContractError(f"outcome '{name}' missing coefficients {missing}")
            betas.append([float(coefs[c]) for c in spec.coef_names(j)])
        return cls(tuple(betas)).check(spec)


def load_params(path, spec: ModelSpec) -> ParamSet:
    with open(path) as fh:
        d = json.load(fh)
    return ParamSet.from_dict(spec, d.get("outcomes", d))


def dump_params(params: ParamSet, spec: ModelSpec, path, extra: dict | None = None) -> None:
    doc = {"outcomes": params.to_dict(spec)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
