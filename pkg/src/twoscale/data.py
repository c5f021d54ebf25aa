"""Two-time-scale survival data: subjects, cohorts, CSV I/O and grid-aligned increments.

Each subject is observed on the duration axis over ``(0, exit_time]`` and enters the
age axis at ``entry_age``.  Designs carry no separate at-risk indicator: outside the
observation window every covariate row is zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .grid import TwoScaleGrid

ID_COLUMNS = ("id", "entry_age", "exit_time", "event")


class ParseError(ValueError):
    """Malformed subject data; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CovariatePath:
    """Left-continuous piecewise-constant path.

    ``values[0]`` holds on ``[0, breaks[0]]``, ``values[r]`` on ``(breaks[r-1], breaks[r]]``,
    the last row after the last break.
    """

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float).reshape(-1)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape[0] != breaks.size + 1:
            raise ValueError("need one more value row than break points")
        if np.any(np.diff(breaks) <= 0):
            raise ValueError("break points must be strictly increasing")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: Sequence[float]) -> CovariatePath:
        return cls(np.empty(0), np.asarray(value, dtype=float)[None, :])

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def is_constant(self) -> bool:
        return self.breaks.size == 0

    def __call__(self, t) -> np.ndarray:
        return self.values[np.searchsorted(self.breaks, t, side="left")]


def _shared_agree(x: CovariatePath, z: CovariatePath, d: int) -> bool:
    """Whether the first ``d`` columns of two left-continuous paths coincide everywhere."""
    knots = np.union1d(x.breaks, z.breaks)
    # One probe per constant piece: each knot (left-continuous value) and beyond the last.
    probes = np.append(knots, knots[-1] + 1.0 if knots.size else 0.0)
    return bool(np.array_equal(x(probes)[:, :d], z(probes)[:, :d]))


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    entry_age: float
    exit_time: float
    event: bool
    covariates_x: CovariatePath
    covariates_z: CovariatePath

    def __post_init__(self):
        if not self.exit_time > 0:
            raise ValueError(f"subject {self.id}: exit_time must be positive")
        if self.entry_age < 0:
            raise ValueError(f"subject {self.id}: entry_age must be non-negative")


@dataclass(frozen=True)
class SubjectCohort:
    subjects: tuple[SubjectRecord, ...]
    d: int
    t_max: float
    a0: float
    a_max: float
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise ValueError("no subjects")
        object.__setattr__(self, "subjects", subjects)
        p, q = subjects[0].covariates_x.dim, subjects[0].covariates_z.dim
        for s in subjects:
            if s.covariates_x.dim != p or s.covariates_z.dim != q:
                raise ValueError(f"subject {s.id}: design dimensions differ from the cohort")
        if not 0 <= self.d <= min(p, q):
            raise ValueError(f"shared column count d={self.d} must lie in [0, {min(p, q)}]")
        if self.d:
            for s in subjects:
                if not _shared_agree(s.covariates_x, s.covariates_z, self.d):
                    raise ValueError(f"subject {s.id}: shared columns of X and Z differ")
        if self.exit.max() > self.t_max:
            raise ValueError("exit_time beyond t_max")
        if self.a0 > self.entry.min():
            raise ValueError("a0 exceeds the smallest entry age")
        if self.a_max < (self.entry + self.exit).max():
            raise ValueError("a_max below the largest exit age")
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{c}" for c in range(p)))
        if not self.z_names:
            names = list(self.x_names[: self.d]) + [f"z{c}" for c in range(self.d, q)]
            object.__setattr__(self, "z_names", tuple(names))

    @classmethod
    def from_subjects(cls, subjects: Iterable[SubjectRecord], d: int, *, t_max=None, a0=None,
                      a_max=None, x_names=(), z_names=()) -> SubjectCohort:
        """Build a cohort with axis ranges defaulting to the observed data range."""
        subjects = tuple(subjects)
        if not subjects:
            raise ValueError("no subjects")
        entry = np.array([s.entry_age for s in subjects])
        exit_ = np.array([s.exit_time for s in subjects])
        return cls(
            subjects, d,
            t_max=float(exit_.max()) if t_max is None else float(t_max),
            a0=float(entry.min()) if a0 is None else float(a0),
            a_max=float((entry + exit_).max()) if a_max is None else float(a_max),
            x_names=tuple(x_names), z_names=tuple(z_names),
        )

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].covariates_x.dim

    @property
    def q(self) -> int:
        return self.subjects[0].covariates_z.dim

    @property
    def entry(self) -> np.ndarray:
        return np.array([s.entry_age for s in self.subjects], dtype=float)

    @property
    def exit(self) -> np.ndarray:
        return np.array([s.exit_time for s in self.subjects], dtype=float)

    @property
    def event(self) -> np.ndarray:
        return np.array([s.event for s in self.subjects], dtype=bool)


@dataclass(frozen=True)
class CovariateSchema:
    """Assignment of CSV covariate columns to the two designs.

    ``shared`` columns enter both designs and come first, so ``d == len(shared)``
    (plus one when ``intercept`` adds a shared at-risk column of ones).
    """

    shared: tuple[str, ...] = ()
    x_only: tuple[str, ...] = ()
    z_only: tuple[str, ...] = ()
    intercept: bool = False

    @property
    def d(self) -> int:
        return len(self.shared) + int(self.intercept)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(self.shared) + tuple(self.x_only) + tuple(self.z_only)


def _to_float(text: str, name: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {name!r}: cannot parse {text!r} as a number", line) from None
    if not np.isfinite(value):
        raise ParseError(f"column {name!r}: non-finite value {text!r}", line)
    return value


def parse_subjects(stream, schema: CovariateSchema | None = None, *, delimiter: str = ",",
                   t_max=None, a0=None, a_max=None) -> SubjectCohort:
    """Read subjects from delimited text with a header row.

    Without a schema every covariate column is shared; if there are no covariate
    columns at all, a shared at-risk intercept is used.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=delimiter)
    header = next(reader, None)
    if header is None or not any(h.strip() for h in header):
        raise ParseError("no subjects")
    header = [h.strip() for h in header]
    if tuple(header[:4]) != ID_COLUMNS:
        raise ParseError(f"header must start with {','.join(ID_COLUMNS)}", 1)
    covariate_cols = header[4:]
    if schema is None:
        schema = CovariateSchema(shared=tuple(covariate_cols), intercept=not covariate_cols)
    missing = [c for c in schema.columns if c not in covariate_cols]
    if missing:
        raise ParseError(f"schema columns not in header: {missing}", 1)
    unused = [c for c in covariate_cols if c not in schema.columns]
    if unused:
        raise ParseError(f"header columns not assigned by the schema: {unused}", 1)
    pos = {name: i for i, name in enumerate(header)}
    ones = ("1",) if schema.intercept else ()
    x_names = ones + tuple(schema.shared) + tuple(schema.x_only)
    z_names = ones + tuple(schema.shared) + tuple(schema.z_only)

    subjects = []
    for line, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} columns, found {len(row)}", line)
        entry = _to_float(row[1], "entry_age", line)
        exit_time = _to_float(row[2], "exit_time", line)
        if exit_time <= 0:
            raise ParseError("exit_time must be positive", line)
        if entry < 0:
            raise ParseError("entry_age must be non-negative", line)
        flag = row[3].strip()
        if flag not in ("0", "1"):
            raise ParseError(f"event flag must be 0 or 1, got {flag!r}", line)
        value = {c: _to_float(row[pos[c]], c, line) for c in schema.columns}
        x = [1.0] * len(ones) + [value[c] for c in schema.shared + schema.x_only]
        z = [1.0] * len(ones) + [value[c] for c in schema.shared + schema.z_only]
        subjects.append(SubjectRecord(
            row[0].strip(), entry, exit_time, flag == "1",
            CovariatePath.constant(x), CovariatePath.constant(z),
        ))
    if not subjects:
        raise ParseError("no subjects")
    try:
        return SubjectCohort.from_subjects(subjects, schema.d, t_max=t_max, a0=a0, a_max=a_max,
                                           x_names=x_names, z_names=z_names)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def schema_for(cohort: SubjectCohort) -> CovariateSchema:
    """Schema under which :func:`write_subjects` output parses back to ``cohort``."""
    d = cohort.d
    intercept = d > 0 and cohort.x_names[0] == "1"
    shared = cohort.x_names[int(intercept):d]
    return CovariateSchema(tuple(shared), tuple(cohort.x_names[d:]), tuple(cohort.z_names[d:]),
                           intercept)


def write_subjects(cohort: SubjectCohort, stream=None) -> str:
    """Write a cohort with time-constant covariates as CSV (inverse of :func:`parse_subjects`)."""
    schema = schema_for(cohort)
    off = int(schema.intercept)
    out = stream if stream is not None else io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(list(ID_COLUMNS) + list(schema.columns))
    for s in cohort.subjects:
        if not (s.covariates_x.is_constant and s.covariates_z.is_constant):
            raise ValueError(f"subject {s.id}: time-varying covariates cannot be written as CSV")
        x, z = s.covariates_x.values[0], s.covariates_z.values[0]
        cov = list(x[off:]) + list(z[cohort.d:])
        writer.writerow([s.id, repr(float(s.entry_age)), repr(float(s.exit_time)), int(s.event)]
                        + [repr(float(v)) for v in cov])
    return out.getvalue() if stream is None else ""


@dataclass(frozen=True)
class IncrementMatrix:
    """Counting increments and design rows per grid cell, on both axes.

    Duration cell ``l >= 1`` is ``(t_{l-1}, t_l]``; age cell ``m >= 1`` is
    ``(u_{m-1}, u_m]``, which for subject ``i`` covers durations
    ``(u_{m-1} - a_i, u_m - a_i]``.  Index 0 on each axis carries no cell and is zero.

    Arrays are indexed ``[cell, subject]`` (and ``[..., component]`` for designs).
    """

    grid: TwoScaleGrid
    entry: np.ndarray
    d: int
    dur_dN: np.ndarray
    dur_X: np.ndarray
    dur_Z: np.ndarray
    age_dN: np.ndarray
    age_X: np.ndarray
    age_Z: np.ndarray
    ids: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.entry.size

    @property
    def p(self) -> int:
        return self.dur_X.shape[2]

    @property
    def q(self) -> int:
        return self.dur_Z.shape[2]


def _design_rows(cohort: SubjectCohort, lo: np.ndarray, hi: np.ndarray, attr: str) -> np.ndarray:
    """Design rows over windows ``(lo, hi]`` (duration units, shape (cells, n)).

    A subject contributes where the window meets ``(0, exit]``; the row is the path
    evaluated at ``min(hi, exit)``.
    """
    exit_ = cohort.exit
    at_risk = (lo < exit_[None, :]) & (hi > 0)
    paths = [getattr(s, attr) for s in cohort.subjects]
    dim = paths[0].dim
    if all(path.is_constant for path in paths):
        const = np.stack([path.values[0] for path in paths])
        return at_risk[:, :, None] * const[None, :, :]
    rows = np.zeros(lo.shape + (dim,))
    tau = np.minimum(hi, exit_[None, :])
    for i, path in enumerate(paths):
        rows[:, i, :] = path(tau[:, i])
    rows[~at_risk] = 0.0
    return rows


def counting_increments(cohort: SubjectCohort, grid: TwoScaleGrid) -> IncrementMatrix:
    """Snap events to the grid (smallest grid point at or above) and evaluate designs."""
    entry, exit_, event = cohort.entry, cohort.exit, cohort.event
    s, u = grid.t_points, grid.a_points
    if np.any(event & (exit_ > grid.t_max)):
        raise ValueError("event time beyond t_max of the grid")
    if np.any(event & (entry + exit_ > grid.a_max)):
        raise ValueError("event age beyond a_max of the grid")
    if np.any(entry < grid.a0):
        raise ValueError("entry age below a0 of the grid")
    n = cohort.n
    idx = np.arange(n)

    dur_dN = np.zeros((grid.j, n))
    l_ev = np.searchsorted(s, exit_, side="left")
    dur_dN[l_ev[event], idx[event]] = 1.0
    age_dN = np.zeros((grid.k, n))
    m_ev = np.searchsorted(u, entry + exit_, side="left")
    age_dN[m_ev[event], idx[event]] = 1.0

    dur_lo = np.repeat(np.concatenate([[np.inf], s[:-1]])[:, None], n, axis=1)
    dur_hi = np.repeat(s[:, None], n, axis=1)
    age_lo = np.concatenate([[np.inf], u[:-1]])[:, None] - entry[None, :]
    age_hi = u[:, None] - entry[None, :]
    return IncrementMatrix(
        grid=grid, entry=entry, d=cohort.d,
        dur_dN=dur_dN,
        dur_X=_design_rows(cohort, dur_lo, dur_hi, "covariates_x"),
        dur_Z=_design_rows(cohort, dur_lo, dur_hi, "covariates_z"),
        age_dN=age_dN,
        age_X=_design_rows(cohort, age_lo, age_hi, "covariates_x"),
        age_Z=_design_rows(cohort, age_lo, age_hi, "covariates_z"),
        ids=tuple(s_.id for s_ in cohort.subjects),
    )
