"""Discretization of the duration and age axes, and step functions on them."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

DURATION = "duration"
AGE = "age"
_AXES = (DURATION, AGE)


@dataclass(frozen=True)
class TwoScaleGrid:
    """Product grid: ``t_points`` on ``[0, t_max]`` and ``a_points`` on ``[a0, a_max]``."""

    t_points: np.ndarray
    a_points: np.ndarray

    def __post_init__(self):
        for name in ("t_points", "a_points"):
            pts = np.asarray(getattr(self, name), dtype=float)
            if pts.ndim != 1 or pts.size < 2:
                raise ValueError(f"{name} needs at least 2 points")
            if np.any(np.diff(pts) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            pts.setflags(write=False)
            object.__setattr__(self, name, pts)
        if self.t_points[0] != 0.0:
            raise ValueError("duration grid must start at 0")

    @property
    def j(self) -> int:
        return self.t_points.size

    @property
    def k(self) -> int:
        return self.a_points.size

    @property
    def t_max(self) -> float:
        return float(self.t_points[-1])

    @property
    def a0(self) -> float:
        return float(self.a_points[0])

    @property
    def a_max(self) -> float:
        return float(self.a_points[-1])

    @property
    def max_spacing(self) -> float:
        return float(max(np.diff(self.t_points).max(), np.diff(self.a_points).max()))

    def points(self, axis: str) -> np.ndarray:
        return self.t_points if axis == DURATION else self.a_points


def build_grid(t_max: float, a0: float, a_max: float, j: int, k: int) -> TwoScaleGrid:
    """Uniform grids with ``j`` duration points and ``k`` age points, endpoints included."""
    if not t_max > 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if not a_max > a0:
        raise ValueError(f"need a0 < a_max, got a0={a0}, a_max={a_max}")
    if j < 2 or k < 2:
        raise ValueError(f"need at least 2 points per axis, got j={j}, k={k}")
    return TwoScaleGrid(np.linspace(0.0, t_max, j), np.linspace(a0, a_max, k))


@dataclass(frozen=True)
class StepFunctionVec:
    """Right-continuous vector step function, zero at the axis origin.

    ``values[l]`` is the value on ``[points[l], points[l+1])``.
    """

    axis: str
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.axis not in _AXES:
            raise ValueError(f"unknown axis {self.axis!r}")
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        points = np.asarray(self.points, dtype=float)
        if values.shape[0] != points.size:
            raise ValueError("values and points disagree in length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "points", points)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __call__(self, x):
        return step_eval(self, x)


def step_eval(f: StepFunctionVec, x) -> np.ndarray:
    """Value at the largest grid point ``<= x``.

    Accepts a scalar (returns a ``dim`` vector) or an array (returns ``(len, dim)``).
    Points outside the axis range raise ``ValueError``.
    """
    xs = np.asarray(x, dtype=float)
    lo, hi = f.points[0], f.points[-1]
    if np.any(xs < lo) or np.any(xs > hi) or np.any(np.isnan(xs)):
        raise ValueError(f"x outside axis range [{lo}, {hi}]")
    idx = np.searchsorted(f.points, xs, side="right") - 1
    return f.values[idx]


def step_eval_clamped(points: np.ndarray, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Step evaluation that is 0 left of the grid and constant right of it."""
    idx = np.searchsorted(points, x, side="right") - 1
    out = values[np.clip(idx, 0, len(points) - 1)]
    out[idx < 0] = 0.0
    return out


def increments(f: StepFunctionVec | np.ndarray) -> np.ndarray:
    """Backward differences ``f(x_l) - f(x_{l-1})`` with ``f(x_{-1}) = 0``."""
    values = f.values if isinstance(f, StepFunctionVec) else np.asarray(f, dtype=float)
    return np.diff(values, axis=0, prepend=np.zeros((1,) + values.shape[1:]))


def difference_matrix(n: int, dim: int = 1) -> np.ndarray:
    """Matrix of :func:`increments` acting on point-major stacked ``(n, dim)`` values."""
    D = np.eye(n) - np.eye(n, k=-1)
    return np.kron(D, np.eye(dim))


@dataclass(frozen=True)
class ThetaEstimate:
    """Pair of cumulative effects: ``A`` on the duration axis, ``B`` on the age axis."""

    A: StepFunctionVec
    B: StepFunctionVec

    @property
    def p(self) -> int:
        return self.A.dim

    @property
    def q(self) -> int:
        return self.B.dim

    def stack(self) -> np.ndarray:
        """Point-major stacked vector of length ``p*j + q*k``."""
        return np.concatenate([self.A.values.ravel(), self.B.values.ravel()])

    @classmethod
    def unstack(cls, vec: np.ndarray, grid: TwoScaleGrid, p: int, q: int) -> ThetaEstimate:
        vec = np.asarray(vec, dtype=float)
        n_a = grid.j * p
        if vec.shape != (n_a + grid.k * q,):
            raise ValueError(f"expected vector of length {n_a + grid.k * q}, got {vec.shape}")
        return cls(
            StepFunctionVec(DURATION, grid.t_points, vec[:n_a].reshape(grid.j, p)),
            StepFunctionVec(AGE, grid.a_points, vec[n_a:].reshape(grid.k, q)),
        )

    @classmethod
    def zeros(cls, grid: TwoScaleGrid, p: int, q: int) -> ThetaEstimate:
        return cls.unstack(np.zeros(grid.j * p + grid.k * q), grid, p, q)

    def __add__(self, other: ThetaEstimate) -> ThetaEstimate:
        grid = TwoScaleGrid(self.A.points, self.B.points)
        return ThetaEstimate.unstack(self.stack() + other.stack(), grid, self.p, self.q)

    def __sub__(self, other: ThetaEstimate) -> ThetaEstimate:
        grid = TwoScaleGrid(self.A.points, self.B.points)
        return ThetaEstimate.unstack(self.stack() - other.stack(), grid, self.p, self.q)


def write_step_csv(functions, stream=None, extra: dict | None = None) -> str:
    """Serialize step functions as rows ``axis,point,component,value``.

    ``extra`` maps additional column names to arrays shaped like each function's
    values, in the same order as ``functions``.
    """
    out = stream if stream is not None else io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    extra = extra or {}
    writer.writerow(["axis", "point", "component", "value", *extra])
    for idx, f in enumerate(functions):
        for l, x in enumerate(f.points):
            for c in range(f.dim):
                row = [f.axis, repr(float(x)), c, repr(float(f.values[l, c]))]
                for col in extra.values():
                    v = col[idx][l, c]
                    row.append(v if isinstance(v, (bool, np.bool_)) else repr(float(v)))
                writer.writerow([str(v) for v in row])
    return out.getvalue() if stream is None else ""


def read_step_csv(stream) -> list[StepFunctionVec]:
    """Inverse of :func:`write_step_csv` (value column only)."""
    rows = list(csv.DictReader(stream))
    out = []
    for axis in _AXES:
        sub = [r for r in rows if r["axis"] == axis]
        if not sub:
            continue
        points = sorted({float(r["point"]) for r in sub})
        dim = max(int(r["component"]) for r in sub) + 1
        pos = {x: i for i, x in enumerate(points)}
        values = np.zeros((len(points), dim))
        for r in sub:
            values[pos[float(r["point"])], int(r["component"])] = float(r["value"])
        out.append(StepFunctionVec(axis, np.array(points), values))
    return out
