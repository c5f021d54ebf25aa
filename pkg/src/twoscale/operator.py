"""Cross-axis kernels and the block operator of the backfitting equations.

The duration-axis equation subtracts ``E1 dB`` from the marginal duration
estimator and the age-axis equation subtracts ``E2 dA`` from the marginal age
estimator.  On the grid both kernels are cumulative sums over cells of

    E1:  X(t_l)^- X_i(t_l)^T Z_i(t_l)          paired with age point u_m when
                                               u_m - a_i lies in duration cell l
    E2:  Z^{-a}(u_m)^- Z_i^{-a}(u_m)^T X_i^{-a}(u_m)  paired with duration point t_l
                                               when t_l + a_i lies in age cell m

and act on step functions through Stieltjes sums over backward differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import IncrementMatrix
from .grid import ThetaEstimate, TwoScaleGrid, difference_matrix
from .marginal import MarginalEstimate

DEFAULT_SPECTRAL_TOL = 0.02
_POWER_MAX_ITER = 200
_POWER_RTOL = 1e-10


@dataclass(frozen=True)
class KernelMatrices:
    """``E1`` shaped ``(j, p, k, q)`` and ``E2`` shaped ``(k, q, j, p)``."""

    E1: np.ndarray
    E2: np.ndarray

    @property
    def E1_mx(self) -> np.ndarray:
        j, p, k, q = self.E1.shape
        return self.E1.reshape(j * p, k * q)

    @property
    def E2_mx(self) -> np.ndarray:
        k, q, j, p = self.E2.shape
        return self.E2.reshape(k * q, j * p)


def duration_cell_of_age_point(grid: TwoScaleGrid, entry: np.ndarray) -> np.ndarray:
    """Index of the duration cell holding ``u_m - a_i``, shaped ``(k, n)``; -1 if none."""
    x = grid.a_points[:, None] - entry[None, :]
    idx = np.searchsorted(grid.t_points, x, side="left")
    return np.where((x > 0) & (x <= grid.t_max), idx, -1)


def age_cell_of_duration_point(grid: TwoScaleGrid, entry: np.ndarray) -> np.ndarray:
    """Index of the age cell holding ``t_l + a_i``, shaped ``(j, n)``; -1 if none.

    Duration point 0 is never paired since it carries no cell.
    """
    x = grid.t_points[:, None] + entry[None, :]
    idx = np.searchsorted(grid.a_points, x, side="left")
    valid = (x > grid.a0) & (x <= grid.a_max)
    valid[0] = False
    return np.where(valid, idx, -1)


def kernel_matrices(inc: IncrementMatrix, marginal: MarginalEstimate) -> KernelMatrices:
    """Evaluate both kernels on the grid.

    The pseudo-inverses come from ``marginal`` so that kernels and the marginal
    estimator share one rank rule.
    """
    grid = inc.grid
    j, k, p, q = grid.j, grid.k, inc.p, inc.q

    # H1[l, i] = X(t_l)^- e_i Z_i(t_l), a p x q block.
    H1 = np.einsum("lpn,lnq->lnpq", marginal.pinv_dur, inc.dur_Z)
    cell = duration_cell_of_age_point(grid, inc.entry)
    m_idx, i_idx = np.nonzero(cell >= 0)
    l_idx = cell[m_idx, i_idx]
    C1 = np.zeros((j, k, p, q))
    np.add.at(C1, (l_idx, m_idx), H1[l_idx, i_idx])
    E1 = np.cumsum(C1, axis=0).transpose(0, 2, 1, 3)

    H2 = np.einsum("mqn,mnp->mnqp", marginal.pinv_age, inc.age_X)
    cell = age_cell_of_duration_point(grid, inc.entry)
    l_idx, i_idx = np.nonzero(cell >= 0)
    m_idx = cell[l_idx, i_idx]
    C2 = np.zeros((k, j, q, p))
    np.add.at(C2, (m_idx, l_idx), H2[m_idx, i_idx])
    E2 = np.cumsum(C2, axis=0).transpose(0, 2, 1, 3)
    return KernelMatrices(E1, E2)


def ramp_correction(grid: TwoScaleGrid, p: int, q: int, d: int) -> np.ndarray:
    """Matrix of ``h -> (a - a0) h^{d}(t_max) / t_max`` from duration to age stacks."""
    R = np.zeros((grid.k * q, grid.j * p))
    slope = (grid.a_points - grid.a0) / grid.t_max
    for c in range(d):
        R[np.arange(grid.k) * q + c, (grid.j - 1) * p + c] = slope
    return R


def age_to_duration(grid: TwoScaleGrid, p: int, q: int) -> np.ndarray:
    """Map an age-axis function ``h`` to the duration axis by ``s -> h(a0 + s)``.

    Linear interpolation on the age grid (clamped at ``a_max``), so linear functions
    carry over exactly.  Components pair by index up to ``min(p, q)``.
    """
    u = grid.a_points
    x = np.minimum(grid.a0 + grid.t_points, grid.a_max)
    idx = np.clip(np.searchsorted(u, x, side="right") - 1, 0, grid.k - 2)
    w = (x - u[idx]) / (u[idx + 1] - u[idx])
    T = np.zeros((grid.j * p, grid.k * q))
    rows = np.arange(grid.j)
    for c in range(min(p, q)):
        T[rows * p + c, idx * q + c] = 1.0 - w
        T[rows * p + c, (idx + 1) * q + c] = w
    return T


@dataclass(frozen=True)
class BlockOperator:
    """Dense constrained operator ``Ebar`` on stacked ``(A, B)`` vectors.

    Also keeps the Stieltjes-form blocks ``E1_op`` (``(j p) x (k q)``),
    ``E2_op`` (``(k q) x (j p)``) and the ramp correction ``R`` so the
    unconstrained operator can be rebuilt.
    """

    matrix: np.ndarray
    E1_op: np.ndarray
    E2_op: np.ndarray
    R: np.ndarray
    grid: TwoScaleGrid
    p: int
    q: int
    d: int

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def t_max(self) -> float:
        return self.grid.t_max

    @property
    def a0(self) -> float:
        return self.grid.a0

    @property
    def split(self) -> int:
        return self.grid.j * self.p

    def unconstrained(self) -> np.ndarray:
        """The operator ``E`` without the identification correction."""
        return _blocks(self.E1_op, self.E2_op)

    def E2bar_op(self) -> np.ndarray:
        return self.E2_op - self.R

    def scaled(self, factor: float) -> BlockOperator:
        return BlockOperator(factor * self.matrix, factor * self.E1_op, factor * self.E2_op,
                             factor * self.R, self.grid, self.p, self.q, self.d)

    def to_bytes(self) -> bytes:
        """Header ``(p, q, j, k, d, t_max, a0, a_max)`` then the matrix, row-major float64."""
        g = self.grid
        header = np.array([self.p, self.q, g.j, g.k, self.d, g.t_max, g.a0, g.a_max], dtype="<f8")
        return header.tobytes() + np.ascontiguousarray(self.matrix, dtype="<f8").tobytes()

    def dump(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def load_operator_matrix(path) -> tuple[dict, np.ndarray]:
    """Read a binary dump written by :meth:`BlockOperator.dump`."""
    raw = np.fromfile(path, dtype="<f8")
    p, q, j, k, d, t_max, a0, a_max = raw[:8]
    size = int(p * j + q * k)
    meta = dict(p=int(p), q=int(q), j=int(j), k=int(k), d=int(d), t_max=t_max, a0=a0, a_max=a_max)
    return meta, raw[8:].reshape(size, size)


def _blocks(E1_op: np.ndarray, E2_op: np.ndarray) -> np.ndarray:
    na, nb = E1_op.shape
    out = np.zeros((na + nb, na + nb))
    out[:na, na:] = -E1_op
    out[na:, :na] = -E2_op
    return out


def assemble_block_operator(km: KernelMatrices, grid: TwoScaleGrid, d: int) -> BlockOperator:
    """Stieltjes-form blocks with the identification correction on the age block."""
    j, p, k, q = km.E1.shape
    if km.E2.shape != (k, q, j, p) or (j, k) != (grid.j, grid.k):
        raise ValueError("kernel shapes do not match each other or the grid")
    if not 0 <= d <= min(p, q):
        raise ValueError(f"d={d} must lie in [0, {min(p, q)}]")
    E1_op = km.E1_mx @ difference_matrix(k, q)
    E2_op = km.E2_mx @ difference_matrix(j, p)
    R = ramp_correction(grid, p, q, d)
    return BlockOperator(_blocks(E1_op, E2_op - R), E1_op, E2_op, R, grid, p, q, d)


def build_operator(inc: IncrementMatrix, marginal: MarginalEstimate) -> BlockOperator:
    return assemble_block_operator(kernel_matrices(inc, marginal), inc.grid, inc.d)


def apply_operator(op: BlockOperator, theta: ThetaEstimate) -> ThetaEstimate:
    vec = theta.stack()
    if vec.size != op.size or theta.p != op.p or theta.q != op.q:
        raise ValueError("theta does not match the operator's dimensions")
    return ThetaEstimate.unstack(op.matrix @ vec, op.grid, op.p, op.q)


def power_spectral_radius(matrix: np.ndarray, max_iter: int = _POWER_MAX_ITER,
                          rtol: float = _POWER_RTOL, seed: int = 0) -> tuple[float, bool]:
    """Spectral radius by power iteration on two-step growth.

    The block operators have eigenvalues in ``+-`` pairs, so one-step Rayleigh
    quotients oscillate; the square root of the two-step growth factor does not.
    Returns the estimate and whether it converged.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(matrix.shape[0])
    x /= np.linalg.norm(x)
    est = np.nan
    for _ in range(max_iter):
        y = matrix @ (matrix @ x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0, True
        new = float(np.sqrt(norm))
        x = y / norm
        if np.isfinite(est) and abs(new - est) <= rtol * max(new, 1e-300):
            return new, True
        est = new
    return est, False


@dataclass(frozen=True)
class SpectralReport:
    near_unit_E2: int
    near_unit_E: int
    spectral_radius: float
    converged: bool
    d: int
    tol: float

    @property
    def identifiable(self) -> bool:
        return self.near_unit_E2 == self.d and self.near_unit_E == self.d

    def as_dict(self) -> dict:
        return dict(near_unit_E2=self.near_unit_E2, near_unit_E=self.near_unit_E,
                    spectral_radius=self.spectral_radius, power_iteration_converged=self.converged,
                    d=self.d, tol=self.tol, identifiable=self.identifiable)


def spectral_report(op: BlockOperator, tol: float = DEFAULT_SPECTRAL_TOL) -> SpectralReport:
    """Count near-unit eigen-directions of ``E2`` and ``E`` and estimate ``rho(Ebar)``.

    Near-unit directions are singular values below ``tol`` of ``I - E`` and of
    ``I - T E2``, where ``T`` reads an age function back on the duration axis
    through ``s -> a0 + s`` (the identification family maps ``c s`` to
    ``c (a - a0)``).  On the grid the
    eigenfunctions of the identification family hold only to first order in the
    spacing, so ``tol`` must sit above that discretization error.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    sv_E = np.linalg.svd(np.eye(op.size) - op.unconstrained(), compute_uv=False)
    T = age_to_duration(op.grid, op.p, op.q)
    sv_E2 = np.linalg.svd(np.eye(op.split) - T @ op.E2_op, compute_uv=False)
    rho, converged = power_spectral_radius(op.matrix)
    if not converged:
        warnings.warn("power iteration did not converge; reporting last estimate", RuntimeWarning)
    return SpectralReport(int(np.sum(sv_E2 < tol)), int(np.sum(sv_E < tol)), rho, converged, op.d, tol)
