"""Multi-resolution training data: Darcy flow with thresholded GRF coefficients,
plus a cheap 1D diffusion problem used as a test fixture."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import cg

from .multires import GridField, ResolutionLevel, restrict_array

log = logging.getLogger(__name__)

COEFF_HIGH = 12.0
COEFF_LOW = 3.0


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class GrfSpec:
    resolution: ResolutionLevel
    shift: float = 9.0
    exponent: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.shift <= 0 or self.exponent <= 0:
            raise ValueError("GRF shift and exponent must be positive")


def cosine_basis(R: int) -> np.ndarray:
    """``C[p, j] = cos(j * pi * x_p)`` on the R nodes of [0, 1]."""
    x = np.linspace(0.0, 1.0, R)
    return np.cos(np.pi * np.outer(x, np.arange(R)))


def grf_mode_std(R: int, shift: float = 9.0, exponent: float = 2.0) -> np.ndarray:
    """Standard deviation ``(pi^2 (j^2 + k^2) + shift)^-exponent`` of each cosine mode."""
    j = np.arange(R)
    lam = np.pi**2 * (j[:, None] ** 2 + j[None, :] ** 2)
    return (lam + shift) ** (-exponent)


def sample_grf_modes(R: int, rng: np.random.Generator, n: int = 1,
                     shift: float = 9.0, exponent: float = 2.0) -> np.ndarray:
    """Draw ``n`` fields, returned with shape (n, R, R).

    Each field is a sum of Neumann cosine eigenfunctions with independent
    Gaussian weights; the sum over all R x R resolvable modes is evaluated with
    the cosine matrix (an inverse DCT-I).
    """
    C = cosine_basis(R)
    xi = rng.standard_normal((n, R, R)) * grf_mode_std(R, shift, exponent)
    return C @ xi @ C.T


def sample_grf(spec: GrfSpec) -> GridField:
    rng = np.random.default_rng(spec.seed)
    R = spec.resolution.points_per_side
    mu = sample_grf_modes(R, rng, 1, spec.shift, spec.exponent)[0]
    return GridField(spec.resolution, mu)


def threshold_coefficient(mu: GridField) -> GridField:
    return GridField(mu.level, np.where(mu.values >= 0.0, COEFF_HIGH, COEFF_LOW))


def darcy_matrix(a: np.ndarray) -> sp.csr_matrix:
    """Five-point conservative discretisation of ``-div(a grad u)`` on interior nodes.

    Face coefficients are arithmetic means of the two adjacent node values;
    Dirichlet boundary nodes are eliminated.
    """
    R = a.shape[0]
    n = R - 2
    h2 = (1.0 / (R - 1)) ** 2
    # face between nodes (p, q) and (p + 1, q), p = 0..R-2
    ax = 0.5 * (a[1:, :] + a[:-1, :])
    ay = 0.5 * (a[:, 1:] + a[:, :-1])
    west = ax[:-1, 1:-1]
    east = ax[1:, 1:-1]
    south = ay[1:-1, :-1]
    north = ay[1:-1, 1:]
    diag = (west + east + south + north).ravel() / h2
    # unknown (p, q) -> p * n + q, p along axis 0
    off_q = -north[:, :-1].copy() / h2
    off_q = np.concatenate([off_q, np.zeros((n, 1))], axis=1).ravel()[:-1]
    off_p = (-east[:-1, :] / h2).ravel()
    A = sp.diags(
        [diag, off_q, off_q, off_p, off_p],
        [0, 1, -1, n, -n],
        shape=(n * n, n * n),
        format="csr",
    )
    return A


def solve_darcy(a: GridField, tol: float = 1e-10, rhs: np.ndarray | float = 1.0,
                max_iter: int | None = None) -> GridField:
    """Solve ``-div(a grad u) = rhs`` with ``u = 0`` on the boundary.

    Jacobi-preconditioned CG, stopped at ``||r|| <= tol * ||b||``.
    ``rhs`` may be a scalar or an array of node values.
    """
    values = a.values
    if values.ndim != 2:
        raise ValueError("solve_darcy expects a 2D field")
    if np.any(values <= 0.0):
        raise ValueError("diffusion coefficient must be strictly positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = values.shape[0]
    A = darcy_matrix(values)
    f = np.broadcast_to(np.asarray(rhs, dtype=np.float64), values.shape)
    b = np.ascontiguousarray(f[1:-1, 1:-1]).ravel()
    u = np.zeros_like(values)
    if not np.any(b):
        return GridField(a.level, u)
    max_iter = 50 * R if max_iter is None else max_iter
    M = sp.diags(1.0 / A.diagonal())
    x, info = cg(A, b, rtol=tol, atol=0.0, maxiter=max_iter, M=M)
    if info != 0:
        raise SolverError(f"CG did not reach tol={tol} in {max_iter} iterations")
    u[1:-1, 1:-1] = x.reshape(R - 2, R - 2)
    return GridField(a.level, u)


def solve_diffusion_1d(a: np.ndarray, rhs: np.ndarray | float = 1.0) -> np.ndarray:
    """Tridiagonal solve of ``-(a u')' = rhs`` with zero Dirichlet ends."""
    a = np.asarray(a, dtype=np.float64)
    R = a.shape[0]
    h2 = (1.0 / (R - 1)) ** 2
    face = 0.5 * (a[1:] + a[:-1])
    n = R - 2
    ab = np.zeros((3, n))
    ab[1] = (face[:-1] + face[1:]) / h2
    ab[0, 1:] = -face[1:-1] / h2
    ab[2, :-1] = -face[1:-1] / h2
    f = np.broadcast_to(np.asarray(rhs, dtype=np.float64), a.shape)[1:-1]
    u = np.zeros(R)
    u[1:-1] = solve_banded((1, 1), ab, f)
    return u


@dataclass
class MultiResDataset:
    """N input/output pairs stored at every level of a nested hierarchy.

    ``inputs[i]`` and ``outputs[i]`` are arrays of shape ``(N, R_i, ...)``
    (level i = list position i, coarsest first).
    """

    hierarchy: list[ResolutionLevel]
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.hierarchy) or len(self.outputs) != len(self.hierarchy):
            raise ValueError("one input and one output array per level required")
        n = self.inputs[0].shape[0]
        for lvl, x, y in zip(self.hierarchy, self.inputs, self.outputs):
            R = lvl.points_per_side
            if x.shape != y.shape or x.shape[0] != n or any(s != R for s in x.shape[1:]):
                raise ValueError(f"inconsistent arrays at level {lvl.index}")
        for arr in (*self.inputs, *self.outputs):
            arr.flags.writeable = False

    @property
    def n_samples(self) -> int:
        return self.inputs[0].shape[0]

    @property
    def m(self) -> int:
        return len(self.hierarchy)

    @property
    def dim(self) -> int:
        return self.inputs[0].ndim - 1

    @property
    def resolutions(self) -> list[int]:
        return [lvl.points_per_side for lvl in self.hierarchy]

    def level_position(self, points_per_side: int) -> int:
        try:
            return self.resolutions.index(points_per_side)
        except ValueError:
            raise ValueError(f"dataset has no level with R={points_per_side}") from None

    def input(self, level: int, j: int) -> GridField:
        return GridField(self.hierarchy[level], self.inputs[level][j])

    def output(self, level: int, j: int) -> GridField:
        return GridField(self.hierarchy[level], self.outputs[level][j])

    def equals(self, other: MultiResDataset) -> bool:
        return (
            self.resolutions == other.resolutions
            and all(np.array_equal(a, b) for a, b in zip(self.inputs, other.inputs))
            and all(np.array_equal(a, b) for a, b in zip(self.outputs, other.outputs))
        )


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # independent stream per (seed, index): results do not depend on ordering
    return np.random.default_rng([seed, index])


def _pyramid(fine: np.ndarray, hierarchy: list[ResolutionLevel], dim: int) -> list[np.ndarray]:
    return [restrict_array(fine, lvl.points_per_side, dim) for lvl in hierarchy]


def build_dataset(n: int, hierarchy: list[ResolutionLevel], grf_spec: GrfSpec | None = None,
                  tol: float = 1e-10, seed: int = 0) -> MultiResDataset:
    """Darcy pairs solved on the finest level and injected onto every coarser one."""
    if n < 1:
        raise ValueError("need at least one sample")
    fine = hierarchy[-1]
    shift = grf_spec.shift if grf_spec else 9.0
    exponent = grf_spec.exponent if grf_spec else 2.0
    R = fine.points_per_side
    a_fine = np.empty((n, R, R))
    u_fine = np.empty((n, R, R))
    start = time.perf_counter()
    for j in range(n):
        spec = GrfSpec(fine, shift, exponent, seed=0)
        mu = sample_grf_modes(R, _sample_rng(seed, j), 1, spec.shift, spec.exponent)[0]
        a = threshold_coefficient(GridField(fine, mu))
        u = solve_darcy(a, tol)
        a_fine[j] = a.values
        u_fine[j] = u.values
    log.info("solved %d Darcy samples at R=%d in %.1fs", n, R, time.perf_counter() - start)
    return MultiResDataset(
        hierarchy=list(hierarchy),
        inputs=_pyramid(a_fine, hierarchy, 2),
        outputs=_pyramid(u_fine, hierarchy, 2),
        provenance={
            "problem": "darcy",
            "seed": int(seed),
            "grf_shift": shift,
            "grf_exponent": exponent,
            "solver": "pcg-jacobi",
            "solver_tol": tol,
        },
    )


def smooth_coefficient_1d(x: np.ndarray, rng: np.random.Generator, n_modes: int = 4) -> np.ndarray:
    """``exp(sum_k xi_k cos(k pi x) / k^2)``: smooth and bounded away from zero."""
    xi = rng.standard_normal(n_modes) * 0.5
    k = np.arange(1, n_modes + 1)
    return np.exp(np.cos(np.pi * np.outer(x, k)) @ (xi / k**2))


def synthetic1d_dataset(n: int, hierarchy: list[ResolutionLevel], seed: int = 0) -> MultiResDataset:
    if n < 1:
        raise ValueError("need at least one sample")
    fine = hierarchy[-1]
    x = fine.coordinates()
    a_fine = np.empty((n, x.size))
    u_fine = np.empty((n, x.size))
    for j in range(n):
        a_fine[j] = smooth_coefficient_1d(x, _sample_rng(seed, j))
        u_fine[j] = solve_diffusion_1d(a_fine[j])
    return MultiResDataset(
        hierarchy=list(hierarchy),
        inputs=_pyramid(a_fine, hierarchy, 1),
        outputs=_pyramid(u_fine, hierarchy, 1),
        provenance={"problem": "synthetic1d", "seed": int(seed), "solver": "tridiagonal"},
    )
