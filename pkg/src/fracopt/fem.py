"""Weighted finite elements on the truncated cylinder.

Q1 tensor-product elements with the degenerate/singular weight y^alpha,
alpha = 1 - 2s.  The bilinear form carries the 1/d_s prefactor, so the
right-hand side is the plain duality pairing against the trace and the
computed trace converges to the solution of the fractional problem itself.

Assembly is exact: the y-direction factors are integrated in closed form
(valid down to the singular first interval), the base factors are the
standard uniform-mesh mass/stiffness matrices, and the global operator is a
sum of Kronecker products restricted to the free unknowns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .meshes import BasePartition, TensorMesh
from .spectral import ConfigurationError, FractionalConstants

__all__ = [
    "BaseQuadrature",
    "CylinderOperator",
    "FeField",
    "InconsistencyError",
    "SolverError",
    "TraceField",
    "assemble_stiffness",
    "assemble_trace_load",
    "energy_error_galerkin",
    "l2_trace_error",
    "solve_adjoint",
    "solve_state",
    "trace",
]

# sparse direct factorization up to this many unknowns, Jacobi-PCG beyond
DIRECT_SOLVE_LIMIT = 80_000
SOLVER_RTOL = 1e-10


class SolverError(RuntimeError):
    """Linear solve failed its residual contract."""

    def __init__(self, message: str, relative_residual: float):
        super().__init__(f"{message} (relative residual {relative_residual:.3e})")
        self.relative_residual = relative_residual


class InconsistencyError(RuntimeError):
    """An identity that should be nonnegative came out substantially negative."""


# ---------------------------------------------------------------------------
# Quadrature on the base mesh.
# ---------------------------------------------------------------------------


def _gauss_01(npts: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


class BaseQuadrature:
    """Tensor Gauss rule per base cell plus Q1 shape values at the points.

    npts points per direction integrate polynomials of degree 2*npts-1
    exactly; npts=3 covers the degree-4 contract for loads and npts=4 the
    degree-7 contract for the error identity.
    """

    def __init__(self, base: BasePartition, npts: int):
        self.base = base
        xi, w = _gauss_01(npts)
        h = base.h
        if base.n == 1:
            self.ref_points = xi[:, None]
            self.weights = w * h
            self.shapes = np.stack([1.0 - xi, xi])  # (2, nq)
        else:
            X, Y = np.meshgrid(xi, xi, indexing="ij")
            self.ref_points = np.stack([X.ravel(), Y.ravel()], axis=1)
            self.weights = np.outer(w, w).ravel() * h * h
            gx, gy = self.ref_points[:, 0], self.ref_points[:, 1]
            self.shapes = np.stack(
                [(1 - gx) * (1 - gy), gx * (1 - gy), (1 - gx) * gy, gx * gy]
            )  # (4, nq) in corner order (00, 10, 01, 11)
        # physical points, shape (#cells, nq, n)
        self.points = base.cell_origins[:, None, :] + h * self.ref_points[None, :, :]

    @property
    def n_points(self) -> int:
        return len(self.weights)

    def coords(self) -> Tuple[np.ndarray, ...]:
        return tuple(self.points[:, :, d] for d in range(self.base.n))

    def eval_callable(self, fn: Callable) -> np.ndarray:
        vals = np.asarray(fn(*self.coords()), dtype=float)
        return np.broadcast_to(vals, self.points.shape[:2])

    def integrate(self, values: np.ndarray) -> float:
        return float((values * self.weights).sum())

    def node_load(self, values: np.ndarray) -> np.ndarray:
        """Assemble integral of values * hat_i into a full base-node vector."""
        local = (values * self.weights) @ self.shapes.T  # (#cells, 2^n)
        out = np.zeros(self.base.n_nodes)
        np.add.at(out, self.base.cells, local)
        return out

    def cell_averages(self, fn: Callable) -> np.ndarray:
        return self.eval_callable(fn) @ self.weights / self.base.cell_volume


# ---------------------------------------------------------------------------
# Fields.
# ---------------------------------------------------------------------------


@dataclass
class TraceField:
    """Continuous multilinear function on the base domain, zero on its boundary."""

    base: BasePartition
    values: np.ndarray  # one coefficient per interior base node

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.base.n_interior,):
            raise ConfigurationError(
                f"trace field needs {self.base.n_interior} values, got {self.values.shape}"
            )

    def full_values(self) -> np.ndarray:
        out = np.zeros(self.base.n_nodes)
        out[self.base.interior_nodes] = self.values
        return out

    def corner_values(self) -> np.ndarray:
        return self.full_values()[self.base.cells]

    def at_quadrature(self, quad: BaseQuadrature) -> np.ndarray:
        return self.corner_values() @ quad.shapes

    def cell_averages(self) -> np.ndarray:
        # exact for multilinear functions on tensor cells
        return self.corner_values().mean(axis=1)

    def evaluate(self, *coords) -> np.ndarray:
        N = self.base.cells_per_side
        full = self.full_values()
        xs = [np.asarray(c, dtype=float) for c in coords]
        idx = [np.clip(np.floor(x * N).astype(int), 0, N - 1) for x in xs]
        loc = [x * N - i for x, i in zip(xs, idx)]
        if self.base.n == 1:
            i = idx[0]
            return (1 - loc[0]) * full[i] + loc[0] * full[i + 1]
        i, j = idx
        xi, eta = loc
        sw = j * (N + 1) + i
        return (
            (1 - xi) * (1 - eta) * full[sw]
            + xi * (1 - eta) * full[sw + 1]
            + (1 - xi) * eta * full[sw + N + 1]
            + xi * eta * full[sw + N + 2]
        )

    def to_csv(self, path) -> None:
        coords = self.base.node_coords
        vals = self.full_values()
        header = ",".join(f"x{d+1}" for d in range(self.base.n)) + ",value"
        data = np.column_stack([coords, vals])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.16e")


@dataclass
class FeField:
    """Member of the cylinder FE space; Dirichlet coefficients implicitly zero."""

    mesh: TensorMesh
    free_values: np.ndarray

    def __post_init__(self):
        self.free_values = np.asarray(self.free_values, dtype=float)
        if self.free_values.shape != (self.mesh.n_free,):
            raise ConfigurationError(
                f"field needs {self.mesh.n_free} free values, got {self.free_values.shape}"
            )

    def node_values(self) -> np.ndarray:
        out = np.zeros(self.mesh.n_nodes)
        out[self.mesh.free_nodes] = self.free_values
        return out

    def trace(self) -> TraceField:
        return TraceField(self.mesh.base, self.free_values[: self.mesh.n_trace].copy())

    def to_csv(self, path) -> None:
        coords = self.mesh.node_coordinates()
        header = ",".join(f"x{d+1}" for d in range(self.mesh.n)) + ",y,value"
        data = np.column_stack([coords, self.node_values()])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.16e")


def trace(v: FeField) -> TraceField:
    return v.trace()


# ---------------------------------------------------------------------------
# Closed-form weighted integrals in the extended direction.
#
# On [y0, y1] with hat functions l0, l1 we need  int y^a l_i l_j  and
# int y^a l_i' l_j'.  Everything reduces to the power moments
# P(b) = int y^b dy and the shifted moments Q_m = int y^a (y-y0)^m dy,
# evaluated through expm1/log1p so nearly-cancelling powers stay accurate on
# strongly graded meshes.
# ---------------------------------------------------------------------------


def _power_moment(y0: np.ndarray, y1: np.ndarray, beta: float) -> np.ndarray:
    b1 = beta + 1.0
    out = np.empty_like(y0)
    first = y0 == 0.0
    out[first] = y1[first] ** b1 / b1
    y0p = y0[~first]
    h = y1[~first] - y0p
    out[~first] = y0p**b1 * np.expm1(b1 * np.log1p(h / y0p)) / b1
    return out


def weighted_interval_integrals(nodes: np.ndarray, alpha: float):
    """Per-interval local matrices for weight y^alpha on a 1D partition.

    Returns (stiff_coef, m00, m01, m11): the local stiffness is
    stiff_coef * [[1,-1],[-1,1]] and the local mass [[m00,m01],[m01,m11]].
    """
    y0, y1 = nodes[:-1], nodes[1:]
    h = y1 - y0
    q0 = _power_moment(y0, y1, alpha)
    r1 = _power_moment(y0, y1, alpha + 1.0)
    r2 = _power_moment(y0, y1, alpha + 2.0)
    q1 = (y1 ** (alpha + 1.0) * h - r1) / (alpha + 1.0)
    inner = (y1 ** (alpha + 2.0) * h - r2) / (alpha + 2.0)
    q2 = (y1 ** (alpha + 1.0) * h * h - 2.0 * inner) / (alpha + 1.0)
    h2 = h * h
    m00 = (h2 * q0 - 2.0 * h * q1 + q2) / h2
    m01 = (h * q1 - q2) / h2
    m11 = q2 / h2
    return q0 / h2, m00, m01, m11


def _tridiag(diag: np.ndarray, off: np.ndarray) -> sp.csr_matrix:
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr")


def extended_direction_matrices(nodes: np.ndarray, alpha: float):
    """Weighted stiffness and mass matrices over all 1D nodes of [0, Y]."""
    scoef, m00, m01, m11 = weighted_interval_integrals(nodes, alpha)
    m = len(nodes)
    sdiag = np.zeros(m)
    sdiag[:-1] += scoef
    sdiag[1:] += scoef
    mdiag = np.zeros(m)
    mdiag[:-1] += m00
    mdiag[1:] += m11
    return _tridiag(sdiag, -scoef), _tridiag(mdiag, m01)


def base_direction_matrices(N: int):
    """Stiffness and mass for P1 hats on the uniform partition of [0,1]."""
    h = 1.0 / N
    sdiag = np.full(N + 1, 2.0 / h)
    sdiag[0] = sdiag[-1] = 1.0 / h
    mdiag = np.full(N + 1, 2.0 * h / 3.0)
    mdiag[0] = mdiag[-1] = h / 3.0
    return _tridiag(sdiag, np.full(N, -1.0 / h)), _tridiag(mdiag, np.full(N, h / 6.0))


def base_matrices(base: BasePartition):
    """(stiffness, mass) over all base nodes, exact integrals."""
    S1, M1 = base_direction_matrices(base.cells_per_side)
    if base.n == 1:
        return S1.tocsr(), M1.tocsr()
    Sx = sp.kron(M1, S1) + sp.kron(S1, M1)  # node idx = j*(N+1)+i, x1 fastest
    Mx = sp.kron(M1, M1)
    return Sx.tocsr(), Mx.tocsr()


class CylinderOperator:
    """Assembled bilinear form a_Y over the free unknowns, with solver."""

    def __init__(self, mesh: TensorMesh, matrix: sp.csr_matrix, s: float, c: float):
        self.mesh = mesh
        self.matrix = matrix
        self.s = s
        self.c = c
        self.constants = FractionalConstants.from_order(s)
        self._lu = None
        self._pc = None
        self._norm1 = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def _direct(self):
        if self._lu is None:
            # factor the Jacobi-symmetrized system: the y^alpha weights on a
            # graded mesh spread the diagonal over many orders of magnitude,
            # and equilibration keeps the backward error of the LU in check.
            # MMD on A^T+A fills far less than COLAMD for this stencil.
            d = self.matrix.diagonal()
            scale = 1.0 / np.sqrt(d)
            S = sp.diags(scale)
            lu = spla.splu((S @ self.matrix @ S).tocsc(), permc_spec="MMD_AT_PLUS_A")
            self._lu = (lu, scale)
        return self._lu

    def _jacobi(self):
        if self._pc is None:
            d = self.matrix.diagonal()
            self._pc = spla.LinearOperator(self.matrix.shape, matvec=lambda v: v / d)
        return self._pc

    def _contract_met(self, x: np.ndarray, b: np.ndarray, bnorm: float) -> bool:
        """Residual contract: relative residual below tolerance, or the
        solution exact to machine backward error (the relative residual
        cannot be evaluated below eps*|K||x|/|b| in double precision)."""
        if self._norm1 is None:
            self._norm1 = float(abs(self.matrix).sum(axis=0).max())
        rnorm = float(np.linalg.norm(b - self.matrix @ x))
        if rnorm <= SOLVER_RTOL * bnorm:
            return True
        eta = rnorm / (self._norm1 * float(np.linalg.norm(x)) + bnorm)
        return eta <= 5e-15

    def solve(self, b: np.ndarray, x0: np.ndarray | None = None, method: str = "auto") -> np.ndarray:
        b = np.asarray(b, dtype=float)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros(self.n)
        if method == "auto":
            method = "direct" if self.n <= DIRECT_SOLVE_LIMIT else "cg"
        if method == "direct":
            lu, scale = self._direct()
            x = scale * lu.solve(scale * b)
            for _ in range(3):  # iterative refinement to secure the contract
                if self._contract_met(x, b, bnorm):
                    break
                x = x + scale * lu.solve(scale * (b - self.matrix @ x))
        elif method == "cg":
            maxiter = int(50 * math.sqrt(self.n)) + 100
            x, info = spla.cg(
                self.matrix, b, x0=x0, rtol=0.1 * SOLVER_RTOL, atol=0.0,
                maxiter=maxiter, M=self._jacobi()
            )
            if info > 0 and not self._contract_met(x, b, bnorm):
                rel = np.linalg.norm(b - self.matrix @ x) / bnorm
                raise SolverError(f"CG did not converge within {maxiter} iterations", rel)
        else:
            raise ConfigurationError(f"unknown solve method {method!r}")
        if not self._contract_met(x, b, bnorm):
            rel = float(np.linalg.norm(b - self.matrix @ x) / bnorm)
            raise SolverError(f"solver residual contract violated ({method})", rel)
        return x

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def energy_product(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.matrix @ v))

    def export_coo(self, path) -> None:
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {v:.16e}\n")


def assemble_stiffness(mesh: TensorMesh, s: float, c: float = 0.0) -> CylinderOperator:
    """Assemble (1/d_s) int y^alpha (grad w . grad phi + c w phi) on free DOFs."""
    if c < 0.0:
        raise ConfigurationError(f"coefficient c must be >= 0, got {c}")
    consts = FractionalConstants.from_order(s)
    Sy, My = extended_direction_matrices(mesh.extended.nodes, consts.alpha)
    M = mesh.extended.M
    Sy = Sy[:M, :M]
    My = My[:M, :M]
    Sx, Mx = base_matrices(mesh.base)
    ii = mesh.base.interior_nodes
    Sx = Sx[ii][:, ii]
    Mx = Mx[ii][:, ii]
    K = sp.kron(My, Sx) + sp.kron(Sy, Mx)
    if c != 0.0:
        K = K + c * sp.kron(My, Mx)
    K = (K * (1.0 / consts.d_s)).tocsr()
    K.sum_duplicates()
    return CylinderOperator(mesh, K, s, c)


# ---------------------------------------------------------------------------
# Loads, solves, error functionals.
# ---------------------------------------------------------------------------


def _values_at_quadrature(quad: BaseQuadrature, r) -> np.ndarray:
    if callable(r):
        return quad.eval_callable(r)
    if isinstance(r, TraceField):
        return r.at_quadrature(quad)
    if hasattr(r, "cell_values"):
        r = r.cell_values
    arr = np.asarray(r, dtype=float)
    if arr.ndim == 1 and len(arr) == quad.base.n_cells:
        return np.broadcast_to(arr[:, None], (quad.base.n_cells, quad.n_points))
    if arr.shape == (quad.base.n_cells, quad.n_points):
        return arr
    raise ConfigurationError(f"cannot interpret load data of shape {getattr(arr, 'shape', None)}")


def assemble_trace_load(mesh: TensorMesh, r, npts: int = 3) -> np.ndarray:
    """Load vector <r, tr W_i> over free DOFs (nonzero only on the y=0 layer).

    `r` may be a per-cell-constant control, a TraceField, a callable on the
    base domain, or precomputed values at the quadrature points.
    """
    quad = BaseQuadrature(mesh.base, npts)
    vals = _values_at_quadrature(quad, r)
    node_vec = quad.node_load(vals)
    b = np.zeros(mesh.n_free)
    b[: mesh.n_trace] = node_vec[mesh.base.interior_nodes]
    return b


def solve_state(op: CylinderOperator, load: np.ndarray, x0: FeField | None = None,
                method: str = "auto") -> FeField:
    x0v = x0.free_values if isinstance(x0, FeField) else x0
    return FeField(op.mesh, op.solve(np.asarray(load, dtype=float), x0=x0v, method=method))


def solve_adjoint(op: CylinderOperator, trace_mismatch, npts: int = 3,
                  x0: FeField | None = None, method: str = "auto") -> FeField:
    """Solve a_Y(P, W) = (mismatch, tr W); same operator since a_Y is symmetric."""
    load = assemble_trace_load(op.mesh, trace_mismatch, npts=npts)
    return solve_state(op, load, x0=x0, method=method)


def energy_error_galerkin(V: FeField, data: Callable, exact_trace: Callable, d_s: float,
                          npts: int = 4) -> float:
    """Weighted energy error via the duality identity

        ||grad(u_ext - V)||^2_{L2(y^alpha)} = d_s * int data * (tr u_ext - tr V),

    where `data` is the full trace datum of the exact state.  Quadrature is
    exact for degree 2*npts-1 >= 7.  Small negative roundoff is clamped;
    a substantially negative value signals an inconsistent input pair.
    """
    quad = BaseQuadrature(V.mesh.base, npts)
    diff = quad.eval_callable(exact_trace) - V.trace().at_quadrature(quad)
    val = d_s * float(((quad.eval_callable(data) * diff) * quad.weights).sum())
    if val < -1e-8:
        raise InconsistencyError(f"energy identity produced {val:.3e} < -1e-8")
    return math.sqrt(max(val, 0.0))


def l2_trace_error(U: TraceField, exact: Callable, npts: int = 4) -> float:
    """L2(base-domain) distance between a trace field and a reference function."""
    quad = BaseQuadrature(U.base, npts)
    diff = U.at_quadrature(quad) - quad.eval_callable(exact)
    return math.sqrt(quad.integrate(diff * diff))
