"""Galerkin assembly of the coupled interior/boundary operators.

A single conforming piecewise-(bi)linear field carries both the interior
and the boundary unknowns, so the trace constraint and the weak Neumann
coupling are automatic. At a fixed time the whole linear operator is the
pair (Mass, Stiff):

* ``Mass``  = bulk mass + boundary mass, the discrete inner product of
  L2(M) + L2(boundary).
* ``Stiff`` = bulk stiffness + boundary stiffness - m-weighted bulk mass
  - m_b-weighted boundary mass, the discrete energy inner product.

The first-order system then reads du/dt = w, Mass dw/dt = -Stiff u + load,
which is skew-adjoint in the (Stiff, Mass) inner product. That structure
is exact at the discrete level and is what the property checks probe.

Coefficients are sampled at the nodes and averaged per cell, which keeps
all matrices exactly symmetric and second-order accurate.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field as dc_field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import ScalarField
from .geometry import Mesh, MetricError, MetricSample, MetricSpec, sample_metric

__all__ = [
    "StateVector",
    "DiscreteOperator",
    "assemble",
    "apply_generator",
    "x_inner",
    "x_norm",
    "WaveOperators",
    "FrozenOperators",
]


@dataclass
class StateVector:
    """Discrete state (u, w): field values and velocity values per node.

    Boundary traces are the restrictions of u and w to the boundary node
    ids; they are never stored separately.
    """

    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u)
        self.w = np.asarray(self.w)
        if self.u.shape != self.w.shape:
            raise ValueError(f"u and w must have equal shapes, got {self.u.shape} vs {self.w.shape}")

    @property
    def n(self) -> int:
        return self.u.shape[0]

    def copy(self) -> "StateVector":
        return StateVector(self.u.copy(), self.w.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.w)))

    def __add__(self, other: "StateVector") -> "StateVector":
        return StateVector(self.u + other.u, self.w + other.w)

    def __sub__(self, other: "StateVector") -> "StateVector":
        return StateVector(self.u - other.u, self.w - other.w)

    def __mul__(self, c) -> "StateVector":
        return StateVector(c * self.u, c * self.w)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "StateVector":
        return cls(np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype))


def _lu_solve(lu, b: np.ndarray) -> np.ndarray:
    """splu solve that tolerates complex right-hand sides on real factors."""
    if np.iscomplexobj(b) and lu.U.dtype.kind != "c":
        flat = b.reshape(b.shape[0], -1)
        stacked = np.hstack([flat.real, flat.imag])
        out = lu.solve(stacked)
        k = flat.shape[1]
        return (out[:, :k] + 1j * out[:, k:]).reshape(b.shape)
    return lu.solve(b)


def _cg_solve(matrix: sp.spmatrix, b: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Conjugate-gradient fallback for SPD solves on large meshes."""
    diag = matrix.diagonal()
    precond = spla.LinearOperator(matrix.shape, matvec=lambda v: v / diag)

    def solve_one(rhs):
        x, info = spla.cg(matrix, rhs, rtol=rtol, atol=0.0, M=precond)
        if info != 0:
            raise RuntimeError(f"conjugate gradient failed to converge (info={info})")
        return x

    if b.ndim == 1:
        if np.iscomplexobj(b):
            return solve_one(b.real) + 1j * solve_one(b.imag)
        return solve_one(b)
    cols = [
        (solve_one(b[:, j].real) + 1j * solve_one(b[:, j].imag))
        if np.iscomplexobj(b)
        else solve_one(b[:, j])
        for j in range(b.shape[1])
    ]
    return np.stack(cols, axis=1)


# direct sparse factorization up to this many dofs; beyond it the SPD
# solves fall back to conjugate gradients
DIRECT_SOLVE_LIMIT = 100_000
CG_RTOL = 1e-12


@dataclass
class DiscreteOperator:
    """Assembled mass/stiffness blocks at a fixed time, with solver caches."""

    t: float
    mesh: Mesh
    mass_bulk: sp.csr_matrix
    mass_bdry: sp.csr_matrix
    stiff_bulk: sp.csr_matrix
    stiff_bdry: sp.csr_matrix
    mass_m: sp.csr_matrix
    mass_mb: sp.csr_matrix
    mass: sp.csr_matrix
    stiff: sp.csr_matrix
    direct_limit: int = DIRECT_SOLVE_LIMIT
    _facs: dict = dc_field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def _factorize(self, key, matrix: sp.spmatrix):
        fac = self._facs.get(key)
        if fac is None:
            fac = spla.splu(matrix.tocsc())
            self._facs[key] = fac
        return fac

    def _solve_spd(self, key, matrix: sp.spmatrix, b: np.ndarray) -> np.ndarray:
        if self.n <= self.direct_limit:
            return _lu_solve(self._factorize(key, matrix), b)
        return _cg_solve(matrix, b)

    def mass_solve(self, b: np.ndarray) -> np.ndarray:
        return self._solve_spd("mass", self.mass, b)

    def stiff_solve(self, b: np.ndarray) -> np.ndarray:
        # requires a strictly negative mass somewhere, else Stiff is singular
        return _lu_solve(self._factorize("stiff", self.stiff), b)

    def shifted_solve(self, c: float, b: np.ndarray) -> np.ndarray:
        """Solve (Mass + c Stiff) x = b; c > 0 keeps the matrix SPD."""
        key = ("shift", float(c))
        if self.n <= self.direct_limit:
            fac = self._facs.get(key)
            if fac is None:
                fac = spla.splu((self.mass + c * self.stiff).tocsc())
                self._facs[key] = fac
            return _lu_solve(fac, b)
        matrix = self._facs.setdefault(("shift-mat", float(c)), self.mass + c * self.stiff)
        return _cg_solve(matrix, b)

    def load_vector(self, f_bulk: np.ndarray, g_bdry: Optional[np.ndarray]) -> np.ndarray:
        """Consistent load of nodal source values (bulk f, boundary g)."""
        load = self.mass_bulk @ f_bulk
        if g_bdry is not None:
            g_full = np.zeros(self.n, dtype=np.result_type(f_bulk, g_bdry))
            g_full[self.mesh.boundary_node_ids] = g_bdry
            load = load + self.mass_bdry @ g_full
        return load

    def source_norm(self, f_bulk: np.ndarray, g_bdry: Optional[np.ndarray]) -> float:
        """X-norm of the source element (0, (f, g))."""
        val = np.vdot(f_bulk, self.mass_bulk @ f_bulk)
        if g_bdry is not None:
            g_full = np.zeros(self.n, dtype=np.result_type(f_bulk, g_bdry))
            g_full[self.mesh.boundary_node_ids] = g_bdry
            val = val + np.vdot(g_full, self.mass_bdry @ g_full)
        return float(np.sqrt(max(val.real, 0.0)))


def _scatter(n, cells, base, coefs):
    """Accumulate coef_c * base over cells into an n x n CSR matrix."""
    k = cells.shape[1]
    data = coefs[:, None, None] * base[None, :, :]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    mat = sp.coo_matrix((data.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def _m1(h: float) -> np.ndarray:
    return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])


def _k1(h: float) -> np.ndarray:
    return 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])


def assemble(
    mesh: Mesh,
    sample: MetricSample,
    m_field: Union[ScalarField, np.ndarray],
    m_b_field: Union[ScalarField, np.ndarray],
) -> DiscreteOperator:
    """Assemble the discrete operator pair at the sample's time.

    ``m_field``/``m_b_field`` may be ScalarFields (evaluated at the nodes)
    or already-sampled nodal arrays. Positive mass values are rejected.
    """
    if sample.mesh is not mesh and sample.bulk_density.shape[0] != mesh.n_nodes:
        raise ValueError("metric sample does not match mesh")
    n = mesh.n_nodes
    t = sample.t
    bids = mesh.boundary_node_ids

    if isinstance(m_field, ScalarField):
        m_vals = (
            m_field(t, mesh.node_x)
            if mesh.kind == "interval"
            else m_field(t, mesh.node_x, mesh.node_theta)
        )
    else:
        m_vals = np.asarray(m_field, dtype=float)
    if isinstance(m_b_field, ScalarField):
        m_b_vals = (
            m_b_field(t, mesh.node_x[bids])
            if mesh.kind == "interval"
            else m_b_field(t, mesh.node_x[bids], mesh.node_theta[bids])
        )
    else:
        m_b_vals = np.asarray(m_b_field, dtype=float)
    if np.any(m_vals > 0):
        i = int(np.argmax(m_vals))
        raise MetricError(f"bulk mass m must be <= 0, found {m_vals[i]:.6g} at node {i}, t={t:.6g}")
    if np.any(m_b_vals > 0):
        i = int(np.argmax(m_b_vals))
        raise MetricError(f"boundary mass m_b must be <= 0, found {m_b_vals[i]:.6g} at boundary node {i}, t={t:.6g}")

    if mesh.kind == "interval":
        h = mesh.h_x
        cells = mesh.cells
        dens_c = 0.5 * (sample.bulk_density[cells[:, 0]] + sample.bulk_density[cells[:, 1]])
        stiff_coef = sample.inv_xx * sample.bulk_density  # = 1/a
        stiff_c = 0.5 * (stiff_coef[cells[:, 0]] + stiff_coef[cells[:, 1]])
        mcoef = m_vals * sample.bulk_density
        m_c = 0.5 * (mcoef[cells[:, 0]] + mcoef[cells[:, 1]])

        mass_bulk = _scatter(n, cells, _m1(h), dens_c)
        stiff_bulk = _scatter(n, cells, _k1(h), stiff_c)
        mass_m = _scatter(n, cells, _m1(h), m_c)

        # zero-dimensional boundary: unit point masses at the two endpoints
        mass_bdry = sp.csr_matrix(
            (sample.boundary_density, (bids, bids)), shape=(n, n)
        )
        stiff_bdry = sp.csr_matrix((n, n))
        mass_mb = sp.csr_matrix((m_b_vals * sample.boundary_density, (bids, bids)), shape=(n, n))
    else:
        hx, ht = mesh.h_x, mesh.h_theta
        cells = mesh.cells
        mass_base = np.kron(_m1(hx), _m1(ht))
        kx_base = np.kron(_k1(hx), _m1(ht))
        kt_base = np.kron(_m1(hx), _k1(ht))

        def cell_mean(nodal):
            return nodal[cells].mean(axis=1)

        dens_c = cell_mean(sample.bulk_density)
        cx = cell_mean(sample.inv_xx * sample.bulk_density)  # = b/a
        ct = cell_mean(sample.inv_tt * sample.bulk_density)  # = a/b
        mc = cell_mean(m_vals * sample.bulk_density)

        mass_bulk = _scatter(n, cells, mass_base, dens_c)
        stiff_bulk = _scatter(n, cells, kx_base, cx) + _scatter(n, cells, kt_base, ct)
        mass_m = _scatter(n, cells, mass_base, mc)

        edges = mesh.boundary_edges
        bdry_full = np.zeros(n)
        bdry_full[bids] = sample.boundary_density
        dens_e = 0.5 * (bdry_full[edges[:, 0]] + bdry_full[edges[:, 1]])
        inv_full = np.zeros(n)
        inv_full[bids] = 1.0 / sample.boundary_density
        inv_e = 0.5 * (inv_full[edges[:, 0]] + inv_full[edges[:, 1]])
        mb_full = np.zeros(n)
        mb_full[bids] = m_b_vals * sample.boundary_density
        mb_e = 0.5 * (mb_full[edges[:, 0]] + mb_full[edges[:, 1]])

        mass_bdry = _scatter(n, edges, _m1(ht), dens_e)
        stiff_bdry = _scatter(n, edges, _k1(ht), inv_e)
        mass_mb = _scatter(n, edges, _m1(ht), mb_e)

    mass = (mass_bulk + mass_bdry).tocsr()
    stiff = (stiff_bulk + stiff_bdry - mass_m - mass_mb).tocsr()
    return DiscreteOperator(
        t=t,
        mesh=mesh,
        mass_bulk=mass_bulk,
        mass_bdry=mass_bdry,
        stiff_bulk=stiff_bulk,
        stiff_bdry=stiff_bdry,
        mass_m=mass_m,
        mass_mb=mass_mb,
        mass=mass,
        stiff=stiff,
    )


def apply_generator(op: DiscreteOperator, X: StateVector) -> StateVector:
    """Forward generator action: (u, w) -> (w, -Mass^{-1} Stiff u)."""
    if X.u.shape[0] != op.n:
        raise ValueError(f"state has {X.u.shape[0]} dofs, operator expects {op.n}")
    return StateVector(X.w.copy(), -op.mass_solve(op.stiff @ X.u))


def _inner_arrays(op: DiscreteOperator, au, aw, bu, bw):
    # literal orientation u_a' Stiff conj(u_b): the matrices multiply the
    # second argument, so a symmetry defect in Stiff is observable
    bu_c = np.conj(bu) if np.iscomplexobj(bu) else bu
    bw_c = np.conj(bw) if np.iscomplexobj(bw) else bw
    su = op.stiff @ bu_c
    sw = op.mass @ bw_c
    if au.ndim == 1:
        return np.dot(au, su) + np.dot(aw, sw)
    return np.sum(au * su, axis=0) + np.sum(aw * sw, axis=0)


def x_inner(op: DiscreteOperator, X: StateVector, Y: StateVector):
    """Weighted inner product u_X' Stiff conj(u_Y) + w_X' Mass conj(w_Y)."""
    if X.u.shape[0] != op.n or Y.u.shape[0] != op.n:
        raise ValueError("state dimensions do not match operator")
    return _inner_arrays(op, X.u, X.w, Y.u, Y.w)


def x_norm(op: DiscreteOperator, X: StateVector) -> float:
    val = x_inner(op, X, X)
    return float(np.sqrt(max(np.real(val), 0.0)))


def u_norm_V(op: DiscreteOperator, X: StateVector) -> float:
    val = np.vdot(X.u, op.stiff @ X.u)
    return float(np.sqrt(max(val.real, 0.0)))


def w_norm_U(op: DiscreteOperator, X: StateVector) -> float:
    val = np.vdot(X.w, op.mass @ X.w)
    return float(np.sqrt(max(val.real, 0.0)))


class WaveOperators:
    """Time-indexed operator provider with an LRU assembly cache.

    Assembled operators are immutable and shared; cache keys quantize time
    so uniform grids hit the cache exactly.
    """

    def __init__(self, mesh: Mesh, metric: MetricSpec, cache_size: int = 256, quantum: float = 1e-9):
        self.mesh = mesh
        self.metric = metric
        self.cache_size = int(cache_size)
        self.quantum = float(quantum)
        self._cache: OrderedDict[int, DiscreteOperator] = OrderedDict()

    @property
    def horizon(self) -> float:
        return self.metric.horizon

    def at(self, t: float) -> DiscreteOperator:
        key = round(float(t) / self.quantum)
        op = self._cache.get(key)
        if op is not None:
            self._cache.move_to_end(key)
            return op
        sample = sample_metric(self.metric, self.mesh, t)
        op = assemble(self.mesh, sample, self.metric.m, self.metric.m_b)
        self._cache[key] = op
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return op

    def frozen(self, t: float = 0.0) -> "FrozenOperators":
        return FrozenOperators(self.at(t), self.metric.horizon, self.metric)


class FrozenOperators:
    """Provider that always returns the operator frozen at one time."""

    def __init__(self, op: DiscreteOperator, horizon: float = np.inf, metric: Optional[MetricSpec] = None):
        self._op = op
        self.mesh = op.mesh
        self.horizon = horizon
        self.metric = metric

    def at(self, t: float) -> DiscreteOperator:
        return self._op

    def frozen(self, t: float = 0.0) -> "FrozenOperators":
        return self
