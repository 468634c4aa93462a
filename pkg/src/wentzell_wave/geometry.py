"""Model geometries and time-dependent diagonal metrics.

Two compact manifolds with boundary are supported:

* ``interval`` -- [0, L] with the two endpoints as boundary. The boundary
  is zero-dimensional, so boundary fields reduce to two scalars and there
  is no boundary Laplacian.
* ``cylinder`` -- [0, 1] x S^1 on a structured tensor grid, periodic in
  the angular direction. The boundary consists of the two circles x = 0
  and x = 1, each carrying a genuine one-dimensional Laplace-Beltrami
  operator.

Boundary unknowns are never stored separately: every boundary node is a
bulk node, so traces hold by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fields import ScalarField, make_field

__all__ = [
    "GeometryError",
    "MetricError",
    "Mesh",
    "MetricSpec",
    "MetricSample",
    "build_mesh",
    "sample_metric",
]


class GeometryError(ValueError):
    """Raised for invalid mesh resolution parameters."""


class MetricError(ValueError):
    """Raised when a sampled metric or mass violates its sign hypothesis."""


@dataclass(frozen=True)
class Mesh:
    """Structured mesh for one of the two model geometries.

    Nodes are enumerated deterministically: on the interval by ascending
    coordinate; on the cylinder with the angular index fastest, so node
    ``i * n_theta + j`` sits at ``(x_i, theta_j)``. ``boundary_node_ids``
    are ascending bulk node indices.
    """

    kind: str
    n_x: int
    length: float
    n_theta: int
    node_x: np.ndarray
    node_theta: Optional[np.ndarray]
    cells: np.ndarray
    boundary_node_ids: np.ndarray
    boundary_edges: Optional[np.ndarray]  # cylinder: (n_edges, 2) bulk ids per circle edge

    @property
    def n_nodes(self) -> int:
        return self.node_x.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_node_ids.shape[0]

    @property
    def h_x(self) -> float:
        return self.length / self.n_x

    @property
    def h_theta(self) -> float:
        return 2.0 * np.pi / self.n_theta if self.kind == "cylinder" else 0.0

    def boundary_normal_signs(self) -> np.ndarray:
        """Outward axial direction sign (+1 at x = L end, -1 at x = 0 end)."""
        x = self.node_x[self.boundary_node_ids]
        return np.where(x > 0.5 * self.length, 1.0, -1.0)


def build_mesh(kind: str, *, n_x: int, length: float = 1.0, n_theta: int = 0) -> Mesh:
    """Construct the interval or cylinder mesh with boundary extraction."""
    if kind == "interval":
        if n_x < 2:
            raise GeometryError(f"interval needs n_x >= 2, got {n_x}")
        if length <= 0:
            raise GeometryError(f"interval length must be positive, got {length}")
        node_x = np.linspace(0.0, length, n_x + 1)
        cells = np.column_stack([np.arange(n_x), np.arange(1, n_x + 1)])
        boundary = np.array([0, n_x], dtype=np.int64)
        return Mesh(
            kind="interval",
            n_x=n_x,
            length=length,
            n_theta=0,
            node_x=node_x,
            node_theta=None,
            cells=cells,
            boundary_node_ids=boundary,
            boundary_edges=None,
        )

    if kind == "cylinder":
        if n_x < 2:
            raise GeometryError(f"cylinder needs n_x >= 2, got {n_x}")
        if n_theta < 3:
            raise GeometryError(f"cylinder needs n_theta >= 3, got {n_theta}")
        axial = np.linspace(0.0, 1.0, n_x + 1)
        angular = 2.0 * np.pi * np.arange(n_theta) / n_theta
        node_x = np.repeat(axial, n_theta)
        node_theta = np.tile(angular, n_x + 1)

        ii, jj = np.meshgrid(np.arange(n_x), np.arange(n_theta), indexing="ij")
        jp = (jj + 1) % n_theta  # periodic angular neighbour
        # local corner order (x-index slow, theta-index fast) matches the
        # tensor-product element matrices in the assembly module
        cells = np.stack(
            [
                ii * n_theta + jj,
                ii * n_theta + jp,
                (ii + 1) * n_theta + jj,
                (ii + 1) * n_theta + jp,
            ],
            axis=-1,
        ).reshape(-1, 4)

        lower = np.arange(n_theta)
        upper = n_x * n_theta + np.arange(n_theta)
        boundary = np.concatenate([lower, upper])
        edges = []
        for circle in (lower, upper):
            nxt = np.roll(circle, -1)
            edges.append(np.column_stack([circle, nxt]))
        boundary_edges = np.vstack(edges)
        return Mesh(
            kind="cylinder",
            n_x=n_x,
            length=1.0,
            n_theta=n_theta,
            node_x=node_x,
            node_theta=node_theta,
            cells=cells,
            boundary_node_ids=boundary,
            boundary_edges=boundary_edges,
        )

    raise GeometryError(f"unknown geometry kind {kind!r}")


@dataclass(frozen=True)
class MetricSpec:
    """Time-dependent diagonal metric with mass terms and horizon T.

    On the interval the metric is a(t,x)^2 dx^2; on the cylinder
    a(t,x,theta)^2 dx^2 + b(t,x,theta)^2 dtheta^2. The mass fields must be
    non-positive wherever they are sampled.
    """

    a: ScalarField
    b: Optional[ScalarField]
    m: ScalarField
    m_b: ScalarField
    horizon: float = 1.0

    @classmethod
    def build(cls, kind: str, *, a="1", b="1", m="0", m_b="0", horizon: float = 1.0) -> "MetricSpec":
        if horizon <= 0:
            raise MetricError(f"horizon must be positive, got {horizon}")
        bulk_vars = ("t", "x") if kind == "interval" else ("t", "x", "theta")
        bdry_vars = ("t", "x") if kind == "interval" else ("t", "x", "theta")
        return cls(
            a=make_field(a, bulk_vars),
            b=make_field(b, bulk_vars) if kind == "cylinder" else None,
            m=make_field(m, bulk_vars),
            m_b=make_field(m_b, bdry_vars),
            horizon=float(horizon),
        )

    def is_autonomous_expr(self) -> bool:
        """Heuristic: no textual time dependence in any coefficient."""
        exprs = [self.a.expr, self.m.expr, self.m_b.expr]
        if self.b is not None:
            exprs.append(self.b.expr)
        return all("t" not in _strip_names(e) for e in exprs)


def _strip_names(expr: str) -> str:
    # remove function names so 'sqrt' etc. do not read as the variable t
    out = expr
    for name in ("theta", "sqrt", "tanh", "atan2", "atan", "exp", "tan", "sinh", "cosh", "sin", "cos", "log", "abs", "min", "max", "where"):
        out = out.replace(name, "")
    return out


@dataclass(frozen=True)
class MetricSample:
    """Metric data evaluated at the mesh nodes at a fixed time.

    ``bulk_density`` is sqrt|g| per node, ``boundary_density`` the induced
    surface density per boundary node (unit point masses on the interval).
    ``inv_xx``/``inv_tt`` are the diagonal inverse-metric entries used for
    gradient contraction. Quadrature weights follow the tensor trapezoid
    rule consistent with the piecewise-linear elements.
    """

    t: float
    mesh: Mesh
    coef_a: np.ndarray
    coef_b: Optional[np.ndarray]
    bulk_density: np.ndarray
    boundary_density: np.ndarray
    inv_xx: np.ndarray
    inv_tt: Optional[np.ndarray]
    bulk_quad_weights: np.ndarray = field(repr=False, default=None)
    boundary_quad_weights: np.ndarray = field(repr=False, default=None)

    def total_volume(self) -> float:
        return float(self.bulk_quad_weights @ self.bulk_density)

    def boundary_volume(self) -> float:
        return float(self.boundary_quad_weights @ self.boundary_density)


def _check_positive(values: np.ndarray, name: str, t: float, mesh: Mesh) -> None:
    bad = np.where(values <= 0.0)[0]
    if bad.size:
        i = int(bad[0])
        if mesh.node_theta is not None:
            where = f"x={mesh.node_x[i]:.6g}, theta={mesh.node_theta[i]:.6g}"
        else:
            where = f"x={mesh.node_x[i]:.6g}"
        raise MetricError(
            f"metric coefficient {name} is non-positive ({values[i]:.6g}) at t={t:.6g}, {where}"
        )


def sample_metric(spec: MetricSpec, mesh: Mesh, t: float) -> MetricSample:
    """Evaluate densities, inverse metric and quadrature weights at time t."""
    if not (0.0 <= t <= spec.horizon + 1e-12):
        raise MetricError(f"time {t} outside [0, {spec.horizon}]")

    if mesh.kind == "interval":
        a = spec.a(t, mesh.node_x)
        _check_positive(a, "a", t, mesh)
        density = a
        inv_xx = 1.0 / a**2
        coef_b = None
        inv_tt = None
        bdry_density = np.ones(mesh.n_boundary)
        w = np.full(mesh.n_nodes, mesh.h_x)
        w[0] = w[-1] = 0.5 * mesh.h_x
        bw = np.ones(mesh.n_boundary)
    else:
        a = spec.a(t, mesh.node_x, mesh.node_theta)
        b = spec.b(t, mesh.node_x, mesh.node_theta)
        _check_positive(a, "a", t, mesh)
        _check_positive(b, "b", t, mesh)
        density = a * b
        inv_xx = 1.0 / a**2
        inv_tt = 1.0 / b**2
        coef_b = b
        bdry_density = b[mesh.boundary_node_ids]
        w = np.full(mesh.n_nodes, mesh.h_x * mesh.h_theta)
        w[: mesh.n_theta] *= 0.5
        w[-mesh.n_theta :] *= 0.5
        bw = np.full(mesh.n_boundary, mesh.h_theta)

    return MetricSample(
        t=float(t),
        mesh=mesh,
        coef_a=a,
        coef_b=coef_b,
        bulk_density=density,
        boundary_density=bdry_density,
        inv_xx=inv_xx,
        inv_tt=inv_tt,
        bulk_quad_weights=w,
        boundary_quad_weights=bw,
    )
