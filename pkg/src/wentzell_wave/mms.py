"""Manufactured solutions: pick an exact field, derive matching sources
symbolically, and use the pair as a discretization-error oracle.

Given an exact u*(t, x[, theta]) and the metric coefficients, the bulk
source is F = u*_tt - Lap_g u* - m u* and the boundary source is
G = v_tt - Lap_h v - m_b v + (normal flux of u*), with v the boundary
trace. Both are lambdified to vectorized callables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy as sym

from .assembly import StateVector, WaveOperators
from .evolution import SourceTerm
from .geometry import Mesh, MetricSpec, build_mesh

__all__ = ["MMSCase", "make_case", "MMSSource"]

_T, _X, _TH = sym.symbols("t x theta", real=True)
_LOCALS = {"t": _T, "x": _X, "theta": _TH, "pi": sym.pi}


def _parse(expr: str) -> sym.Expr:
    return sym.sympify(expr, locals=_LOCALS)


class MMSSource(SourceTerm):
    """Source term bound to a mesh, evaluating the derived F and G."""

    def __init__(self, mesh: Mesh, f_fn, g_low_fn, g_high_fn):
        self.mesh = mesh
        self._f = f_fn
        self._g_low = g_low_fn
        self._g_high = g_high_fn

    def values(self, t: float):
        mesh = self.mesh
        if mesh.kind == "interval":
            f = np.asarray(self._f(t, mesh.node_x), dtype=float)
            g = np.array([float(self._g_low(t)), float(self._g_high(t))])
        else:
            f = np.asarray(self._f(t, mesh.node_x, mesh.node_theta), dtype=float)
            nb_half = mesh.n_theta
            bids = mesh.boundary_node_ids
            th_low = mesh.node_theta[bids[:nb_half]]
            th_high = mesh.node_theta[bids[nb_half:]]
            g = np.concatenate(
                [
                    np.asarray(self._g_low(t, th_low), dtype=float),
                    np.asarray(self._g_high(t, th_high), dtype=float),
                ]
            )
        return f, g


@dataclass
class MMSCase:
    """Exact solution plus matching metric and sources."""

    kind: str
    length: float
    metric: MetricSpec
    u_sym: sym.Expr
    w_sym: sym.Expr
    f_sym: sym.Expr
    g_low_sym: sym.Expr
    g_high_sym: sym.Expr

    def build(self, n_x: int, n_theta: int = 0):
        mesh = build_mesh(self.kind, n_x=n_x, length=self.length, n_theta=n_theta)
        provider = WaveOperators(mesh, self.metric)
        return mesh, provider

    def source(self, mesh: Mesh) -> MMSSource:
        if self.kind == "interval":
            f = sym.lambdify((_T, _X), self.f_sym, "numpy")
            gl = sym.lambdify((_T,), self.g_low_sym, "numpy")
            gh = sym.lambdify((_T,), self.g_high_sym, "numpy")
        else:
            f = sym.lambdify((_T, _X, _TH), self.f_sym, "numpy")
            gl = sym.lambdify((_T, _TH), self.g_low_sym, "numpy")
            gh = sym.lambdify((_T, _TH), self.g_high_sym, "numpy")
        return MMSSource(mesh, f, gl, gh)

    def exact_state(self, mesh: Mesh, t: float) -> StateVector:
        if self.kind == "interval":
            u_fn = sym.lambdify((_T, _X), self.u_sym, "numpy")
            w_fn = sym.lambdify((_T, _X), self.w_sym, "numpy")
            u = np.asarray(u_fn(t, mesh.node_x), dtype=float)
            w = np.asarray(w_fn(t, mesh.node_x), dtype=float)
        else:
            u_fn = sym.lambdify((_T, _X, _TH), self.u_sym, "numpy")
            w_fn = sym.lambdify((_T, _X, _TH), self.w_sym, "numpy")
            u = np.asarray(u_fn(t, mesh.node_x, mesh.node_theta), dtype=float)
            w = np.asarray(w_fn(t, mesh.node_x, mesh.node_theta), dtype=float)
        return StateVector(np.broadcast_to(u, (mesh.n_nodes,)).copy(), np.broadcast_to(w, (mesh.n_nodes,)).copy())


def make_case(
    kind: str,
    *,
    u: str,
    a: str = "1",
    b: str = "1",
    m: str = "0",
    m_b: str = "0",
    length: float = 1.0,
    horizon: float = 10.0,
) -> MMSCase:
    """Derive sources for the exact solution ``u`` under the given metric."""
    ue = _parse(u)
    ae = _parse(a)
    me = _parse(m)
    mbe = _parse(m_b)
    we = sym.diff(ue, _T)

    if kind == "interval":
        lap = (1 / ae) * sym.diff((1 / ae) * sym.diff(ue, _X), _X)
        f = sym.diff(ue, _T, 2) - lap - me * ue
        # outward flux: -(1/a) u_x at x=0, +(1/a) u_x at x=L
        flux_low = -(ue.diff(_X) / ae).subs(_X, 0)
        flux_high = (ue.diff(_X) / ae).subs(_X, length)
        v_low = ue.subs(_X, 0)
        v_high = ue.subs(_X, length)
        g_low = sym.diff(v_low, _T, 2) - mbe.subs(_X, 0) * v_low + flux_low
        g_high = sym.diff(v_high, _T, 2) - mbe.subs(_X, length) * v_high + flux_high
    elif kind == "cylinder":
        be = _parse(b)
        dens = ae * be
        lap = (sym.diff((be / ae) * sym.diff(ue, _X), _X) + sym.diff((ae / be) * sym.diff(ue, _TH), _TH)) / dens
        f = sym.diff(ue, _T, 2) - lap - me * ue
        g_sides = []
        for x_val, sign in ((0, -1), (1, 1)):
            v = ue.subs(_X, x_val)
            b_side = be.subs(_X, x_val)
            lap_b = sym.diff(sym.diff(v, _TH) / b_side, _TH) / b_side
            flux = sign * (ue.diff(_X) / ae).subs(_X, x_val)
            mb_side = mbe.subs(_X, x_val)
            g_sides.append(sym.diff(v, _T, 2) - lap_b - mb_side * v + flux)
        g_low, g_high = g_sides
    else:
        raise ValueError(f"unknown geometry kind {kind!r}")

    metric = MetricSpec.build(kind, a=a, b=b, m=m, m_b=m_b, horizon=horizon)
    return MMSCase(
        kind=kind,
        length=length if kind == "interval" else 1.0,
        metric=metric,
        u_sym=ue,
        w_sym=we,
        f_sym=sym.simplify(f),
        g_low_sym=sym.simplify(g_low),
        g_high_sym=sym.simplify(g_high),
    )
