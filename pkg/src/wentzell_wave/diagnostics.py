"""Verification instruments: energy, dissipativity, dense oracles,
convergence-order fits, flux reconstruction, propagation-speed and
reversibility checks.

Every check returns a CheckReport whose outcome is deterministic given
its configuration and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.integrate as integrate
import scipy.linalg as la
import scipy.sparse.linalg as spla

from .assembly import DiscreteOperator, StateVector, apply_generator, x_inner, x_norm
from .evolution import evolve_linear, resolvent_solve

__all__ = [
    "CheckReport",
    "energy",
    "dissipativity_check",
    "dense_expm_oracle",
    "semigroup_law_check",
    "time_symmetry_check",
    "resolvent_contraction_check",
    "energy_drift_check",
    "convergence_order",
    "ConvergenceReport",
    "neumann_trace_reconstruct",
    "finite_speed_check",
    "scalar_blowup_reference",
    "scalar_reference_trajectory",
]


@dataclass
class CheckReport:
    """Outcome of one verification check."""

    name: str
    passed: bool
    value: float
    tolerance: float
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            self.passed = False
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")

    def row(self):
        return self.name, self.passed, self.value, self.tolerance


def energy(op: DiscreteOperator, X: StateVector) -> float:
    """Total energy ||X||_X^2 of the coupled system."""
    return float(np.real(x_inner(op, X, X)))


def dissipativity_check(op: DiscreteOperator, n_random: int = 100, seed: int = 0) -> CheckReport:
    """Max over random states of |Re<X, GX>| / ||X||^2 for the generator G.

    Skew-adjointness of the block structure in the weighted inner product
    makes this zero up to rounding.
    """
    if n_random < 1:
        raise ValueError("need at least one random state")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_random):
        u = rng.standard_normal(op.n)
        w = rng.standard_normal(op.n)
        X = StateVector(u, w)
        G = apply_generator(op, X)
        num = abs(np.real(x_inner(op, X, G)))
        den = x_norm(op, X) ** 2
        worst = max(worst, num / den)
    return CheckReport(
        name="dissipativity",
        passed=bool(worst <= 1e-12),
        value=float(worst),
        tolerance=1e-12,
        context={"n_random": n_random, "seed": seed, "t": op.t},
    )


def _dense_generator(op: DiscreteOperator) -> np.ndarray:
    n = op.n
    minv_k = op.mass_solve(op.stiff.toarray())
    top = np.hstack([np.zeros((n, n)), np.eye(n)])
    bot = np.hstack([-minv_k, np.zeros((n, n))])
    return np.vstack([top, bot])


def dense_expm_oracle(op: DiscreteOperator, X0: StateVector, t: float, cap: int = 400) -> StateVector:
    """Evolve by the dense matrix exponential of the block generator."""
    if op.n > cap:
        raise ValueError(f"dense oracle capped at {cap} dofs, operator has {op.n}")
    G = _dense_generator(op)
    out = la.expm(t * G) @ np.concatenate([X0.u, X0.w])
    return StateVector(out[: op.n], out[op.n :])


def semigroup_law_check(op: DiscreteOperator, s: float, t: float, seed: int = 0, tol: float = 1e-9) -> CheckReport:
    """exp((s+t)G) X = exp(sG) exp(tG) X on a random state."""
    rng = np.random.default_rng(seed)
    X = StateVector(rng.standard_normal(op.n), rng.standard_normal(op.n))
    once = dense_expm_oracle(op, X, s + t)
    twice = dense_expm_oracle(op, dense_expm_oracle(op, X, t), s)
    err = x_norm(op, once - twice) / x_norm(op, X)
    return CheckReport("semigroup_law", bool(err <= tol), float(err), tol, {"s": s, "t": t, "seed": seed})


def time_symmetry_check(provider, X0: StateVector, dt: float, steps: int = 5, tol: float = 1e-9) -> CheckReport:
    """Velocity reversal conjugates the flow to its inverse: march, flip w,
    march again, flip back; the state must return to X0."""
    from .evolution import step_midpoint

    X = X0.copy()
    for k in range(steps):
        X, _ = step_midpoint(provider, X, k * dt, dt)
    X = StateVector(X.u, -X.w)
    for k in range(steps):
        X, _ = step_midpoint(provider, X, k * dt, dt)
    X = StateVector(X.u, -X.w)
    op = provider.at(0.0)
    err = x_norm(op, X - X0) / max(x_norm(op, X0), 1e-300)
    return CheckReport("time_symmetry", bool(err <= tol), float(err), tol, {"dt": dt, "steps": steps})


def resolvent_contraction_check(
    op: DiscreteOperator,
    lambdas: Sequence[float] = (0.1, 1.0, 10.0),
    n_rhs: int = 20,
    seed: int = 0,
    residual_tol: float = 1e-9,
    contraction_tol: float = 1e-8,
) -> CheckReport:
    """Residual and bound lam ||(A+lam)^-1 F|| <= (1+tol) ||F|| on random F."""
    rng = np.random.default_rng(seed)
    worst_res = 0.0
    worst_con = 0.0
    for lam in lambdas:
        for _ in range(n_rhs):
            F = StateVector(rng.standard_normal(op.n), rng.standard_normal(op.n))
            X, res = resolvent_solve(op, lam, F)
            worst_res = max(worst_res, res)
            worst_con = max(worst_con, lam * x_norm(op, X) / x_norm(op, F))
    passed = worst_res <= residual_tol and worst_con <= 1.0 + contraction_tol
    return CheckReport(
        name="resolvent_contraction",
        passed=bool(passed),
        value=float(max(worst_res, worst_con - 1.0)),
        tolerance=residual_tol,
        context={"lambdas": list(lambdas), "worst_residual": worst_res, "worst_contraction": worst_con},
    )


def energy_drift_check(provider, X0: StateVector, dt: float, steps: int, tol: float = 1e-8) -> CheckReport:
    """Relative drift of the conserved energy over a frozen-operator run."""
    times = dt * np.arange(steps + 1)
    traj = evolve_linear(provider, X0, None, times)
    e0 = traj.energies[0]
    drift = float(np.max(np.abs(traj.energies - e0)) / e0)
    return CheckReport("energy_drift", bool(drift <= tol), drift, tol, {"dt": dt, "steps": steps})


# ---------------------------------------------------------------------------
# convergence order


@dataclass
class ConvergenceReport:
    spatial_slope: Optional[float]
    temporal_slope: Optional[float]
    spatial_table: list
    temporal_table: list
    monotone: bool


def _loglog_slope(hs, errs) -> float:
    return float(np.polyfit(np.log(np.asarray(hs)), np.log(np.asarray(errs)), 1)[0])


def convergence_order(
    case,
    resolutions: Sequence[int] = (),
    dts: Sequence[float] = (),
    *,
    t_end: float = 0.5,
    dt_factor: float = 0.5,
    temporal_resolution: int = 64,
    n_theta_equal: bool = True,
) -> ConvergenceReport:
    """Slopes of manufactured-solution errors under h- and dt-refinement.

    Spatial errors tie dt to h so the combined second-order error scales
    like h^2; temporal errors compare against a reference run with a much
    finer step on the same mesh, isolating the time discretization.
    """
    if resolutions and len(resolutions) < 3:
        raise ValueError("need at least three resolutions for a slope")
    spatial = []
    for r in resolutions:
        mesh, provider = case.build(r, n_theta=r if n_theta_equal else 0)
        h = mesh.h_x
        steps = max(2, int(np.ceil(t_end / (dt_factor * h))))
        times = np.linspace(0.0, t_end, steps + 1)
        traj = evolve_linear(provider, case.exact_state(mesh, 0.0), case.source(mesh), times)
        opT = provider.at(t_end)
        err = x_norm(opT, traj.final - case.exact_state(mesh, t_end))
        spatial.append((h, err))

    temporal = []
    if dts:
        mesh, provider = case.build(temporal_resolution, n_theta=temporal_resolution if n_theta_equal else 0)
        source = case.source(mesh)
        X0 = case.exact_state(mesh, 0.0)
        dt_ref = min(dts) / 8.0
        steps_ref = int(round(t_end / dt_ref))
        ref = evolve_linear(provider, X0, source, np.linspace(0.0, t_end, steps_ref + 1))
        opT = provider.at(t_end)
        for dt in dts:
            steps = int(round(t_end / dt))
            traj = evolve_linear(provider, X0, source, np.linspace(0.0, t_end, steps + 1))
            temporal.append((dt, x_norm(opT, traj.final - ref.final)))

    def monotone(table):
        errs = [e for _, e in sorted(table, key=lambda p: p[0])]
        return all(a <= b * (1 + 1e-9) for a, b in zip(errs[:-1], errs[1:]))

    return ConvergenceReport(
        spatial_slope=_loglog_slope(*zip(*spatial)) if spatial else None,
        temporal_slope=_loglog_slope(*zip(*temporal)) if temporal else None,
        spatial_table=spatial,
        temporal_table=temporal,
        monotone=(monotone(spatial) if spatial else True) and (monotone(temporal) if temporal else True),
    )


# ---------------------------------------------------------------------------
# flux reconstruction


def neumann_trace_reconstruct(op: DiscreteOperator, u: np.ndarray) -> np.ndarray:
    """Recover the outward normal flux of u on the boundary.

    The interior-consistent discrete Laplacian is computed from the
    interior rows of the bulk problem (zero boundary values); the
    remaining stiffness residual on the boundary rows, mass-inverted on
    the boundary, is the flux. On the interval these are the two endpoint
    flux scalars.
    """
    mesh = op.mesh
    bids = mesh.boundary_node_ids
    interior = np.setdiff1d(np.arange(op.n), bids)
    ku = op.stiff_bulk @ u
    m_ii = op.mass_bulk[np.ix_(interior, interior)].tocsc()
    d = np.zeros(op.n, dtype=u.dtype)
    d[interior] = spla.spsolve(m_ii, -ku[interior])
    load = ku + op.mass_bulk @ d
    lb = load[bids]
    if mesh.kind == "interval":
        return lb  # unit point masses
    m_bb = op.mass_bdry[np.ix_(bids, bids)].tocsc()
    return spla.spsolve(m_bb, lb)


# ---------------------------------------------------------------------------
# propagation speed


@dataclass
class SpeedReport:
    passed: bool
    max_excess: float
    factor: float
    table: list


def finite_speed_check(
    provider,
    X0: StateVector,
    times: Sequence[float],
    *,
    threshold_rel: float = 1e-8,
    factor: float = 1.1,
    wave_speed: Optional[float] = None,
    initial_support: Optional[tuple] = None,
) -> SpeedReport:
    """Support of |u| must not spread faster than factor * wave speed.

    The support edge is located by interpolating the crossing of
    threshold_rel times the initial peak (log-linear between nodes, so the
    edge is resolved below the mesh width). Growth is measured from
    ``initial_support`` when given (the exact support of the data),
    otherwise from the thresholded initial edge; the admissible gain at
    time t is factor * c * t.
    """
    mesh = provider.mesh
    if mesh.kind != "interval":
        raise ValueError("propagation check is defined on the interval geometry")
    times = np.asarray(times, dtype=float)
    if wave_speed is None:
        sample_a = provider.metric.a(0.0, mesh.node_x)
        wave_speed = float(np.max(1.0 / sample_a))
    thresh = threshold_rel * float(np.max(np.abs(X0.u)))
    xs = mesh.node_x

    def support(u):
        mag = np.abs(u)
        idx = np.where(mag > thresh)[0]
        if idx.size == 0:
            return None
        i, j = idx[0], idx[-1]
        left = xs[i]
        if i > 0 and mag[i - 1] > 0:
            frac = (np.log(thresh) - np.log(mag[i - 1])) / (np.log(mag[i]) - np.log(mag[i - 1]))
            left = xs[i - 1] + frac * (xs[i] - xs[i - 1])
        elif i > 0:
            left = xs[i - 1]
        right = xs[j]
        if j < len(xs) - 1 and mag[j + 1] > 0:
            frac = (np.log(thresh) - np.log(mag[j + 1])) / (np.log(mag[j]) - np.log(mag[j + 1]))
            right = xs[j + 1] - frac * (xs[j + 1] - xs[j])
        elif j < len(xs) - 1:
            right = xs[j + 1]
        return left, right

    if initial_support is not None:
        left0, right0 = initial_support
    else:
        s0 = support(X0.u)
        if s0 is None:
            raise ValueError("initial field is below the support threshold")
        left0, right0 = s0

    traj = evolve_linear(provider, X0, None, times)
    worst = 0.0
    table = []
    for k, t in enumerate(times[1:], start=1):
        s = support(traj.states[k].u)
        if s is None:
            continue
        allowed = factor * wave_speed * (t - times[0])
        growth = max(left0 - s[0], s[1] - right0, 0.0)
        table.append((float(t), growth, allowed))
        if allowed > 0:
            worst = max(worst, growth / allowed)
    return SpeedReport(passed=bool(worst <= 1.0), max_excess=float(worst), factor=factor, table=table)


# ---------------------------------------------------------------------------
# scalar reference dynamics (independent oracle for constant-data runs)


def _scalar_rhs(c: float, alpha: float):
    def rhs(t, y):
        u, w = y
        return [w, c * abs(u) ** (alpha - 1.0) * u]

    return rhs


def scalar_blowup_reference(c: float, alpha: float, u0: float, w0: float, u_cap: float = 1e10) -> float:
    """Blow-up time of u'' = c |u|^(alpha-1) u by adaptive integration.

    Integrates until |u| reaches u_cap and adds the closed-form tail of
    the leading-order asymptotics, which is negligible at the cap.
    """
    if c <= 0:
        raise ValueError("reference blow-up needs a focusing coefficient c > 0")
    event = lambda t, y: abs(y[0]) - u_cap
    event.terminal = True
    event.direction = 1
    sol = integrate.solve_ivp(
        _scalar_rhs(c, alpha),
        (0.0, 1e6),
        [u0, w0],
        method="DOP853",
        rtol=1e-10,
        atol=1e-12,
        events=event,
    )
    if not sol.t_events[0].size:
        raise RuntimeError("reference solution did not reach the cap; data may not blow up")
    t_event = float(sol.t_events[0][0])
    u_event = abs(float(sol.y_events[0][0][0]))
    tail = np.sqrt(2.0 * (alpha + 1.0) / c) / (alpha - 1.0) * u_event ** (-(alpha - 1.0) / 2.0)
    return t_event + float(tail)


def scalar_reference_trajectory(c: float, alpha: float, u0: float, w0: float, times: Sequence[float]):
    """Reference (u, w) of u'' = c |u|^(alpha-1) u on the given times."""
    times = np.asarray(times, dtype=float)
    sol = integrate.solve_ivp(
        _scalar_rhs(c, alpha),
        (times[0], times[-1]),
        [u0, w0],
        method="DOP853",
        rtol=1e-11,
        atol=1e-13,
        t_eval=times,
    )
    if not sol.success:
        raise RuntimeError(f"reference integration failed: {sol.message}")
    return sol.y[0], sol.y[1]
