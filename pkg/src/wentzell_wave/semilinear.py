"""Semilinear layer: nonlinearity evaluation, growth-exponent gates,
Lipschitz estimation, fixed-point solves, window continuation and
blow-up detection.

The mild solution on a window is computed by successive substitution:
each iterate freezes the nonlinearity along the previous trajectory and
runs one linear solve over the window. Window lengths come from the
existence-time formula tau = min(T, 1/(2 M0 L)) with an empirically
estimated Lipschitz constant, and shrink as the solution grows; a window
shorter than one time step, or a norm above the cap, declares blow-up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .assembly import DiscreteOperator, StateVector, x_norm
from .evolution import (
    NonFiniteStateError,
    TabulatedSource,
    Trajectory,
    evolve_linear,
)
from .fields import ScalarField, make_field
from .geometry import Mesh

__all__ = [
    "BlowUpSignal",
    "NonlinearitySpec",
    "ExponentReport",
    "validate_exponents",
    "eval_rhs",
    "LipschitzEstimate",
    "lipschitz_estimate",
    "ExistenceCertificate",
    "existence_time",
    "PicardResult",
    "picard_solve",
    "RestartReport",
    "restart_check",
    "ContinuationResult",
    "continue_maximal",
]


class BlowUpSignal(ArithmeticError):
    """Norm cap exceeded or non-finite nonlinearity during a solve."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"blow-up signalled at t={t:.6g}")


# ---------------------------------------------------------------------------
# nonlinearity


@dataclass(frozen=True)
class NonlinearitySpec:
    """Power-type interior/boundary nonlinearities with optional
    velocity-linear additions.

    Interior: P(t,p) |u|^(alpha-1) u + Q(t,p) w
    Boundary: P_b(t,q) |v|^(beta-1) v + Q_b(t,q) z

    ``lip_K``/``lip_K_b`` are declared difference-growth constants, needed
    only by the analytic Lipschitz mode.
    """

    alpha: float = 1.0
    beta: float = 1.0
    P: Optional[ScalarField] = None
    P_b: Optional[ScalarField] = None
    Q: Optional[ScalarField] = None
    Q_b: Optional[ScalarField] = None
    growth_C: Optional[float] = None
    growth_C_b: Optional[float] = None
    lip_K: Optional[float] = None
    lip_K_b: Optional[float] = None

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1:
            raise ValueError(f"exponents must be >= 1, got alpha={self.alpha}, beta={self.beta}")

    @classmethod
    def zero(cls) -> "NonlinearitySpec":
        return cls()

    @classmethod
    def power(cls, alpha: float, beta: float, P="1", P_b="1", Q=None, Q_b=None, **kw) -> "NonlinearitySpec":
        conv = lambda s: None if s is None else make_field(s)
        return cls(alpha=alpha, beta=beta, P=conv(P), P_b=conv(P_b), Q=conv(Q), Q_b=conv(Q_b), **kw)

    @property
    def is_zero(self) -> bool:
        return all(f is None for f in (self.P, self.P_b, self.Q, self.Q_b))


@dataclass(frozen=True)
class ExponentReport:
    accepted: bool
    n: int
    critical_bulk: float
    critical_boundary: float
    alpha_bound: float
    beta_bound: float
    violations: tuple


def validate_exponents(alpha: float, beta: float, n: int) -> ExponentReport:
    """Gate the growth exponents against the H^1 embedding limits in
    dimension n (boundary dimension n-1)."""
    if n < 2:
        raise ValueError(f"dimension must be >= 2, got {n}")
    c_bulk = math.inf if n == 2 else 2.0 * n / (n - 2)
    c_bdry = math.inf if n in (2, 3) else (2.0 * n - 2.0) / (n - 3)
    alpha_bound = c_bulk / 2 if math.isfinite(c_bulk) else math.inf
    beta_bound = c_bdry / 2 if math.isfinite(c_bdry) else math.inf
    violations = []
    if alpha < 1:
        violations.append(f"alpha={alpha} must be >= 1")
    elif alpha > alpha_bound:
        violations.append(f"alpha={alpha} exceeds the interior bound {alpha_bound:g} for n={n}")
    if beta < 1:
        violations.append(f"beta={beta} must be >= 1")
    elif beta > beta_bound:
        violations.append(f"beta={beta} exceeds the boundary bound {beta_bound:g} for n={n}")
    return ExponentReport(
        accepted=not violations,
        n=n,
        critical_bulk=c_bulk,
        critical_boundary=c_bdry,
        alpha_bound=alpha_bound,
        beta_bound=beta_bound,
        violations=tuple(violations),
    )


def _power(vals: np.ndarray, expo: float) -> np.ndarray:
    if expo == 1.0:
        return vals
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow to inf is the blow-up signal, checked by the caller
        return np.abs(vals) ** (expo - 1.0) * vals


def eval_rhs(spec: NonlinearitySpec, t: float, X: StateVector, mesh: Mesh):
    """Pointwise nonlinearity values: (bulk nodes, boundary nodes).

    The result lands in the velocity slot of the state source; the field
    slot of the source is identically zero. Non-finite values raise a
    blow-up signal.
    """
    n = mesh.n_nodes
    bids = mesh.boundary_node_ids
    if mesh.kind == "interval":
        coords = (mesh.node_x,)
        bcoords = (mesh.node_x[bids],)
    else:
        coords = (mesh.node_x, mesh.node_theta)
        bcoords = (mesh.node_x[bids], mesh.node_theta[bids])

    f = np.zeros(n, dtype=X.u.dtype)
    if spec.P is not None:
        f = f + spec.P(t, *coords) * _power(X.u, spec.alpha)
    if spec.Q is not None:
        f = f + spec.Q(t, *coords) * X.w

    g = np.zeros(len(bids), dtype=X.u.dtype)
    if spec.P_b is not None:
        g = g + spec.P_b(t, *bcoords) * _power(X.u[bids], spec.beta)
    if spec.Q_b is not None:
        g = g + spec.Q_b(t, *bcoords) * X.w[bids]

    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise BlowUpSignal(t, f"nonlinearity evaluated non-finite at t={t:.6g}")
    return f, g


def _source_diff_norm(op: DiscreteOperator, fa, ga, fb, gb) -> float:
    return op.source_norm(fa - fb, ga - gb)


# ---------------------------------------------------------------------------
# Lipschitz constant of the substitution map


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    mode: str
    radius: float
    window: tuple
    n_samples: int
    safety: float
    seed: int

    def __float__(self):
        return self.value


def _random_ball_states(op: DiscreteOperator, rng, budget: float, n: int, dtype):
    u = rng.standard_normal(n).astype(dtype)
    w = rng.standard_normal(n).astype(dtype)
    X = StateVector(u, w)
    nrm = x_norm(op, X)
    scale = budget * rng.uniform(0.05, 1.0) / nrm if nrm > 0 else 0.0
    return X * scale


def lipschitz_estimate(
    spec: NonlinearitySpec,
    provider,
    rho: float,
    tau: float,
    *,
    mode: str = "empirical",
    n_samples: int = 64,
    seed: int = 0,
    safety: float = 1.5,
    t_window: Optional[tuple] = None,
    n_times: int = 5,
    anchors: Sequence[StateVector] = (),
    embedding_const: float = 1.0,
) -> LipschitzEstimate:
    """Estimate the state-to-source Lipschitz constant on the ball of
    radius rho, over the given time window.

    Empirical mode samples random state pairs (optionally around anchor
    states, so amplitude-carrying directions the energy norm cannot see
    are still probed) and multiplies the worst ratio by a safety factor.
    Analytic mode uses the declared difference-growth constants together
    with a configured discrete embedding constant.
    """
    if rho <= 0 or tau <= 0:
        raise ValueError("need positive radius and window length")
    if spec.is_zero:
        return LipschitzEstimate(0.0, mode, rho, t_window or (0.0, tau), 0, safety, seed)
    lo, hi = t_window if t_window is not None else (0.0, tau)
    ts = np.linspace(lo, hi, n_times)

    if mode == "analytic":
        if spec.P is not None and spec.lip_K is None:
            raise ValueError("analytic mode needs a declared interior constant lip_K")
        if spec.P_b is not None and spec.lip_K_b is None:
            raise ValueError("analytic mode needs a declared boundary constant lip_K_b")
        amp = embedding_const * rho
        val = 0.0
        if spec.P is not None:
            val = max(val, spec.lip_K * (1.0 + 2.0 * amp ** (spec.alpha - 1.0)))
        if spec.P_b is not None:
            val = max(val, spec.lip_K_b * (1.0 + 2.0 * amp ** (spec.beta - 1.0)))
        mesh = provider.mesh
        for t in ts:
            coords = (mesh.node_x,) if mesh.kind == "interval" else (mesh.node_x, mesh.node_theta)
            if spec.Q is not None:
                val = max(val, float(np.max(np.abs(spec.Q(t, *coords)))))
            if spec.Q_b is not None:
                val = max(val, float(np.max(np.abs(spec.Q_b(t, *coords)))))
        return LipschitzEstimate(float(val * embedding_const), "analytic", rho, (lo, hi), 0, 1.0, seed)

    if mode != "empirical":
        raise ValueError(f"unknown Lipschitz mode {mode!r}")
    if n_samples < 2:
        raise ValueError("empirical mode needs at least two samples")

    mesh = provider.mesh
    n = mesh.n_nodes
    rng = np.random.default_rng(seed)
    anchor_list = [StateVector.zeros(n)] + [a.copy() for a in anchors]

    def structured_directions(op):
        # extremal candidates random sampling is unlikely to hit: constant
        # field and constant velocity directions (skipped where the energy
        # seminorm cannot see them)
        out = []
        for cand in (
            StateVector(np.ones(n), np.zeros(n)),
            StateVector(np.zeros(n), np.ones(n)),
            StateVector(np.ones(n), np.ones(n)),
        ):
            nrm = x_norm(op, cand)
            if nrm > 1e-12:
                out.append(cand * (1.0 / nrm))
        return out

    per_anchor = max(2, n_samples // len(anchor_list))
    worst = 0.0
    for t in ts:
        op = provider.at(float(t))
        for anchor in anchor_list:
            budget = rho - x_norm(op, anchor)
            if budget <= 0:
                budget = 0.1 * rho
            pairs = []
            for d in structured_directions(op):
                pairs.append((anchor + budget * d, anchor))
            for _ in range(per_anchor):
                pairs.append(
                    (
                        anchor + _random_ball_states(op, rng, budget, n, float),
                        anchor + _random_ball_states(op, rng, budget, n, float),
                    )
                )
            for Xa, Xb in pairs:
                dn = x_norm(op, Xa - Xb)
                if dn == 0:
                    continue
                fa, ga = eval_rhs(spec, float(t), Xa, mesh)
                fb, gb = eval_rhs(spec, float(t), Xb, mesh)
                worst = max(worst, _source_diff_norm(op, fa, ga, fb, gb) / dn)
    return LipschitzEstimate(float(worst * safety), "empirical", rho, (lo, hi), n_samples, safety, seed)


# ---------------------------------------------------------------------------
# existence time


@dataclass(frozen=True)
class ExistenceCertificate:
    """Window data for a certified fixed-point solve."""

    rho: float
    m0: float
    lipschitz: float
    horizon: float
    tau: float
    contraction_factor: float
    solution_bound: float

    def summary(self) -> dict:
        return {
            "rho": self.rho,
            "m0": self.m0,
            "lipschitz": self.lipschitz,
            "horizon": self.horizon,
            "tau": self.tau,
            "contraction_factor": self.contraction_factor,
            "solution_bound": self.solution_bound,
        }


def existence_time(rho: float, m0: float, lipschitz: float, horizon: float) -> ExistenceCertificate:
    """tau = min(T, 1/(2 M0 L)); predicted solution bound rho (1 + M0)."""
    if rho <= 0 or m0 <= 0 or horizon <= 0 or lipschitz < 0:
        raise ValueError("certificate inputs must be positive (L may be zero)")
    tau = horizon if lipschitz == 0 else min(horizon, 1.0 / (2.0 * m0 * lipschitz))
    return ExistenceCertificate(
        rho=float(rho),
        m0=float(m0),
        lipschitz=float(lipschitz),
        horizon=float(horizon),
        tau=float(tau),
        contraction_factor=float(tau * m0 * lipschitz),
        solution_bound=float(rho * (1.0 + m0)),
    )


# ---------------------------------------------------------------------------
# fixed-point solve


@dataclass
class PicardResult:
    trajectory: Trajectory
    converged: bool
    iterations: int
    sup_diffs: list
    ratios: list
    certificate: Optional[ExistenceCertificate] = None


def _freeze_source(spec: NonlinearitySpec, traj_states, times, mesh: Mesh) -> TabulatedSource:
    f_tab = []
    g_tab = []
    for t, X in zip(times, traj_states):
        f, g = eval_rhs(spec, float(t), X, mesh)
        f_tab.append(f)
        g_tab.append(g)
    return TabulatedSource(times, np.asarray(f_tab), np.asarray(g_tab))


def picard_solve(
    provider,
    spec: NonlinearitySpec,
    X0: StateVector,
    times: Sequence[float],
    *,
    tol: float = 1e-10,
    max_iter: int = 40,
    certificate: Optional[ExistenceCertificate] = None,
    initial_iterate: str = "homogeneous",
    norm_cap: float = math.inf,
) -> PicardResult:
    """Successive substitution for the mild solution on a time window.

    Each iterate runs one linear evolution with the source frozen from
    the previous trajectory on the same grid; convergence is measured as
    the sup over grid times of the weighted norm of the iterate
    difference.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    times = np.asarray(times, dtype=float)
    mesh = provider.mesh
    if certificate is not None:
        rho0 = x_norm(provider.at(times[0]), X0)
        if rho0 > certificate.rho * (1.0 + 1e-9):
            raise ValueError(
                f"initial data norm {rho0:.6g} exceeds the certified radius {certificate.rho:.6g}"
            )

    if initial_iterate == "homogeneous":
        current = evolve_linear(provider, X0, None, times)
    elif initial_iterate == "zero":
        zero = StateVector.zeros(mesh.n_nodes, dtype=X0.u.dtype)
        current = Trajectory(
            times=times,
            states=[zero.copy() for _ in times],
            x_norms=np.zeros(len(times)),
            energies=np.zeros(len(times)),
            u_norms=np.zeros(len(times)),
            w_norms=np.zeros(len(times)),
            residuals=np.zeros(len(times)),
        )
    else:
        raise ValueError(f"unknown initial iterate {initial_iterate!r}")

    if spec.is_zero:
        current.meta["picard_iterations"] = 1
        return PicardResult(current, True, 1, [0.0], [], certificate)

    sup_diffs = []
    ratios = []
    converged = False
    iterations = 0
    for k in range(max_iter):
        source = _freeze_source(spec, current.states, times, mesh)
        try:
            nxt = evolve_linear(provider, X0, source, times)
        except NonFiniteStateError as exc:
            raise BlowUpSignal(exc.t, "iterate became non-finite") from exc
        iterations = k + 1
        diff = 0.0
        for j, t in enumerate(times):
            opj = provider.at(float(t))
            diff = max(diff, x_norm(opj, nxt.states[j] - current.states[j]))
        sup_diffs.append(diff)
        if len(sup_diffs) >= 2 and sup_diffs[-2] > 0:
            ratios.append(sup_diffs[-1] / sup_diffs[-2])
        current = nxt
        if float(np.max(current.x_norms)) > norm_cap:
            break
        if diff <= tol:
            converged = True
            break

    current.meta["picard_iterations"] = iterations
    return PicardResult(current, converged, iterations, sup_diffs, ratios, certificate)


# ---------------------------------------------------------------------------
# restart / gluing


@dataclass(frozen=True)
class RestartReport:
    discrepancy: float
    tau1: float
    tau2: float
    iterations_direct: int
    iterations_split: tuple


def restart_check(
    provider,
    spec: NonlinearitySpec,
    X0: StateVector,
    tau1: float,
    tau2: float,
    dt: float,
    *,
    tol: float = 1e-10,
    max_iter: int = 40,
) -> RestartReport:
    """Solve on [0, tau2] directly and as restart at tau1; report the sup
    discrepancy over the shared grid. Restart times must lie on the grid."""
    if not (0 < tau1 < tau2):
        raise ValueError("need 0 < tau1 < tau2")
    n1 = tau1 / dt
    n2 = tau2 / dt
    if abs(n1 - round(n1)) > 1e-9 or abs(n2 - round(n2)) > 1e-9:
        raise ValueError(f"restart times must lie on the dt={dt} grid")
    n1, n2 = int(round(n1)), int(round(n2))
    times = np.arange(n2 + 1) * dt

    direct = picard_solve(provider, spec, X0, times, tol=tol, max_iter=max_iter)
    first = picard_solve(provider, spec, X0, times[: n1 + 1], tol=tol, max_iter=max_iter)
    second = picard_solve(
        provider, spec, first.trajectory.final, times[n1:], tol=tol, max_iter=max_iter
    )

    disc = 0.0
    for j in range(n1 + 1):
        opj = provider.at(float(times[j]))
        disc = max(disc, x_norm(opj, direct.trajectory.states[j] - first.trajectory.states[j]))
    for j in range(n1, n2 + 1):
        opj = provider.at(float(times[j]))
        disc = max(
            disc,
            x_norm(opj, direct.trajectory.states[j] - second.trajectory.states[j - n1]),
        )
    return RestartReport(
        discrepancy=float(disc),
        tau1=tau1,
        tau2=tau2,
        iterations_direct=direct.iterations,
        iterations_split=(first.iterations, second.iterations),
    )


# ---------------------------------------------------------------------------
# maximal continuation with blow-up detection


@dataclass
class ContinuationResult:
    trajectory: Trajectory
    t_plus: float
    blew_up: bool
    reason: str
    windows: list
    norm_cap: float

    @property
    def error_bar(self) -> float:
        return self.windows[-1][1] if self.windows else 0.0


def _reference_scale(op: DiscreteOperator, X: StateVector) -> float:
    """Amplitude scale that also sees energy-norm-blind constants."""
    nrm = x_norm(op, X)
    amp = np.sqrt(
        max(np.vdot(X.u, op.mass @ X.u).real, 0.0) + max(np.vdot(X.w, op.mass @ X.w).real, 0.0)
    )
    return float(max(nrm, amp))


def continue_maximal(
    provider,
    spec: NonlinearitySpec,
    X0: StateVector,
    T: float,
    dt: float,
    *,
    m0: float = 1.0,
    norm_cap: Optional[float] = None,
    cap_factor: float = 1e6,
    picard_tol: float = 1e-9,
    max_iter: int = 40,
    lip_samples: int = 48,
    seed: int = 0,
    safety: float = 1.5,
) -> ContinuationResult:
    """Advance in existence-time windows, gluing fixed-point solves, until
    the horizon, a norm cap, or a window shorter than one step.

    Returns the glued trajectory plus the t+ estimate with the window
    history; the last window length is the resolution of the estimate.
    """
    mesh = provider.mesh
    op0 = provider.at(0.0)
    ref0 = _reference_scale(op0, X0)
    if ref0 == 0.0 and spec.is_zero:
        times = np.arange(int(round(T / dt)) + 1) * dt
        traj = evolve_linear(provider, X0, None, times)
        return ContinuationResult(traj, T, False, "zero data", [(0.0, T, 0.0, 0.0)], 0.0)
    if ref0 == 0.0:
        # F(t, 0) = 0, so zero data stays the zero trajectory
        times = np.arange(int(round(T / dt)) + 1) * dt
        zeros = [StateVector.zeros(mesh.n_nodes) for _ in times]
        z = np.zeros(len(times))
        traj = Trajectory(times, zeros, z, z.copy(), z.copy(), z.copy(), z.copy())
        return ContinuationResult(traj, T, False, "zero data", [(0.0, T, 0.0, 0.0)], 0.0)

    cap = norm_cap if norm_cap is not None else cap_factor * ref0
    t_cur = 0.0
    X_cur = X0
    pieces: list[Trajectory] = []
    windows = []
    blew = False
    reason = "reached horizon"
    t_plus = T
    guard = 0

    while t_cur < T - 0.5 * dt:
        guard += 1
        if guard > 100000:
            raise RuntimeError("window continuation failed to advance")
        op_cur = provider.at(t_cur)
        rho_cur = _reference_scale(op_cur, X_cur)
        if spec.is_zero:
            tau_k = T - t_cur
            L_val = 0.0
        else:
            radius = rho_cur * (1.0 + m0)
            L_val = float(
                lipschitz_estimate(
                    spec,
                    provider,
                    radius,
                    max(dt, min(T - t_cur, 1.0)),
                    n_samples=lip_samples,
                    seed=seed + guard,
                    safety=safety,
                    t_window=(t_cur, min(T, t_cur + 1.0)),
                    anchors=[X_cur],
                )
            )
            tau_k = T - t_cur if L_val == 0 else min(T - t_cur, 1.0 / (2.0 * m0 * L_val))
        n_steps = int(math.floor(tau_k / dt + 1e-9))
        if n_steps < 1:
            # certified window is shorter than one step; single-step windows
            # still contract while dt * M0 * L < 1, so push on until the
            # iteration itself stops converging
            n_steps = 1

        converged = False
        while n_steps >= 1:
            times = t_cur + dt * np.arange(n_steps + 1)
            try:
                res = picard_solve(
                    provider,
                    spec,
                    X_cur,
                    times,
                    tol=picard_tol,
                    max_iter=max_iter,
                    norm_cap=cap,
                )
            except BlowUpSignal as sig:
                blew = True
                reason = "iterate became non-finite"
                t_plus = min(sig.t, times[-1])
                windows.append((t_cur, n_steps * dt, L_val, rho_cur))
                break
            over = np.where(res.trajectory.x_norms > cap)[0]
            if over.size:
                j = int(over[0])
                blew = True
                reason = "norm cap exceeded"
                t_plus = float(times[j])
                windows.append((t_cur, n_steps * dt, L_val, rho_cur))
                pieces.append(_truncate(res.trajectory, j))
                break
            if res.converged:
                converged = True
                break
            n_steps //= 2
        if blew:
            break
        if not converged:
            blew = True
            reason = "fixed-point iteration stopped contracting"
            t_plus = t_cur
            windows.append((t_cur, dt, L_val, rho_cur))
            break

        windows.append((t_cur, n_steps * dt, L_val, rho_cur))
        pieces.append(res.trajectory)
        X_cur = res.trajectory.final
        t_cur = float(res.trajectory.times[-1])

    traj = _glue(pieces) if pieces else _single_point(provider, X0)
    return ContinuationResult(traj, float(t_plus), blew, reason, windows, float(cap))


def _truncate(traj: Trajectory, j: int) -> Trajectory:
    sl = slice(0, j + 1)
    return Trajectory(
        times=traj.times[sl],
        states=traj.states[: j + 1],
        x_norms=traj.x_norms[sl],
        energies=traj.energies[sl],
        u_norms=traj.u_norms[sl],
        w_norms=traj.w_norms[sl],
        residuals=traj.residuals[sl],
        meta=dict(traj.meta),
    )


def _glue(pieces: list) -> Trajectory:
    times = [pieces[0].times]
    xs = [pieces[0].x_norms]
    us = [pieces[0].u_norms]
    ws = [pieces[0].w_norms]
    rs = [pieces[0].residuals]
    states = list(pieces[0].states)
    for p in pieces[1:]:
        times.append(p.times[1:])
        xs.append(p.x_norms[1:])
        us.append(p.u_norms[1:])
        ws.append(p.w_norms[1:])
        rs.append(p.residuals[1:])
        states.extend(p.states[1:])
    t = np.concatenate(times)
    xn = np.concatenate(xs)
    return Trajectory(
        times=t,
        states=states,
        x_norms=xn,
        energies=xn**2,
        u_norms=np.concatenate(us),
        w_norms=np.concatenate(ws),
        residuals=np.concatenate(rs),
    )


def _single_point(provider, X0: StateVector) -> Trajectory:
    from .assembly import u_norm_V, w_norm_U

    op = provider.at(0.0)
    nrm = x_norm(op, X0)
    return Trajectory(
        times=np.array([0.0]),
        states=[X0.copy()],
        x_norms=np.array([nrm]),
        energies=np.array([nrm**2]),
        u_norms=np.array([u_norm_V(op, X0)]),
        w_norms=np.array([w_norm_U(op, X0)]),
        residuals=np.zeros(1),
    )
