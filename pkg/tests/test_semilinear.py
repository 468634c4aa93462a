import math

import numpy as np
import pytest

from wentzell_wave.assembly import StateVector, WaveOperators, x_norm
from wentzell_wave.diagnostics import scalar_blowup_reference, scalar_reference_trajectory
from wentzell_wave.geometry import MetricSpec, build_mesh
from wentzell_wave.semilinear import (
    BlowUpSignal,
    NonlinearitySpec,
    continue_maximal,
    eval_rhs,
    existence_time,
    lipschitz_estimate,
    picard_solve,
    restart_check,
    validate_exponents,
)


def make_provider(kind="cylinder", n_x=6, n_theta=6, m="-1", m_b="-1", a="1", b="1", horizon=10.0, frozen=True):
    mesh = build_mesh(kind, n_x=n_x, n_theta=n_theta if kind == "cylinder" else 0)
    spec = MetricSpec.build(kind, a=a, b=b, m=m, m_b=m_b, horizon=horizon)
    wave = WaveOperators(mesh, spec)
    return mesh, (wave.frozen(0.0) if frozen else wave)


class TestExponentGate:
    def test_table_matches_direct_transcription(self):
        for n in range(2, 9):
            c_bulk = math.inf if n == 2 else 2 * n / (n - 2)
            c_bdry = math.inf if n in (2, 3) else (2 * n - 2) / (n - 3)
            rep = validate_exponents(1.0, 1.0, n)
            assert rep.critical_bulk == c_bulk
            assert rep.critical_boundary == c_bdry
            # bounds are half the critical exponents
            if math.isfinite(c_bulk):
                assert validate_exponents(c_bulk / 2, 1.0, n).accepted
                assert not validate_exponents(c_bulk / 2 + 0.01, 1.0, n).accepted
            if math.isfinite(c_bdry):
                assert validate_exponents(1.0, c_bdry / 2, n).accepted
                assert not validate_exponents(1.0, c_bdry / 2 + 0.01, n).accepted

    def test_cubic_interior_accepted_in_three_dimensions(self):
        rep = validate_exponents(3.0, 1.0, 3)
        assert rep.accepted and rep.critical_bulk == 6.0

    def test_boundary_cubic_in_four_dimensions(self):
        assert validate_exponents(1.0, 3.0, 4).accepted
        assert not validate_exponents(1.0, 3.5, 4).accepted

    def test_two_dimensions_everything_subcritical(self):
        assert validate_exponents(17.0, 23.0, 2).accepted

    def test_exponents_below_one_rejected(self):
        assert not validate_exponents(0.5, 1.0, 3).accepted

    def test_dimension_below_two_rejected(self):
        with pytest.raises(ValueError):
            validate_exponents(1.0, 1.0, 1)


class TestEvalRhs:
    def test_zero_state_maps_to_zero(self):
        mesh, _ = make_provider()
        spec = NonlinearitySpec.power(3.0, 3.0)
        f, g = eval_rhs(spec, 0.0, StateVector.zeros(mesh.n_nodes), mesh)
        assert np.all(f == 0) and np.all(g == 0)

    def test_constant_cube(self):
        mesh, _ = make_provider()
        spec = NonlinearitySpec.power(3.0, 3.0)
        X = StateVector(2.0 * np.ones(mesh.n_nodes), np.zeros(mesh.n_nodes))
        f, g = eval_rhs(spec, 0.0, X, mesh)
        np.testing.assert_allclose(f, 8.0)
        np.testing.assert_allclose(g, 8.0)

    def test_ramp_matches_pointwise_recomputation(self):
        mesh = build_mesh("interval", n_x=4)
        spec = NonlinearitySpec.power(2.0, 2.0, P="1", P_b="1")
        u = np.arange(5, dtype=float) - 2.0
        X = StateVector(u, np.zeros(5))
        f, g = eval_rhs(spec, 0.0, X, mesh)
        for i in range(5):
            assert f[i] == pytest.approx(abs(u[i]) * u[i])
        for j, b in enumerate(mesh.boundary_node_ids):
            assert g[j] == pytest.approx(abs(u[b]) * u[b])

    def test_velocity_terms_enter_w_slot(self):
        mesh, _ = make_provider()
        spec = NonlinearitySpec.power(1.0, 1.0, P=None, P_b=None, Q="2", Q_b="3")
        X = StateVector(np.zeros(mesh.n_nodes), np.ones(mesh.n_nodes))
        f, g = eval_rhs(spec, 0.0, X, mesh)
        np.testing.assert_allclose(f, 2.0)
        np.testing.assert_allclose(g, 3.0)

    def test_nonfinite_raises_blowup(self):
        mesh, _ = make_provider()
        spec = NonlinearitySpec.power(3.0, 3.0)
        X = StateVector(np.full(mesh.n_nodes, 1e200), np.zeros(mesh.n_nodes))
        with pytest.raises(BlowUpSignal):
            eval_rhs(spec, 0.0, X, mesh)


class TestLipschitz:
    def test_zero_spec_gives_zero(self):
        _, prov = make_provider()
        est = lipschitz_estimate(NonlinearitySpec.zero(), prov, 1.0, 1.0)
        assert est.value == 0.0

    def test_linear_spec_stable_across_seeds(self):
        _, prov = make_provider(m="0", m_b="0")
        spec = NonlinearitySpec.power(1.0, 1.0, P="1", P_b="1")
        v1 = lipschitz_estimate(spec, prov, 1.0, 1.0, n_samples=64, seed=1).value
        v2 = lipschitz_estimate(spec, prov, 1.0, 1.0, n_samples=64, seed=2024).value
        assert abs(v1 - v2) / v1 <= 0.10

    def test_monotone_in_radius(self):
        _, prov = make_provider()
        spec = NonlinearitySpec.power(3.0, 3.0)
        small = lipschitz_estimate(spec, prov, 1.0, 1.0, n_samples=48, seed=3).value
        large = lipschitz_estimate(spec, prov, 2.0, 1.0, n_samples=48, seed=3).value
        assert large >= small

    def test_analytic_mode_needs_declared_constants(self):
        _, prov = make_provider()
        spec = NonlinearitySpec.power(3.0, 3.0)
        with pytest.raises(ValueError):
            lipschitz_estimate(spec, prov, 1.0, 1.0, mode="analytic")

    def test_analytic_mode_uses_declared_constants(self):
        _, prov = make_provider()
        spec = NonlinearitySpec.power(3.0, 3.0, lip_K=2.0, lip_K_b=2.0)
        est = lipschitz_estimate(spec, prov, 1.0, 1.0, mode="analytic")
        assert est.value == pytest.approx(2.0 * (1 + 2.0))


class TestExistenceTime:
    def test_paper_arithmetic(self):
        cert = existence_time(1.0, 1.0, 1.0, 10.0)
        assert cert.tau == pytest.approx(0.5)
        assert cert.contraction_factor == pytest.approx(0.5)
        assert cert.solution_bound == pytest.approx(2.0)

    def test_zero_lipschitz_gives_horizon(self):
        assert existence_time(1.0, 1.0, 0.0, 7.0).tau == 7.0

    def test_horizon_capped(self):
        assert existence_time(1.0, 2.0, 5.0, 0.01).tau == 0.01

    def test_contraction_factor_at_most_half(self):
        for m0, L, T in [(1, 1, 10), (2, 5, 0.01), (3, 0.1, 100)]:
            assert existence_time(1.0, m0, L, T).contraction_factor <= 0.5 + 1e-12

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            existence_time(0.0, 1.0, 1.0, 1.0)


class TestPicard:
    def test_zero_spec_converges_immediately(self):
        mesh, prov = make_provider()
        rng = np.random.default_rng(1)
        X0 = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        res = picard_solve(prov, NonlinearitySpec.zero(), X0, np.linspace(0, 0.5, 26))
        assert res.converged and res.iterations == 1

    def test_certificate_gate_rejects_large_data(self):
        mesh, prov = make_provider()
        cert = existence_time(0.1, 1.0, 1.0, 1.0)
        X0 = StateVector(np.zeros(mesh.n_nodes), np.full(mesh.n_nodes, 10.0))
        with pytest.raises(ValueError):
            picard_solve(prov, NonlinearitySpec.power(3, 3), X0, np.linspace(0, 0.2, 11), certificate=cert)

    def test_certified_contraction_ratios(self):
        mesh, prov = make_provider()
        op = prov.at(0.0)
        rng = np.random.default_rng(7)
        raw = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        X0 = raw * (2.0 / x_norm(op, raw))
        rho = x_norm(op, X0)
        spec = NonlinearitySpec.power(3.0, 3.0)
        L = lipschitz_estimate(spec, prov, rho * 2.0, 4.0, n_samples=64, seed=5, anchors=[X0]).value
        cert = existence_time(rho, 1.0, L, 4.0)
        steps = max(8, int(np.ceil(cert.tau / 0.01)))
        res = picard_solve(prov, spec, X0, np.linspace(0, cert.tau, steps + 1), tol=1e-10, certificate=cert)
        assert res.converged
        assert res.ratios, "expected at least two iterations"
        assert max(res.ratios) <= cert.contraction_factor + 0.05
        assert np.max(res.trajectory.x_norms) <= cert.solution_bound * 1.01

    def test_constant_data_tracks_scalar_oracle(self):
        mesh, prov = make_provider(m="0", m_b="0")
        spec = NonlinearitySpec.power(3.0, 3.0)
        n = mesh.n_nodes
        X0 = StateVector(np.ones(n), 0.5 * np.ones(n))
        t_ref = scalar_blowup_reference(1.0, 3.0, 1.0, 0.5)
        times = np.linspace(0.0, 0.5 * t_ref, 201)
        res = picard_solve(prov, spec, X0, times, tol=1e-12, max_iter=60)
        assert res.converged
        u_ref, w_ref = scalar_reference_trajectory(1.0, 3.0, 1.0, 0.5, times)
        u_got = np.array([s.u[0] for s in res.trajectory.states])
        rel = np.max(np.abs(u_got - u_ref) / np.abs(u_ref))
        assert rel <= 1e-4
        # spatially constant data stays spatially constant
        assert max(np.ptp(s.u) for s in res.trajectory.states) <= 1e-10

    def test_uniqueness_across_initial_iterates(self):
        mesh, prov = make_provider()
        op = prov.at(0.0)
        rng = np.random.default_rng(3)
        raw = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        X0 = raw * (0.5 / x_norm(op, raw))
        spec = NonlinearitySpec.power(3.0, 3.0, P="-1", P_b="-1")
        times = np.linspace(0, 0.4, 41)
        tol = 1e-11
        a = picard_solve(prov, spec, X0, times, tol=tol, initial_iterate="homogeneous")
        b = picard_solve(prov, spec, X0, times, tol=tol, initial_iterate="zero")
        assert a.converged and b.converged
        worst = max(
            x_norm(prov.at(float(t)), sa - sb)
            for t, sa, sb in zip(times, a.trajectory.states, b.trajectory.states)
        )
        assert worst <= 10 * tol

    def test_lipschitz_dependence_on_data(self):
        mesh, prov = make_provider()
        op = prov.at(0.0)
        rng = np.random.default_rng(13)
        raw = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        X0 = raw * (1.0 / x_norm(op, raw))
        rho = 1.0
        spec = NonlinearitySpec.power(3.0, 3.0)
        times = np.linspace(0, 0.3, 31)
        base = picard_solve(prov, spec, X0, times, tol=1e-12)
        dirn = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        dirn = dirn * (1.0 / x_norm(op, dirn))
        consts = []
        for eps in (1e-3 * rho, 5e-4 * rho):
            pert = picard_solve(prov, spec, X0 + eps * dirn, times, tol=1e-12)
            diff = max(
                x_norm(prov.at(float(t)), sa - sb)
                for t, sa, sb in zip(times, base.trajectory.states, pert.trajectory.states)
            )
            consts.append(diff / eps)
        assert consts[0] == pytest.approx(consts[1], rel=0.2)


class TestRestart:
    def test_linear_restart_exact(self):
        mesh, prov = make_provider()
        rng = np.random.default_rng(21)
        X0 = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        rep = restart_check(prov, NonlinearitySpec.zero(), X0, 0.2, 0.4, 0.01)
        assert rep.discrepancy <= 1e-9

    def test_nonlinear_restart_within_tolerance(self):
        mesh, prov = make_provider()
        op = prov.at(0.0)
        rng = np.random.default_rng(22)
        raw = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        X0 = raw * (0.5 / x_norm(op, raw))
        tol = 1e-10
        rep = restart_check(prov, NonlinearitySpec.power(3, 3), X0, 0.2, 0.4, 0.01, tol=tol)
        assert rep.discrepancy <= 10 * tol

    def test_offgrid_restart_rejected(self):
        mesh, prov = make_provider()
        X0 = StateVector.zeros(mesh.n_nodes)
        with pytest.raises(ValueError):
            restart_check(prov, NonlinearitySpec.zero(), X0, 0.205, 0.4, 0.01)


class TestContinuation:
    def test_linear_never_blows_up(self):
        mesh, prov = make_provider()
        rng = np.random.default_rng(31)
        X0 = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        out = continue_maximal(prov, NonlinearitySpec.zero(), X0, T=1.0, dt=0.01)
        assert not out.blew_up and out.t_plus == 1.0

    def test_small_defocusing_reaches_horizon(self):
        mesh, prov = make_provider()
        op = prov.at(0.0)
        rng = np.random.default_rng(32)
        raw = StateVector(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_nodes))
        X0 = raw * (0.1 / x_norm(op, raw))
        spec = NonlinearitySpec.power(3.0, 3.0, P="-1", P_b="-1")
        out = continue_maximal(prov, spec, X0, T=0.5, dt=0.01, seed=1)
        assert not out.blew_up and out.t_plus == pytest.approx(0.5)

    def test_zero_data_short_circuits(self):
        mesh, prov = make_provider(m="0", m_b="0")
        X0 = StateVector.zeros(mesh.n_nodes)
        out = continue_maximal(prov, NonlinearitySpec.power(3, 3), X0, T=0.3, dt=0.01)
        assert not out.blew_up
        assert all(x == 0 for x in out.trajectory.x_norms)

    def test_focusing_blowup_matches_scalar_oracle(self):
        mesh, prov = make_provider(m="0", m_b="0")
        spec = NonlinearitySpec.power(3.0, 3.0)
        n = mesh.n_nodes
        X0 = StateVector(np.ones(n), 0.5 * np.ones(n))
        t_ref = scalar_blowup_reference(1.0, 3.0, 1.0, 0.5)
        out = continue_maximal(prov, spec, X0, T=3.0, dt=5e-4, seed=2, lip_samples=24)
        assert out.blew_up
        assert abs(out.t_plus - t_ref) / t_ref <= 0.05

    def test_blowup_time_monotone_in_amplitude(self):
        mesh, prov = make_provider(m="0", m_b="0")
        spec = NonlinearitySpec.power(3.0, 3.0)
        n = mesh.n_nodes
        t_plus = []
        for amp in (1.0, 1.5, 2.0):
            X0 = StateVector(amp * np.ones(n), 0.5 * np.ones(n))
            out = continue_maximal(prov, spec, X0, T=3.0, dt=1e-3, seed=2, lip_samples=16)
            t_plus.append(out.t_plus)
        assert t_plus[0] >= t_plus[1] >= t_plus[2]
