import numpy as np
import pytest
import scipy.linalg as la

from wentzell_wave.assembly import StateVector, WaveOperators, x_norm
from wentzell_wave.evolution import (
    FieldSource,
    TabulatedSource,
    ZeroSource,
    check_apriori_bound,
    estimate_M0,
    evolve_linear,
    kato_probe,
    kato_scan,
    resolvent_solve,
    step_midpoint,
    _step_arrays,
    _step_arrays_transpose,
)
from wentzell_wave.fields import make_field
from wentzell_wave.geometry import MetricSpec, build_mesh


def make_provider(kind="interval", n_x=10, n_theta=8, a="1", b="1", m="-1", m_b="-1", horizon=10.0):
    mesh = build_mesh(kind, n_x=n_x, n_theta=n_theta if kind == "cylinder" else 0)
    spec = MetricSpec.build(kind, a=a, b=b, m=m, m_b=m_b, horizon=horizon)
    return mesh, WaveOperators(mesh, spec)


class TestResolvent:
    def test_zero_rhs_gives_zero(self):
        _, prov = make_provider()
        op = prov.at(0.0)
        X, res = resolvent_solve(op, 1.0, StateVector.zeros(op.n))
        assert np.all(X.u == 0) and np.all(X.w == 0)

    def test_constant_rhs_massless(self):
        # with vanishing masses, constants solve w = c/lam, u = c/lam^2
        _, prov = make_provider(m="0", m_b="0")
        op = prov.at(0.0)
        lam, c = 2.0, 3.0
        F = StateVector(np.zeros(op.n), c * np.ones(op.n))
        X, res = resolvent_solve(op, lam, F)
        np.testing.assert_allclose(X.w, c / lam, rtol=1e-12)
        np.testing.assert_allclose(X.u, c / lam**2, rtol=1e-12)

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("masses", [("-1", "-1"), ("0", "0")])
    def test_matches_dense_block_oracle(self, lam, masses):
        _, prov = make_provider(m=masses[0], m_b=masses[1])
        op = prov.at(0.0)
        rng = np.random.default_rng(17)
        F = StateVector(rng.standard_normal(op.n), rng.standard_normal(op.n))
        X, res = resolvent_solve(op, lam, F)
        n = op.n
        minv_k = np.linalg.solve(op.mass.toarray(), op.stiff.toarray())
        A = np.block([[lam * np.eye(n), -np.eye(n)], [minv_k, lam * np.eye(n)]])
        ref = np.linalg.solve(A, np.concatenate([F.u, F.w]))
        got = np.concatenate([X.u, X.w])
        assert np.linalg.norm(got - ref) <= 1e-10 * np.linalg.norm(ref)
        assert res <= 1e-9

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("masses", [("-1", "-1"), ("0", "0")])
    def test_contraction_bound(self, lam, masses):
        _, prov = make_provider(m=masses[0], m_b=masses[1])
        op = prov.at(0.0)
        rng = np.random.default_rng(23)
        for _ in range(20):
            F = StateVector(rng.standard_normal(op.n), rng.standard_normal(op.n))
            X, _ = resolvent_solve(op, lam, F)
            assert lam * x_norm(op, X) <= (1 + 1e-8) * x_norm(op, F)

    def test_rejects_nonpositive_shift(self):
        _, prov = make_provider()
        op = prov.at(0.0)
        with pytest.raises(ValueError):
            resolvent_solve(op, 0.0, StateVector.zeros(op.n))


class TestMidpointStep:
    def test_zero_fixed_point(self):
        _, prov = make_provider()
        X, res = step_midpoint(prov.frozen(0.0), StateVector.zeros(prov.mesh.n_nodes), 0.0, 0.01)
        assert np.all(X.u == 0) and np.all(X.w == 0)

    def test_energy_conserved_per_step(self):
        _, prov = make_provider()
        frozen = prov.frozen(0.0)
        op = frozen.at(0.0)
        rng = np.random.default_rng(4)
        X = StateVector(rng.standard_normal(op.n), rng.standard_normal(op.n))
        e0 = x_norm(op, X) ** 2
        X1, _ = step_midpoint(frozen, X, 0.0, 0.01)
        assert abs(x_norm(op, X1) ** 2 - e0) <= 1e-10 * e0

    def test_transpose_step_is_adjoint(self):
        _, prov = make_provider()
        op = prov.at(0.0)
        rng = np.random.default_rng(9)
        xu, xw = rng.standard_normal(op.n), rng.standard_normal(op.n)
        yu, yw = rng.standard_normal(op.n), rng.standard_normal(op.n)
        su, sw, _ = _step_arrays(op, xu, xw, 0.02)
        tu, tw = _step_arrays_transpose(op, yu, yw, 0.02)
        lhs = su @ yu + sw @ yw
        rhs = xu @ tu + xw @ tw
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_second_order_against_expm(self):
        _, prov = make_provider(n_x=10)
        frozen = prov.frozen(0.0)
        op = frozen.at(0.0)
        n = op.n
        rng = np.random.default_rng(12)
        u0 = np.sin(np.pi * np.linspace(0, 1, n))
        X0 = StateVector(u0, np.zeros(n))
        minv_k = np.linalg.solve(op.mass.toarray(), op.stiff.toarray())
        G = np.block([[np.zeros((n, n)), np.eye(n)], [-minv_k, np.zeros((n, n))]])
        ref_vec = la.expm(G) @ np.concatenate([X0.u, X0.w])
        ref = StateVector(ref_vec[:n], ref_vec[n:])
        errs = []
        for steps in (50, 100, 200):
            traj = evolve_linear(frozen, X0, None, np.linspace(0, 1.0, steps + 1))
            errs.append(x_norm(op, traj.final - ref))
        assert 3.6 <= errs[0] / errs[1] <= 4.4
        assert 3.6 <= errs[1] / errs[2] <= 4.4

    def test_rejects_nonpositive_dt(self):
        _, prov = make_provider()
        with pytest.raises(ValueError):
            step_midpoint(prov.frozen(0.0), StateVector.zeros(prov.mesh.n_nodes), 0.0, 0.0)


class TestEvolveLinear:
    def test_autonomous_norm_constant(self):
        _, prov = make_provider("cylinder", n_x=6, n_theta=6)
        frozen = prov.frozen(0.0)
        rng = np.random.default_rng(2)
        n = prov.mesh.n_nodes
        X0 = StateVector(rng.standard_normal(n), rng.standard_normal(n))
        traj = evolve_linear(frozen, X0, None, np.linspace(0, 1.0, 101))
        drift = np.max(np.abs(traj.x_norms - traj.x_norms[0])) / traj.x_norms[0]
        assert drift <= 1e-8

    def test_velocity_reversal_returns_initial(self):
        _, prov = make_provider()
        frozen = prov.frozen(0.0)
        rng = np.random.default_rng(6)
        n = prov.mesh.n_nodes
        X0 = StateVector(rng.standard_normal(n), rng.standard_normal(n))
        X = X0.copy()
        for k in range(10):
            X, _ = step_midpoint(frozen, X, 0.01 * k, 0.01)
        X = StateVector(X.u, -X.w)
        for k in range(10):
            X, _ = step_midpoint(frozen, X, 0.01 * k, 0.01)
        X = StateVector(X.u, -X.w)
        op = frozen.at(0.0)
        assert x_norm(op, X - X0) <= 1e-9 * x_norm(op, X0)

    def test_pulsating_metric_norm_within_family_bound(self):
        mesh, prov = make_provider("cylinder", n_x=6, n_theta=6, b="1 + 0.1*sin(t)", horizon=2 * np.pi)
        rng = np.random.default_rng(8)
        n = mesh.n_nodes
        X0 = StateVector(rng.standard_normal(n), rng.standard_normal(n))
        est = estimate_M0(prov, 2 * np.pi, dt=0.05, n_probe_times=5, n_probes=4, seed=1)
        traj = evolve_linear(prov, X0, None, np.linspace(0, 2 * np.pi, 315))
        assert np.max(traj.x_norms) <= est.value * traj.x_norms[0] * (1 + 1e-3)

    def test_requires_increasing_grid(self):
        _, prov = make_provider()
        X0 = StateVector.zeros(prov.mesh.n_nodes)
        with pytest.raises(ValueError):
            evolve_linear(prov.frozen(0.0), X0, None, [0.0, 0.0, 0.1])


class TestSources:
    def test_tabulated_midpoint_average(self):
        times = np.array([0.0, 1.0])
        f_tab = np.array([[0.0, 0.0], [2.0, 4.0]])
        src = TabulatedSource(times, f_tab, None)
        f, g = src.values(0.5)
        np.testing.assert_allclose(f, [1.0, 2.0])
        assert g is None

    def test_tabulated_clamps_to_range(self):
        times = np.array([0.0, 1.0])
        src = TabulatedSource(times, np.array([[1.0], [3.0]]), np.array([[5.0], [7.0]]))
        np.testing.assert_allclose(src.values(-1)[0], [1.0])
        np.testing.assert_allclose(src.values(2.0)[1], [7.0])

    def test_field_source_evaluates_on_boundary(self):
        mesh, _ = make_provider("cylinder", n_x=4, n_theta=6)
        src = FieldSource(mesh, make_field("0", ("t", "x", "theta")), make_field("cos(theta)", ("t", "x", "theta")))
        f, g = src.values(0.0)
        assert f.shape == (mesh.n_nodes,)
        assert g.shape == (mesh.n_boundary,)
        np.testing.assert_allclose(g[:6], np.cos(mesh.node_theta[:6]), atol=1e-15)


class TestAprioriBound:
    def test_sourced_pulsating_run(self):
        mesh, prov = make_provider(n_x=16, a="1 + 0.1*sin(t)", horizon=2.0)
        src = FieldSource(
            mesh,
            make_field("cos(3*t)*sin(pi*x)", ("t", "x")),
            make_field("0.5*cos(t)", ("t", "x")),
        )
        X0 = StateVector(np.cos(np.pi * mesh.node_x), np.zeros(mesh.n_nodes))
        traj = evolve_linear(prov, X0, src, np.linspace(0, 2.0, 201))
        m0 = estimate_M0(prov, 2.0, dt=0.02, seed=5).value
        rep = check_apriori_bound(traj, prov, src, m0=m0)
        assert rep.satisfied
        assert rep.max_source_norm > 0


class TestM0:
    def test_autonomous_contraction(self):
        _, prov = make_provider("cylinder", n_x=5, n_theta=6)
        est = estimate_M0(prov, 2.0, dt=0.02, seed=3)
        assert est.value <= 1 + 1e-8

    def test_reproducible_across_seeds(self):
        _, prov = make_provider(n_x=10, a="1 + 0.1*sin(t)", horizon=2 * np.pi)
        vals = [estimate_M0(prov, 2 * np.pi, dt=0.02, seed=s).value for s in (1, 99)]
        assert abs(vals[0] - vals[1]) / vals[0] <= 0.05

    def test_value_at_least_one(self):
        _, prov = make_provider(n_x=6)
        est = estimate_M0(prov, 1.0, dt=0.05, seed=0)
        assert est.value >= 1.0


class TestKato:
    def test_identity_at_equal_times(self):
        _, prov = make_provider(n_x=8, a="1 + 0.1*sin(t)", horizon=2.0)
        p = kato_probe(prov, 0.7, 0.7)
        assert p.norm == pytest.approx(1.0, abs=1e-10)

    def test_autonomous_is_identity_everywhere(self):
        _, prov = make_provider(n_x=8)
        p = kato_probe(prov, 0.3, 1.5)
        assert np.max(np.abs(p.matrix - np.eye(2 * prov.mesh.n_nodes))) <= 1e-10

    def test_scan_finite_and_stable_under_refinement(self):
        _, prov = make_provider(n_x=10, a="1 + 0.1*sin(t)", horizon=2 * np.pi)
        coarse = kato_scan(prov, np.linspace(0, 2 * np.pi, 10))
        fine = kato_scan(prov, np.linspace(0, 2 * np.pi, 19))
        assert np.all(np.isfinite(coarse.norms))
        assert np.all(np.isfinite(coarse.bv_sums))
        assert abs(fine.max_norm - coarse.max_norm) / coarse.max_norm <= 0.05

    def test_cap_enforced(self):
        _, prov = make_provider(n_x=500)
        with pytest.raises(ValueError):
            kato_probe(prov, 0.0, 0.5, cap=400)
