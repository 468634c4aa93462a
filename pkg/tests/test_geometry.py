import numpy as np
import pytest

from wentzell_wave.geometry import (
    GeometryError,
    MetricError,
    MetricSpec,
    build_mesh,
    sample_metric,
)


class TestIntervalMesh:
    def test_counts_and_boundary(self):
        mesh = build_mesh("interval", n_x=4, length=1.0)
        assert mesh.n_nodes == 5
        assert mesh.boundary_node_ids.tolist() == [0, 4]

    def test_node_coordinates(self):
        mesh = build_mesh("interval", n_x=4, length=2.0)
        np.testing.assert_allclose(mesh.node_x, [0, 0.5, 1.0, 1.5, 2.0])

    @pytest.mark.parametrize("kwargs", [dict(n_x=1), dict(n_x=4, length=0.0), dict(n_x=0, length=-1.0)])
    def test_rejects_bad_resolution(self, kwargs):
        with pytest.raises(GeometryError):
            build_mesh("interval", **{"length": 1.0, **kwargs})


class TestCylinderMesh:
    def test_counts(self):
        mesh = build_mesh("cylinder", n_x=4, n_theta=8)
        assert mesh.n_nodes == 5 * 8
        assert mesh.n_boundary == 16

    def test_boundary_ids_are_two_circles(self):
        mesh = build_mesh("cylinder", n_x=4, n_theta=8)
        ids = mesh.boundary_node_ids
        assert ids.tolist() == list(range(8)) + list(range(32, 40))
        assert np.all(np.diff(ids) > 0)

    def test_angular_periodicity_in_cells(self):
        mesh = build_mesh("cylinder", n_x=2, n_theta=4)
        # the wrap cell at j = n_theta-1 references node j=0
        wrap_cells = [c for c in mesh.cells if 0 in (c[1] % 4, c[3] % 4)]
        assert wrap_cells

    def test_boundary_edges_close_the_circles(self):
        mesh = build_mesh("cylinder", n_x=2, n_theta=5)
        edges = mesh.boundary_edges
        from collections import Counter

        count = Counter(edges[:, 0].tolist()) + Counter(edges[:, 1].tolist())
        assert all(v == 2 for v in count.values())

    @pytest.mark.parametrize("kwargs", [dict(n_x=1, n_theta=8), dict(n_x=4, n_theta=2)])
    def test_rejects_bad_resolution(self, kwargs):
        with pytest.raises(GeometryError):
            build_mesh("cylinder", **kwargs)


def test_trace_conformity_property():
    for mesh in (build_mesh("interval", n_x=7), build_mesh("cylinder", n_x=3, n_theta=6)):
        ids = mesh.boundary_node_ids
        assert len(set(ids.tolist())) == len(ids)  # injective
        assert ids.min() >= 0 and ids.max() < mesh.n_nodes  # valid bulk ids


class TestMetricSampling:
    def test_flat_interval(self):
        mesh = build_mesh("interval", n_x=4)
        spec = MetricSpec.build("interval", a="1", horizon=1.0)
        s = sample_metric(spec, mesh, 0.5)
        np.testing.assert_array_equal(s.bulk_density, np.ones(5))
        np.testing.assert_array_equal(s.boundary_density, np.ones(2))

    def test_flat_cylinder(self):
        mesh = build_mesh("cylinder", n_x=4, n_theta=8)
        spec = MetricSpec.build("cylinder", a="1", b="1", horizon=1.0)
        s = sample_metric(spec, mesh, 0.0)
        np.testing.assert_array_equal(s.bulk_density, np.ones(mesh.n_nodes))
        np.testing.assert_array_equal(s.boundary_density, np.ones(16))

    def test_pulsating_boundary_density(self):
        mesh = build_mesh("cylinder", n_x=4, n_theta=8)
        spec = MetricSpec.build("cylinder", a="1", b="1 + 0.1*sin(t)", horizon=10.0)
        s = sample_metric(spec, mesh, np.pi / 2)
        np.testing.assert_allclose(s.boundary_density, 1.1, atol=1e-14)

    def test_flat_cylinder_volume_is_2pi(self):
        mesh = build_mesh("cylinder", n_x=16, n_theta=16)
        spec = MetricSpec.build("cylinder", a="1", b="1", horizon=1.0)
        s = sample_metric(spec, mesh, 0.0)
        assert abs(s.total_volume() - 2 * np.pi) <= 1e-12
        assert abs(s.boundary_volume() - 4 * np.pi) <= 1e-12

    def test_time_outside_horizon_rejected(self):
        mesh = build_mesh("interval", n_x=4)
        spec = MetricSpec.build("interval", a="1", horizon=1.0)
        with pytest.raises(MetricError):
            sample_metric(spec, mesh, 2.0)

    @pytest.mark.parametrize(
        "a_expr,t_bad",
        [
            ("1 - 2*x", 0.0),  # negative on the right half
            ("cos(t)", 2.0),  # dips negative for t > pi/2
        ],
    )
    def test_nonpositive_coefficient_names_the_point(self, a_expr, t_bad):
        mesh = build_mesh("interval", n_x=8)
        spec = MetricSpec.build("interval", a=a_expr, horizon=4.0)
        with pytest.raises(MetricError) as err:
            sample_metric(spec, mesh, t_bad)
        assert "x=" in str(err.value)

    def test_nonpositive_b_on_cylinder(self):
        mesh = build_mesh("cylinder", n_x=3, n_theta=6)
        spec = MetricSpec.build("cylinder", a="1", b="cos(theta)", horizon=1.0)
        with pytest.raises(MetricError):
            sample_metric(spec, mesh, 0.0)
