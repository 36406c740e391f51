"""Mesh construction, shape functions, inverse mapping, interpolation."""

import numpy as np
import pytest

from elastoreg.errors import InvalidArgumentError
from elastoreg.mesh import (
    GAUSS_3X3,
    NodalField,
    QuadMesh,
    build_structured_mesh,
    interpolate_field,
    load_quadmesh,
    mesh_hash,
    parse_quadmesh,
    save_quadmesh,
    serialize_quadmesh,
    shape_values,
)


def skewed_mesh():
    """3x3 mesh with interior nodes perturbed deterministically."""
    mesh = build_structured_mesh(3.0, 3.0, 3, 3)
    nodes = mesh.nodes.copy()
    rng = np.random.default_rng(7)
    interior = (
        (nodes[:, 0] > 1e-9)
        & (nodes[:, 0] < 3 - 1e-9)
        & (nodes[:, 1] > 1e-9)
        & (nodes[:, 1] < 3 - 1e-9)
    )
    nodes[interior] += rng.uniform(-0.18, 0.18, size=(interior.sum(), 2))
    return QuadMesh(nodes, mesh.elements)


class TestBuildStructured:
    def test_single_element(self):
        mesh = build_structured_mesh(1.0, 1.0, 1, 1)
        assert mesh.n_elements == 1
        assert mesh.n_nodes == 4
        assert mesh.n_interior_edges == 0

    def test_two_element_strip(self):
        mesh = build_structured_mesh(2.0, 1.0, 2, 1)
        assert mesh.n_elements == 2
        assert mesh.n_nodes == 6
        assert mesh.n_interior_edges == 1
        assert mesh.edge_lengths[0] == pytest.approx(1.0)
        n = mesh.edge_normals[0]
        assert abs(n[0]) == pytest.approx(1.0)
        assert n[1] == pytest.approx(0.0, abs=1e-14)
        # Oriented from element 0 toward element 1 (increasing x).
        assert n[0] == pytest.approx(1.0)

    def test_three_by_three(self):
        mesh = build_structured_mesh(10.0, 10.0, 3, 3)
        assert mesh.n_elements == 9
        assert mesh.n_interior_edges == 12

    @pytest.mark.parametrize("nx,ny", [(1, 1), (2, 3), (5, 4), (7, 7)])
    def test_interior_edge_count_formula(self, nx, ny):
        mesh = build_structured_mesh(1.0, 1.0, nx, ny)
        assert mesh.n_interior_edges == nx * (ny - 1) + ny * (nx - 1)

    def test_invalid_dimensions(self):
        with pytest.raises(InvalidArgumentError):
            build_structured_mesh(0.0, 1.0, 1, 1)
        with pytest.raises(InvalidArgumentError):
            build_structured_mesh(1.0, 1.0, 0, 1)

    def test_edge_adjacency(self):
        mesh = build_structured_mesh(2.0, 2.0, 2, 2)
        assert np.all(mesh.edge_left < mesh.edge_right)
        # Every interior edge's two nodes belong to both adjacent elements.
        for k in range(mesh.n_interior_edges):
            a, b = mesh.edge_nodes[k]
            for e in (mesh.edge_left[k], mesh.edge_right[k]):
                conn = set(mesh.elements[e])
                assert a in conn and b in conn


class TestQuadrature:
    def test_weights_sum_to_reference_area(self):
        assert GAUSS_3X3.weights.sum() == pytest.approx(4.0)

    def test_integrates_quintic_exactly(self):
        # int_{-1}^{1} x^5 ... via product rule on x^5 * y^4
        f = GAUSS_3X3.points[:, 0] ** 5 * GAUSS_3X3.points[:, 1] ** 4 + 1.0
        got = np.dot(GAUSS_3X3.weights, f)
        assert got == pytest.approx(4.0, abs=1e-13)  # odd term vanishes

    def test_total_area_matches_domain(self):
        mesh = build_structured_mesh(3.5, 2.25, 6, 5)
        total = mesh.element_areas().sum()
        assert total == pytest.approx(3.5 * 2.25, rel=1e-10)


class TestShapeFunctions:
    def test_partition_of_unity_at_quadrature_points(self):
        vals = shape_values(GAUSS_3X3.points)
        np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)

    def test_linear_reproduction_unit_square(self):
        mesh = build_structured_mesh(1.0, 1.0, 1, 1)
        g = mesh.shape_gradients(0, (0.0, 0.0))
        nodal_x = mesh.nodes[mesh.elements[0], 0]
        grad = nodal_x @ g
        np.testing.assert_allclose(grad, [1.0, 0.0], atol=1e-12)

    def test_gradient_rows_sum_to_zero(self):
        mesh = skewed_mesh()
        for q in GAUSS_3X3.points:
            g = mesh.shape_gradients(4, q)
            np.testing.assert_allclose(g.sum(axis=0), 0.0, atol=1e-12)

    def test_linear_reproduction_every_element_every_qp(self):
        mesh = skewed_mesh()
        a = np.array([0.3, -1.2])
        b = np.array([[0.7, 0.2], [-0.4, 1.1]])
        for e in range(mesh.n_elements):
            conn = mesh.elements[e]
            nodal = mesh.nodes[conn] @ b.T + a  # linear field at nodes
            for q in GAUSS_3X3.points:
                g = mesh.shape_gradients(e, q)
                grad = nodal.T @ g  # (2, 2) field gradient
                np.testing.assert_allclose(grad, b, atol=1e-12)

    def test_gradient_matches_finite_difference_of_map(self):
        mesh = skewed_mesh()
        elem, local = 4, np.array([0.3, -0.5])
        g = mesh.shape_gradients(elem, local)
        # Differentiate N(local(x)) through the map with central differences.
        h = 1e-6
        base = mesh.forward_map(elem, local)
        for comp in range(2):
            step = np.zeros(2)
            step[comp] = h
            hi = mesh.inverse_map(base + step)
            lo = mesh.inverse_map(base - step)
            fd = (shape_values(hi[1]) - shape_values(lo[1])) / (2 * h)
            np.testing.assert_allclose(g[:, comp], fd, rtol=1e-6, atol=1e-8)


class TestInverseMap:
    def test_centroid_maps_to_origin(self):
        mesh = build_structured_mesh(2.0, 3.0, 2, 2)
        centroid = mesh.element_coords(1).mean(axis=0)
        elem, local = mesh.inverse_map(centroid)
        assert elem == 1
        np.testing.assert_allclose(local, [0.0, 0.0], atol=1e-9)

    def test_node_maps_to_corner(self):
        mesh = build_structured_mesh(2.0, 2.0, 2, 2)
        elem, local = mesh.inverse_map(mesh.nodes[0])
        assert elem == 0
        np.testing.assert_allclose(np.abs(local), [1.0, 1.0], atol=1e-9)

    def test_round_trip_random_points(self):
        mesh = skewed_mesh()
        rng = np.random.default_rng(3)
        pts = rng.uniform(0.05, 2.95, size=(1000, 2))
        elems, locs = mesh.locate_points(pts)
        assert np.all(elems >= 0)
        back = np.array(
            [mesh.forward_map(e, l) for e, l in zip(elems, locs)]
        )
        assert np.max(np.abs(back - pts)) < 1e-9

    def test_outside_returns_none(self):
        mesh = build_structured_mesh(1.0, 1.0, 2, 2)
        assert mesh.inverse_map((5.0, 5.0)) is None
        assert mesh.inverse_map((-0.1, 0.5)) is None

    def test_shared_edge_lowest_element(self):
        mesh = build_structured_mesh(2.0, 1.0, 2, 1)
        elem, _ = mesh.inverse_map((1.0, 0.5))  # on the shared edge
        assert elem == 0


class TestInterpolateField:
    def test_constant_field(self):
        mesh = build_structured_mesh(2.0, 2.0, 3, 3)
        f = NodalField(mesh, np.tile([1.5, -2.0], (mesh.n_nodes, 1)))
        got = interpolate_field(f, [(0.3, 1.1), (1.9, 0.2)])
        np.testing.assert_allclose(got, [[1.5, -2.0]] * 2, atol=1e-12)

    def test_linear_reproduction(self):
        mesh = skewed_mesh()
        f = NodalField(mesh, np.stack([mesh.nodes[:, 0], mesh.nodes[:, 1]], axis=1))
        pts = np.array([(0.37, 2.21), (1.5, 1.5), (2.9, 0.1)])
        got = interpolate_field(f, pts)
        np.testing.assert_allclose(got, pts, atol=1e-9)

    def test_outside_value(self):
        mesh = build_structured_mesh(1.0, 1.0, 1, 1)
        f = NodalField(mesh, np.ones((4, 2)))
        got = interpolate_field(f, [(3.0, 3.0)], outside_value=(0.0, 0.0))
        np.testing.assert_allclose(got, [[0.0, 0.0]])


class TestNodalField:
    def test_dof_layout_interleaved(self):
        mesh = build_structured_mesh(1.0, 1.0, 1, 1)
        f = NodalField(mesh, [[1, 2], [3, 4], [5, 6], [7, 8]])
        np.testing.assert_array_equal(f.dofs, [1, 2, 3, 4, 5, 6, 7, 8])
        assert f.dofs.shape == (2 * mesh.n_nodes,)

    def test_arithmetic(self):
        mesh = build_structured_mesh(1.0, 1.0, 1, 1)
        a = NodalField(mesh, np.ones((4, 2)))
        b = a.scaled(2.0)
        c = a + b
        np.testing.assert_allclose(c.values, 3.0)
        np.testing.assert_allclose((c - a).values, 2.0)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        mesh = skewed_mesh()
        path = tmp_path / "m.quadmesh"
        save_quadmesh(mesh, path)
        back = load_quadmesh(path)
        np.testing.assert_array_equal(back.nodes, mesh.nodes)
        np.testing.assert_array_equal(back.elements, mesh.elements)
        assert mesh_hash(back) == mesh_hash(mesh)

    def test_header_required(self):
        with pytest.raises(InvalidArgumentError):
            parse_quadmesh("not a mesh\n")

    def test_serialization_is_text(self):
        mesh = build_structured_mesh(1.0, 1.0, 1, 1)
        text = serialize_quadmesh(mesh)
        assert text.startswith("quadmesh v1\n")
        assert "4 1" in text.splitlines()[1]
