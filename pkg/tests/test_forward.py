"""Forward elasticity solver: patch test, uniaxial solutions, truth frames."""

import numpy as np
import pytest

from elastoreg.errors import InvalidArgumentError, UnderConstrainedError
from elastoreg.forward import (
    PLANE_STRAIN,
    PLANE_STRESS,
    BoundarySpec,
    MaterialField,
    assemble_stiffness,
    element_center_strains,
    load_truthseq,
    make_truth_frames,
    save_truthseq,
    solve_static,
    window_mean_axial_strain,
)
from elastoreg.mesh import NodalField, build_structured_mesh
from elastoreg.ussim import Disk, Rect


def uniaxial_setup(mode, nu, delta=0.05, height=10.0, width=8.0, nx=5, ny=4):
    mesh = build_structured_mesh(height, width, nx, ny)
    material = MaterialField.homogeneous(mesh, 10.0, nu, mode)
    bcs = BoundarySpec(mesh)
    top = bcs.nodes_on(lambda p: p[:, 0] < 1e-9)
    bottom = bcs.nodes_on(lambda p: p[:, 0] > height - 1e-9)
    bcs.slip(top, axis=0, value=delta)
    bcs.slip(bottom, axis=0, value=0.0)
    # Pin lateral translation at the bottom mid-side node.
    pin = bottom[np.argmin(np.abs(mesh.nodes[bottom, 1] - width / 2))]
    bcs.slip(pin, axis=1, value=0.0)
    return mesh, material, bcs, delta, height


class TestSolveStatic:
    @pytest.mark.parametrize("mode,nu", [(PLANE_STRAIN, 0.3), (PLANE_STRESS, 0.3)])
    def test_uniaxial_axial_strain(self, mode, nu):
        mesh, material, bcs, delta, height = uniaxial_setup(mode, nu)
        u = solve_static(mesh, material, bcs)
        strains = element_center_strains(u)
        np.testing.assert_allclose(strains[:, 0], -delta / height, rtol=1e-8)
        np.testing.assert_allclose(strains[:, 2], 0.0, atol=1e-12)

    def test_uniaxial_plane_stress_lateral_strain(self):
        nu = 0.3
        mesh, material, bcs, delta, height = uniaxial_setup(PLANE_STRESS, nu)
        u = solve_static(mesh, material, bcs)
        strains = element_center_strains(u)
        np.testing.assert_allclose(strains[:, 1], nu * delta / height, rtol=1e-8)

    def test_uniaxial_plane_strain_lateral_strain(self):
        nu = 0.3
        mesh, material, bcs, delta, height = uniaxial_setup(PLANE_STRAIN, nu)
        u = solve_static(mesh, material, bcs)
        strains = element_center_strains(u)
        expected = nu / (1 - nu) * delta / height
        np.testing.assert_allclose(strains[:, 1], expected, rtol=1e-8)

    def test_no_locking_near_incompressible(self):
        # nu = 0.495 plane strain must still hit the analytic uniaxial value.
        nu = 0.495
        mesh, material, bcs, delta, height = uniaxial_setup(PLANE_STRAIN, nu)
        u = solve_static(mesh, material, bcs)
        strains = element_center_strains(u)
        expected = nu / (1 - nu) * delta / height
        np.testing.assert_allclose(strains[:, 0], -delta / height, rtol=1e-2)
        np.testing.assert_allclose(strains[:, 1], expected, rtol=1e-2)

    def test_zero_prescription_gives_zero_field(self):
        mesh, material, bcs, _, _ = uniaxial_setup(PLANE_STRESS, 0.3, delta=0.0)
        u = solve_static(mesh, material, bcs)
        np.testing.assert_allclose(u.values, 0.0, atol=1e-14)

    def test_under_constrained_raises(self):
        mesh = build_structured_mesh(2.0, 2.0, 2, 2)
        material = MaterialField.homogeneous(mesh, 10.0, 0.3, PLANE_STRESS)
        bcs = BoundarySpec(mesh)  # nothing constrained
        with pytest.raises(UnderConstrainedError):
            solve_static(mesh, material, bcs)

    def test_patch_test_linear_boundary_displacement(self):
        mesh = build_structured_mesh(3.0, 2.0, 3, 2)
        material = MaterialField.homogeneous(mesh, 7.0, 0.33, PLANE_STRAIN)
        grad = np.array([[0.01, 0.004], [-0.006, 0.02]])
        exact = mesh.nodes @ grad.T
        boundary = np.nonzero(
            (mesh.nodes[:, 0] < 1e-9) | (mesh.nodes[:, 0] > 3 - 1e-9)
            | (mesh.nodes[:, 1] < 1e-9) | (mesh.nodes[:, 1] > 2 - 1e-9)
        )[0]
        bcs = BoundarySpec(mesh)
        for n in boundary:
            bcs.prescribe(n, exact[n])
        u = solve_static(mesh, material, bcs)
        np.testing.assert_allclose(u.values, exact, atol=1e-10)

    def test_reaction_forces_balance(self):
        mesh, material, bcs, _, _ = uniaxial_setup(PLANE_STRESS, 0.3)
        u = solve_static(mesh, material, bcs)
        k = assemble_stiffness(mesh, material)
        internal = k @ u.dofs
        total = np.array([internal[0::2].sum(), internal[1::2].sum()])
        scale = np.abs(internal).max()
        assert np.all(np.abs(total) <= 1e-8 * scale)

    def test_stiffness_spd_after_elimination(self):
        mesh, material, bcs, _, _ = uniaxial_setup(PLANE_STRAIN, 0.495)
        k = assemble_stiffness(mesh, material)
        free = np.setdiff1d(np.arange(mesh.n_dofs), bcs.constrained_dofs)
        kff = k[free][:, free].toarray()
        np.testing.assert_allclose(kff, kff.T, atol=1e-10)
        np.linalg.cholesky(kff)  # raises if not positive definite

    def test_stiff_inclusion_strains_less(self):
        mesh = build_structured_mesh(20.0, 20.0, 16, 16)
        disk = Disk((7.0, 10.0), 3.0)
        material = MaterialField.with_inclusion(mesh, 10.0, 40.0, disk, 0.495,
                                                PLANE_STRAIN)
        bcs = BoundarySpec(mesh)
        top = bcs.nodes_on(
            lambda p: (p[:, 0] < 1e-9) & (np.abs(p[:, 1] - 10.0) <= 5.0 + 1e-9)
        )
        bottom = bcs.nodes_on(lambda p: p[:, 0] > 20.0 - 1e-9)
        bcs.slip(top, axis=0, value=0.2)
        bcs.slip(bottom, axis=0, value=0.0)
        pin = bottom[np.argmin(np.abs(mesh.nodes[bottom, 1] - 10.0))]
        bcs.slip(pin, axis=1, value=0.0)
        u = solve_static(mesh, material, bcs)
        strains = element_center_strains(u)
        inside = disk.contains(mesh.element_centroids())
        areas = mesh.element_areas()
        mean_in = np.dot(areas[inside], strains[inside, 0]) / areas[inside].sum()
        mean_out = np.dot(areas[~inside], strains[~inside, 0]) / areas[~inside].sum()
        assert abs(mean_in) < abs(mean_out)


class TestTruthFrames:
    def make_solution(self):
        mesh, material, bcs, _, _ = uniaxial_setup(PLANE_STRESS, 0.3)
        return mesh, solve_static(mesh, material, bcs)

    def test_two_frames_hit_step_strain(self):
        mesh, u = self.make_solution()
        window = Rect(1.0, 1.0, 8.0, 6.0)
        frames = make_truth_frames(u, 2, 0.004, mesh, window)
        assert len(frames) == 2
        np.testing.assert_array_equal(frames[0].values, 0.0)
        mean = window_mean_axial_strain(frames[1], window)
        assert mean == pytest.approx(-0.004, rel=1e-12)

    def test_twenty_frames_linear_accumulation(self):
        mesh, u = self.make_solution()
        window = Rect(1.0, 1.0, 8.0, 6.0)
        frames = make_truth_frames(u, 20, 0.0035, mesh, window)
        mean_final = window_mean_axial_strain(frames[19], window)
        assert mean_final == pytest.approx(-19 * 0.0035, rel=1e-12)
        # Homogeneity: doubling every scale doubles every strain.
        doubled = [f.scaled(2.0) for f in frames]
        m2 = window_mean_axial_strain(doubled[19], window)
        assert m2 == pytest.approx(2 * mean_final, rel=1e-12)

    def test_zero_window_strain_rejected(self):
        mesh, u = self.make_solution()
        zero = NodalField.zeros(mesh)
        with pytest.raises(InvalidArgumentError):
            make_truth_frames(zero, 5, 0.004, mesh, Rect(1, 1, 8, 6))

    def test_truthseq_round_trip(self, tmp_path):
        mesh, u = self.make_solution()
        frames = make_truth_frames(u, 4, 0.004, mesh, Rect(1, 1, 8, 6))
        path = tmp_path / "t.truthseq"
        save_truthseq(frames, mesh, path)
        back = load_truthseq(path, mesh)
        assert len(back) == 4
        for a, b in zip(frames, back):
            np.testing.assert_array_equal(a.values, b.values)
