"""Image-match evaluation and the Gauss-Newton registration loop."""

import numpy as np
import pytest

from elastoreg.blockmatch import BlockMatchConfig
from elastoreg.errors import InvalidArgumentError
from elastoreg.mesh import NodalField, build_structured_mesh, interpolate_field
from elastoreg.registration import (
    ImageMatcher,
    cubic_sample,
    eval_match,
    image_gradients,
    load_dispfield,
    register_pair,
    register_sequence,
    save_dispfield,
    save_report_csv,
)
from elastoreg.regularizers import (
    MOMENTUM_PLANE_STRESS,
    STRAIN,
    RegularizerSpec,
)
from elastoreg.ussim import (
    ImageGrid,
    Psf,
    Rect,
    RfImage,
    displace_scatterers,
    gen_scatterers,
    render_rf,
)

PSF = Psf()
GRID = ImageGrid(256, 24, 0.01925, 0.3, (0.0, 0.0))
SCATTERERS = gen_scatterers(Rect(-1.0, -1.0, 7.0, 9.0), 30.0, seed=21)
REF_IMAGE = render_rf(SCATTERERS, PSF, GRID)


def reg_mesh(nx=4, ny=4):
    return build_structured_mesh(4.0, 5.0, nx, ny, origin=(0.5, 0.5))


def shifted_image(shift):
    mesh = build_structured_mesh(9.0, 11.0, 2, 2, origin=(-1.5, -1.5))
    f = NodalField(mesh, np.tile(shift, (mesh.n_nodes, 1)))
    moved = displace_scatterers(SCATTERERS, f)
    return render_rf(moved, PSF, GRID)


class TestCubicSample:
    def test_exact_at_grid_points(self):
        pts = np.array([[10 * GRID.axial_spacing, 7 * GRID.lateral_spacing],
                        [100 * GRID.axial_spacing, 20 * GRID.lateral_spacing]])
        got = cubic_sample(REF_IMAGE, pts)
        assert got[0] == pytest.approx(REF_IMAGE.samples[10, 7], abs=1e-12)
        assert got[1] == pytest.approx(REF_IMAGE.samples[100, 20], abs=1e-12)

    def test_reproduces_linear_ramp(self):
        ramp = np.add.outer(np.arange(64.0), 2.0 * np.arange(16.0))
        img = RfImage(ramp, 0.1, 0.2, (0.0, 0.0))
        pts = np.array([[1.234, 0.345], [3.0, 2.5], [5.55, 1.01]])
        expect = pts[:, 0] / 0.1 + 2.0 * pts[:, 1] / 0.2
        got = cubic_sample(img, pts)
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_outside_is_zero(self):
        got = cubic_sample(REF_IMAGE, [[-1.0, 0.5], [100.0, 0.5]])
        np.testing.assert_array_equal(got, 0.0)


class TestEvalMatch:
    def test_identical_images_zero(self):
        mesh = reg_mesh()
        m = eval_match(REF_IMAGE, REF_IMAGE, NodalField.zeros(mesh))
        assert m.value == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(m.gradient, 0.0, atol=1e-14)

    def test_exact_shift_drops_mismatch(self):
        shift = np.array([0.3 * GRID.axial_spacing, 0.1 * GRID.lateral_spacing])
        i2 = shifted_image(shift)
        mesh = reg_mesh()
        matcher = ImageMatcher(REF_IMAGE, i2, mesh)
        at_zero = matcher.evaluate(NodalField.zeros(mesh)).value
        u = NodalField(mesh, np.tile(shift, (mesh.n_nodes, 1)))
        at_truth = matcher.evaluate(u).value
        assert at_truth < at_zero / 10.0

    def test_gradient_matches_frozen_convention_fd(self):
        # Independent recomputation of the Gauss-Newton model: residual at
        # u0 plus the frozen reference-gradient times the nodal
        # perturbation, differentiated by central differences.
        shift = np.array([0.2 * GRID.axial_spacing, 0.1 * GRID.lateral_spacing])
        i2 = shifted_image(shift)
        mesh = reg_mesh(3, 3)
        matcher = ImageMatcher(REF_IMAGE, i2, mesh)
        rng = np.random.default_rng(12)
        u0 = NodalField(mesh, 0.002 * rng.standard_normal((mesh.n_nodes, 2)))
        analytic = matcher.evaluate(u0).gradient

        pts = matcher.points
        area = matcher.pixel_area
        i1_vals = cubic_sample(REF_IMAGE, pts)
        gx, gy = image_gradients(REF_IMAGE)
        ix = np.rint(pts[:, 0] / GRID.axial_spacing).astype(int)
        iy = np.rint(pts[:, 1] / GRID.lateral_spacing).astype(int)
        gxp, gyp = gx[ix, iy], gy[ix, iy]
        u0_at = interpolate_field(u0, pts)
        r0 = cubic_sample(i2, pts + u0_at) - i1_vals

        def frozen_value(v):
            dv = interpolate_field(v, pts) - u0_at
            e = r0 + gxp * dv[:, 0] + gyp * dv[:, 1]
            return 0.5 * area * float(e @ e)

        h = 1e-7
        fd = np.zeros(mesh.n_dofs)
        base = u0.dofs.copy()
        for i in range(mesh.n_dofs):
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            fd[i] = (
                frozen_value(NodalField.from_dofs(mesh, up))
                - frozen_value(NodalField.from_dofs(mesh, dn))
            ) / (2 * h)
        err = np.linalg.norm(analytic - fd) / np.linalg.norm(fd)
        assert err < 1e-4

    def test_hessian_is_psd(self):
        mesh = reg_mesh(3, 3)
        m = eval_match(REF_IMAGE, REF_IMAGE, NodalField.zeros(mesh))
        h = m.gn_hessian.toarray()
        np.testing.assert_allclose(h, h.T, atol=1e-12)
        eig = np.linalg.eigvalsh(h)
        assert eig.min() >= -1e-10 * np.abs(eig).max()

    def test_mesh_outside_image_rejected(self):
        mesh = build_structured_mesh(10.0, 5.0, 2, 2, origin=(0.5, 0.5))
        with pytest.raises(InvalidArgumentError):
            eval_match(REF_IMAGE, REF_IMAGE, NodalField.zeros(mesh))


class TestRegisterPair:
    def test_identical_pair_converges_at_zero(self):
        mesh = reg_mesh()
        spec = RegularizerSpec(STRAIN, 24.8)
        u, report = register_pair(REF_IMAGE, REF_IMAGE, NodalField.zeros(mesh),
                                  spec, mesh)
        np.testing.assert_allclose(u.values, 0.0, atol=1e-12)
        assert report.converged
        assert report.iterations == 1
        assert report.final_step_ratio < 1e-3

    def test_uniform_translation_recovery(self):
        shift = np.array([0.05, 0.1])
        i2 = shifted_image(shift)
        mesh = reg_mesh()
        cfg = BlockMatchConfig(window_axial=1.5, window_lateral=2.4,
                               search_radius=(12, 4))
        from elastoreg.registration import block_match_initial

        init = block_match_initial(REF_IMAGE, i2, mesh, cfg)
        spec = RegularizerSpec(STRAIN, 24.8)
        u, report = register_pair(REF_IMAGE, i2, init, spec, mesh)
        err_px_ax = (u.values[:, 0] - shift[0]) / GRID.axial_spacing
        err_px_lat = (u.values[:, 1] - shift[1]) / GRID.lateral_spacing
        rms = np.sqrt(np.mean(err_px_ax**2 + err_px_lat**2))
        assert rms < 0.05
        assert report.iterations <= 20

    def test_fixed_point_with_momentum_regularizer(self):
        mesh = reg_mesh()
        spec = RegularizerSpec(MOMENTUM_PLANE_STRESS, 2.33e-4)
        u, report = register_pair(REF_IMAGE, REF_IMAGE, NodalField.zeros(mesh),
                                  spec, mesh)
        assert report.converged
        assert np.max(np.abs(u.values)) < 1e-10
        assert all(np.isfinite(v) for v in report.objective_trace)


class TestRegisterSequence:
    def test_identical_frames_zero_increments(self):
        mesh = reg_mesh()
        frames = [REF_IMAGE, REF_IMAGE, REF_IMAGE]
        spec = RegularizerSpec(STRAIN, 24.8)
        result = register_sequence(frames, spec, mesh, init_policy="zero")
        assert len(result.increments) == 2
        for u in result.increments:
            np.testing.assert_allclose(u.values, 0.0, atol=1e-10)
        np.testing.assert_allclose(result.accumulated[-1].values, 0.0, atol=1e-10)
        assert all(r.converged for r in result.reports)

    def test_accumulation_identity(self):
        shift = np.array([0.02, 0.0])
        frames = [REF_IMAGE, shifted_image(shift), shifted_image(2 * shift)]
        mesh = reg_mesh()
        spec = RegularizerSpec(STRAIN, 24.8)
        cfg = BlockMatchConfig(window_axial=1.5, window_lateral=2.4,
                               search_radius=(8, 3))
        result = register_sequence(frames, spec, mesh, init_policy="auto",
                                   block_config=cfg)
        total = NodalField.zeros(mesh)
        for k, u in enumerate(result.increments):
            total = total + u
            np.testing.assert_array_equal(result.accumulated[k + 1].values,
                                          total.values)

    def test_too_few_frames(self):
        mesh = reg_mesh()
        with pytest.raises(InvalidArgumentError):
            register_sequence([REF_IMAGE], RegularizerSpec(STRAIN, 1.0), mesh)


class TestResultFiles:
    def test_dispfield_round_trip(self, tmp_path):
        mesh = reg_mesh()
        rng = np.random.default_rng(5)
        u = NodalField(mesh, rng.standard_normal((mesh.n_nodes, 2)))
        path = tmp_path / "u.dispfield"
        save_dispfield(u, path)
        back = load_dispfield(path, mesh)
        np.testing.assert_array_equal(back.values, u.values)

    def test_dispfield_mesh_mismatch(self, tmp_path):
        from elastoreg.errors import MeshIncompatibilityError

        mesh = reg_mesh()
        other = reg_mesh(3, 3)
        u = NodalField.zeros(mesh)
        path = tmp_path / "u.dispfield"
        save_dispfield(u, path)
        with pytest.raises(MeshIncompatibilityError):
            load_dispfield(path, other)

    def test_report_csv(self, tmp_path):
        mesh = reg_mesh()
        spec = RegularizerSpec(STRAIN, 24.8)
        _, report = register_pair(REF_IMAGE, REF_IMAGE, NodalField.zeros(mesh),
                                  spec, mesh)
        path = tmp_path / "report.csv"
        save_report_csv([report], path, regularizer="strain")
        lines = path.read_text().splitlines()
        assert lines[0] == "# report v1"
        assert lines[1].startswith("frame,regularizer,iteration")
        assert len(lines) == 2 + len(report.objective_trace)


class TestSolverErrorPaths:
    def test_regularization_too_weak_named_pivot(self):
        # Constant images carry no gradient information, so a pure strain
        # penalty leaves the translation modes unresolved.
        from elastoreg.errors import RegularizationTooWeakError

        flat = RfImage(np.full((64, 12), 3.0), 0.05, 0.3)
        mesh = build_structured_mesh(2.0, 2.0, 2, 2, origin=(0.3, 0.3))
        spec = RegularizerSpec(STRAIN, 1.0)
        with pytest.raises(RegularizationTooWeakError) as err:
            register_pair(flat, flat, NodalField.zeros(mesh), spec, mesh)
        assert err.value.smallest_pivot is not None

    def test_divergence_error_carries_iteration(self):
        from elastoreg.errors import DivergenceError

        mesh = reg_mesh()
        bad = NodalField(mesh, np.full((mesh.n_nodes, 2), np.nan))
        spec = RegularizerSpec(STRAIN, 24.8)
        with pytest.raises(DivergenceError) as err:
            register_pair(REF_IMAGE, REF_IMAGE, bad, spec, mesh)
        assert err.value.iteration == 1
