"""Gauss-Newton image registration on the FE mesh.

The image-mismatch energy is integrated by the midpoint rule at the pixel
centers that fall inside the mesh. The moving image is sampled at warped
positions with Keys cubic convolution (a = -0.5, the kernel pinned for
reproducibility); samples landing outside the image read as zero. First
and second derivatives freeze the image gradient at the fixed frame, so
the Gauss-Newton system matrix is assembled once per pair and stays
positive semidefinite.

Multi-frame sequences are registered incrementally: increment k matches
frame k to frame k+1 with the accumulated field S_k warping both, and all
results live in the common frame-0 coordinates with S_{k+1} = S_k + u_k
held exactly at the nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .blockmatch import BlockMatchConfig, median_filter_grid, ncc_match, to_initial_guess
from .errors import (
    DivergenceError,
    InvalidArgumentError,
    RegularizationTooWeakError,
)
from .mesh import NodalField, QuadMesh, mesh_hash, shape_values
from .regularizers import RegularizerEvaluator, RegularizerSpec
from .ussim import RfImage

KEYS_A = -0.5  # cubic convolution kernel parameter


def _keys_weights(t: np.ndarray) -> np.ndarray:
    """Keys cubic-convolution weights for fractional offsets t in [0, 1).

    Returns (n, 4) weights for the samples at integer offsets -1..2.
    """
    a = KEYS_A
    s = np.empty((t.size, 4))
    for k, off in enumerate((-1.0, 0.0, 1.0, 2.0)):
        x = np.abs(t - off)
        w = np.zeros_like(x)
        near = x <= 1.0
        far = (x > 1.0) & (x < 2.0)
        w[near] = (a + 2.0) * x[near] ** 3 - (a + 3.0) * x[near] ** 2 + 1.0
        w[far] = a * (x[far] ** 3 - 5.0 * x[far] ** 2 + 8.0 * x[far] - 4.0)
        s[:, k] = w
    return s


def cubic_sample(image: RfImage, points) -> np.ndarray:
    """Sample an image at physical points with Keys cubic interpolation.

    Points outside the sampled hull give 0; interior points near the
    border use zero-padded samples.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fx = (points[:, 0] - image.origin[0]) / image.axial_spacing
    fy = (points[:, 1] - image.origin[1]) / image.lateral_spacing
    inside = (
        (fx >= 0.0)
        & (fx <= image.n_axial - 1)
        & (fy >= 0.0)
        & (fy <= image.n_lateral - 1)
    )
    out = np.zeros(points.shape[0])
    if not np.any(inside):
        return out
    fx, fy = fx[inside], fy[inside]
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    tx = fx - i0
    ty = fy - j0
    # Snap queries within 1e-9 samples of a grid node to the exact sample,
    # so grid-aligned warps reproduce the stored values bit for bit.
    for t, idx in ((tx, i0), (ty, j0)):
        hi = t > 1.0 - 1e-9
        idx[hi] += 1
        t[hi] = 0.0
        t[t < 1e-9] = 0.0
    wx = _keys_weights(tx)  # (m, 4)
    wy = _keys_weights(ty)
    padded = np.pad(image.samples, 2, mode="constant")
    rows = i0[:, None] + np.arange(-1, 3)[None, :] + 2  # (m, 4) into padded
    cols = j0[:, None] + np.arange(-1, 3)[None, :] + 2
    block = padded[rows[:, :, None], cols[:, None, :]]  # (m, 4, 4)
    out[inside] = np.einsum("mi,mij,mj->m", wx, block, wy)
    return out


def image_gradients(image: RfImage):
    """(d/d axial, d/d lateral) arrays by centered differences."""
    gx, gy = np.gradient(image.samples, image.axial_spacing, image.lateral_spacing)
    return gx, gy


@dataclass
class MatchEval:
    value: float
    gradient: np.ndarray
    gn_hessian: sp.csr_matrix


@dataclass
class SolveReport:
    iterations: int
    final_step_ratio: float
    objective_trace: list
    converged: bool
    objective_increased: bool = False


@dataclass
class SequenceResult:
    """Incremental fields u_k and accumulated fields S_k (S_0 = 0), all on
    the shared reference mesh, with one solver report per increment."""

    increments: list
    accumulated: list
    reports: list


class ImageMatcher:
    """Precomputed image-match evaluator for one frame pair on one mesh.

    ``base_warp`` is the accumulated field S applied to both frames in
    the multi-frame energy; None means the plain two-frame case.
    """

    def __init__(self, i1: RfImage, i2: RfImage, mesh: QuadMesh,
                 base_warp: NodalField | None = None):
        if not i1.same_geometry(i2):
            raise InvalidArgumentError("images must share geometry")
        lo, hi = mesh.bbox()
        img_lo = np.array(i1.origin)
        img_hi = img_lo + [
            (i1.n_axial - 1) * i1.axial_spacing,
            (i1.n_lateral - 1) * i1.lateral_spacing,
        ]
        if np.any(lo < img_lo - 1e-9) or np.any(hi > img_hi + 1e-9):
            raise InvalidArgumentError("mesh extends outside the image")
        self.mesh = mesh
        self.i2 = i2
        self.pixel_area = i1.axial_spacing * i1.lateral_spacing

        xs = i1.axial_positions()
        ys = i1.lateral_positions()
        pix = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        # Pixel location depends only on (mesh, grid); cache it on the mesh
        # so sequences and weight sweeps pay for it once.
        cache = getattr(mesh, "_pixel_locate_cache", None)
        if cache is None:
            cache = {}
            mesh._pixel_locate_cache = cache
        key = (i1.n_axial, i1.n_lateral, i1.axial_spacing, i1.lateral_spacing,
               tuple(i1.origin))
        if key in cache:
            elems, locs = cache[key]
        else:
            elems, locs = mesh.locate_points(pix)
            cache[key] = (elems, locs)
        keep = elems >= 0
        self.points = pix[keep]
        n_pix = self.points.shape[0]

        # Sparse shape-value matrix: u at pixels = P @ nodal component.
        nvals = shape_values(locs[keep])  # (n_pix, 4)
        conn = mesh.elements[elems[keep]]  # (n_pix, 4)
        rows = np.repeat(np.arange(n_pix), 4)
        self._p = sp.coo_matrix(
            (nvals.ravel(), (rows, conn.ravel())), shape=(n_pix, mesh.n_nodes)
        ).tocsr()

        if base_warp is None:
            self._s_pix = np.zeros((n_pix, 2))
            ref_grid = i1.samples
            self.i1_at_pixels = i1.samples.reshape(-1)[keep]
        else:
            from .mesh import interpolate_field_nearest

            # Warp the reference frame on the full grid so that its image
            # gradients can still be taken by grid differences.
            s_full = interpolate_field_nearest(base_warp, pix)
            warped = cubic_sample(i1, pix + s_full).reshape(len(xs), len(ys))
            ref_grid = warped
            self.i1_at_pixels = warped.reshape(-1)[keep]
            self._s_pix = s_full[keep]
        ref_img = RfImage(ref_grid, i1.axial_spacing, i1.lateral_spacing,
                          tuple(i1.origin))
        gx, gy = image_gradients(ref_img)
        g = np.stack([gx.reshape(-1)[keep], gy.reshape(-1)[keep]], axis=1)

        # M maps interleaved dofs to the pixelwise gradient-projected field.
        px = self._p.multiply(g[:, 0:1]).tocoo()
        py = self._p.multiply(g[:, 1:2]).tocoo()
        m = sp.coo_matrix(
            (
                np.concatenate([px.data, py.data]),
                (
                    np.concatenate([px.row, py.row]),
                    np.concatenate([2 * px.col, 2 * py.col + 1]),
                ),
            ),
            shape=(n_pix, mesh.n_dofs),
        ).tocsr()
        self._m = m
        self._hessian = (self.pixel_area * (m.T @ m)).tocsr()

    @property
    def n_pixels(self) -> int:
        return self.points.shape[0]

    def residual(self, u: NodalField) -> np.ndarray:
        up = np.stack([self._p @ u.values[:, 0], self._p @ u.values[:, 1]], axis=1)
        warped = cubic_sample(self.i2, self.points + self._s_pix + up)
        return warped - self.i1_at_pixels

    def evaluate(self, u: NodalField) -> MatchEval:
        r = self.residual(u)
        value = 0.5 * self.pixel_area * float(r @ r)
        grad = self.pixel_area * (self._m.T @ r)
        return MatchEval(value, grad, self._hessian)


def eval_match(i1: RfImage, i2: RfImage, u: NodalField) -> MatchEval:
    """One-shot image-match evaluation (builds the matcher internally)."""
    return ImageMatcher(i1, i2, u.mesh).evaluate(u)


def _solve_newton_system(h: sp.spmatrix, g: np.ndarray) -> np.ndarray:
    hc = h.tocsc()
    try:
        lu = spla.splu(hc)
    except RuntimeError as exc:
        raise RegularizationTooWeakError(
            f"Gauss-Newton system is singular: {exc}", smallest_pivot=0.0
        ) from exc
    pivots = np.abs(lu.U.diagonal())
    smallest = float(pivots.min()) if pivots.size else 0.0
    scale = float(pivots.max()) if pivots.size else 0.0
    if smallest <= 1e-14 * max(scale, 1.0):
        raise RegularizationTooWeakError(
            f"Gauss-Newton system nearly singular (smallest pivot {smallest:.3e})",
            smallest_pivot=smallest,
        )
    return lu.solve(-g)


def register_pair(i1: RfImage, i2: RfImage, init: NodalField,
                  reg: RegularizerSpec, mesh: QuadMesh | None = None, *,
                  base_warp: NodalField | None = None,
                  max_iterations: int = 20, step_tol: float = 1e-3,
                  matcher: ImageMatcher | None = None,
                  reg_eval: RegularizerEvaluator | None = None):
    """Minimize match + regularizer by full-step Gauss-Newton.

    Stops after ``max_iterations`` or when ||du|| / ||u|| drops below
    ``step_tol``. Returns the final field and a SolveReport whose trace
    holds the objective at the initial guess and after every update.
    """
    mesh = mesh if mesh is not None else init.mesh
    if matcher is None:
        matcher = ImageMatcher(i1, i2, mesh, base_warp=base_warp)
    if reg_eval is None:
        reg_eval = RegularizerEvaluator(reg, mesh)
    u = init.copy()
    trace = []
    ratio = np.inf
    iterations = 0
    converged = False
    for j in range(1, max_iterations + 1):
        m = matcher.evaluate(u)
        r = reg_eval.evaluate(u)
        objective = m.value + r.value
        if not np.isfinite(objective):
            raise DivergenceError(
                f"objective became non-finite at iteration {j}", iteration=j
            )
        trace.append(objective)
        du = _solve_newton_system(m.gn_hessian + r.gn_hessian, m.gradient + r.gradient)
        norm_u = float(np.linalg.norm(u.dofs))
        norm_du = float(np.linalg.norm(du))
        if norm_du == 0.0:
            ratio = 0.0
        elif norm_u == 0.0:
            ratio = np.inf
        else:
            ratio = norm_du / norm_u
        u = NodalField.from_dofs(mesh, u.dofs + du)
        iterations = j
        if ratio < step_tol:
            converged = True
            break
    final = matcher.evaluate(u).value + reg_eval.evaluate(u).value
    if not np.isfinite(final):
        raise DivergenceError(
            f"objective became non-finite at iteration {iterations}",
            iteration=iterations,
        )
    trace.append(final)
    increased = any(b > a for a, b in zip(trace, trace[1:]))
    report = SolveReport(
        iterations=iterations,
        final_step_ratio=float(ratio),
        objective_trace=trace,
        converged=converged,
        objective_increased=increased,
    )
    return u, report


INIT_POLICIES = ("auto", "zero", "block_match", "previous_increment")


def register_sequence(frames, reg: RegularizerSpec, mesh: QuadMesh,
                      init_policy: str = "auto",
                      block_config: BlockMatchConfig | None = None,
                      max_iterations: int = 20, step_tol: float = 1e-3) -> SequenceResult:
    """Register consecutive frame pairs and accumulate the increments.

    ``init_policy``: "zero", "block_match" (every increment),
    "previous_increment", or "auto" (block matching for the first
    increment, previous increment afterward).
    """
    if len(frames) < 2:
        raise InvalidArgumentError("need at least two frames")
    if init_policy not in INIT_POLICIES:
        raise InvalidArgumentError(f"unknown init policy {init_policy!r}")
    reg_eval = RegularizerEvaluator(reg, mesh)
    increments, reports = [], []
    accumulated = [NodalField.zeros(mesh)]
    prev = None
    for k in range(len(frames) - 1):
        s_k = accumulated[k]
        base = s_k if k > 0 else None
        if init_policy == "zero":
            init = NodalField.zeros(mesh)
        elif init_policy == "block_match" or (init_policy == "auto" and k == 0):
            init = block_match_initial(frames[k], frames[k + 1], mesh, block_config)
        elif init_policy == "previous_increment" and prev is None:
            init = NodalField.zeros(mesh)
        else:
            init = prev.copy()
        u, report = register_pair(
            frames[k], frames[k + 1], init, reg, mesh, base_warp=base,
            max_iterations=max_iterations, step_tol=step_tol, reg_eval=reg_eval,
        )
        increments.append(u)
        reports.append(report)
        accumulated.append(s_k + u)
        prev = u
    return SequenceResult(increments, accumulated, reports)


def block_match_initial(i1: RfImage, i2: RfImage, mesh: QuadMesh,
                        config: BlockMatchConfig | None = None) -> NodalField:
    """Median-filtered NCC block matching interpolated onto the mesh."""
    cfg = config if config is not None else BlockMatchConfig()
    grid = ncc_match(i1, i2, cfg)
    grid = median_filter_grid(grid, cfg.median_filter)
    return to_initial_guess(grid, mesh)


# -- result files -------------------------------------------------------------


def save_dispfield(u: NodalField, path) -> None:
    """Write the ``dispfield v1`` binary: mesh hash then the nodal array."""
    h = mesh_hash(u.mesh)
    header = f"dispfield v1\n{h}\n{u.mesh.n_nodes}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes())


def load_dispfield(path, mesh: QuadMesh) -> NodalField:
    from .errors import MeshIncompatibilityError

    with open(path, "rb") as f:
        if f.readline().decode("ascii").strip() != "dispfield v1":
            raise InvalidArgumentError(f"{path}: not a dispfield v1 file")
        h = f.readline().decode("ascii").strip()
        if h != mesh_hash(mesh):
            raise MeshIncompatibilityError(
                f"{path}: mesh hash {h[:12]}... does not match the given mesh"
            )
        n_nodes = int(f.readline())
        data = np.frombuffer(f.read(16 * n_nodes), dtype="<f8")
    return NodalField(mesh, data.reshape(n_nodes, 2).copy())


def save_report_csv(reports, path, regularizer: str = "") -> None:
    """``report v1`` CSV of objective traces, one row per iteration."""
    with open(path, "w", encoding="ascii") as f:
        f.write("# report v1\n")
        f.write("frame,regularizer,iteration,objective,converged,final_step_ratio\n")
        for k, rep in enumerate(reports):
            for j, val in enumerate(rep.objective_trace):
                f.write(
                    f"{k},{regularizer},{j},{val:.17g},"
                    f"{int(rep.converged)},{rep.final_step_ratio:.17g}\n"
                )
