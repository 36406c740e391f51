"""Normalized cross-correlation block matching for the initial guess.

Windows from the reference frame are matched against a search region of
the target frame at integer-pixel shifts only. The per-window estimates
are median filtered and bilinearly interpolated onto the FE mesh, giving
the coarse field that seeds the registration solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import InvalidArgumentError
from .mesh import NodalField, QuadMesh
from .ussim import RfImage


@dataclass
class BlockMatchConfig:
    """Matching window geometry in mm plus search and filter settings.

    ``search_radius`` is (axial, lateral) in pixels; None picks 15% of the
    image extent per axis. Overlaps are fractions in [0, 1).
    """

    window_axial: float = 5.0
    window_lateral: float = 9.0
    overlap_axial: float = 0.25
    overlap_lateral: float = 0.40
    search_radius: tuple | None = None
    median_filter: tuple = (5, 5)

    def __post_init__(self):
        if self.window_axial <= 0 or self.window_lateral <= 0:
            raise InvalidArgumentError("window sizes must be positive")
        for ov in (self.overlap_axial, self.overlap_lateral):
            if not 0.0 <= ov < 1.0:
                raise InvalidArgumentError("overlaps must lie in [0, 1)")
        if self.median_filter[0] % 2 == 0 or self.median_filter[1] % 2 == 0:
            raise InvalidArgumentError("median filter size must be odd")


@dataclass
class CoarseDisplacementGrid:
    """Window-center positions and their displacement estimates in mm.

    ``axial_positions`` (na,), ``lateral_positions`` (nl,}; ``u`` is
    (na, nl, 2) and ``valid`` marks windows whose correlation was usable.
    Before filtering the estimates are integer multiples of the pixel
    spacings.
    """

    axial_positions: np.ndarray
    lateral_positions: np.ndarray
    u: np.ndarray
    valid: np.ndarray


def _window_starts(n: int, win: int, overlap: float) -> np.ndarray:
    stride = max(1, int(round(win * (1.0 - overlap))))
    starts = np.arange(0, n - win + 1, stride)
    if starts.size == 0:
        raise InvalidArgumentError("matching window does not fit inside the image")
    return starts


def ncc_match(i1: RfImage, i2: RfImage, cfg: BlockMatchConfig) -> CoarseDisplacementGrid:
    """Integer-pixel displacement per window by maximum zero-mean NCC.

    Ties at the maximum go to the smaller shift magnitude, then
    lexicographic (axial, lateral) order. Zero-variance windows are marked
    invalid for the median filter to in-fill.
    """
    if not i1.same_geometry(i2):
        raise InvalidArgumentError("images must share geometry")
    win_ax = max(2, int(round(cfg.window_axial / i1.axial_spacing)))
    win_lat = max(2, int(round(cfg.window_lateral / i1.lateral_spacing)))
    if win_ax > i1.n_axial or win_lat > i1.n_lateral:
        raise InvalidArgumentError("matching window larger than the image")
    if cfg.search_radius is None:
        rad = (max(1, int(math.ceil(0.15 * i1.n_axial))),
               max(1, int(math.ceil(0.15 * i1.n_lateral))))
    else:
        rad = (int(cfg.search_radius[0]), int(cfg.search_radius[1]))
    starts_ax = _window_starts(i1.n_axial, win_ax, cfg.overlap_axial)
    starts_lat = _window_starts(i1.n_lateral, win_lat, cfg.overlap_lateral)
    na, nl = starts_ax.size, starts_lat.size
    shifts = np.zeros((na, nl, 2))
    valid = np.zeros((na, nl), dtype=bool)
    a1, a2 = i1.samples, i2.samples
    for ia, sa in enumerate(starts_ax):
        for il, sl in enumerate(starts_lat):
            tpl = a1[sa : sa + win_ax, sl : sl + win_lat]
            tz = tpl - tpl.mean()
            t_energy = float(np.sum(tz * tz))
            if t_energy <= 0.0:
                continue
            r0 = max(0, sa - rad[0])
            r1 = min(i1.n_axial, sa + win_ax + rad[0])
            c0 = max(0, sl - rad[1])
            c1 = min(i1.n_lateral, sl + win_lat + rad[1])
            region = a2[r0:r1, c0:c1]
            num = fftconvolve(region, tz[::-1, ::-1], mode="valid")
            ones = np.ones(tz.shape)
            s1 = fftconvolve(region, ones, mode="valid")
            s2 = fftconvolve(region * region, ones, mode="valid")
            var = s2 - s1 * s1 / tz.size
            var[var < 0] = 0.0
            den = np.sqrt(var * t_energy)
            with np.errstate(divide="ignore", invalid="ignore"):
                ncc = np.where(den > 0, num / den, -np.inf)
            if not np.any(np.isfinite(ncc)):
                continue
            best = np.max(ncc)
            cand = np.argwhere(ncc == best)
            # Shift of candidate (p, q) relative to the template origin.
            cand_shifts = cand + np.array([r0 - sa, c0 - sl])
            order = np.lexsort(
                (
                    cand_shifts[:, 1],
                    cand_shifts[:, 0],
                    (cand_shifts**2).sum(axis=1),
                )
            )
            pick = cand_shifts[order[0]]
            shifts[ia, il, 0] = pick[0] * i1.axial_spacing
            shifts[ia, il, 1] = pick[1] * i1.lateral_spacing
            valid[ia, il] = True
    centers_ax = i1.origin[0] + (starts_ax + (win_ax - 1) / 2.0) * i1.axial_spacing
    centers_lat = i1.origin[1] + (starts_lat + (win_lat - 1) / 2.0) * i1.lateral_spacing
    return CoarseDisplacementGrid(centers_ax, centers_lat, shifts, valid)


def median_filter_grid(grid: CoarseDisplacementGrid, size=(5, 5)) -> CoarseDisplacementGrid:
    """Per-component windowed median with edge replication.

    Invalid entries are excluded from each neighborhood and replaced by the
    median of the valid ones (zero if an entire neighborhood is invalid).
    """
    if size[0] % 2 == 0 or size[1] % 2 == 0:
        raise InvalidArgumentError("median filter size must be odd")
    ra, rl = size[0] // 2, size[1] // 2
    u = np.pad(grid.u, ((ra, ra), (rl, rl), (0, 0)), mode="edge")
    v = np.pad(grid.valid, ((ra, ra), (rl, rl)), mode="edge")
    na, nl = grid.valid.shape
    out = np.zeros_like(grid.u)
    out_valid = np.zeros_like(grid.valid)
    for ia in range(na):
        for il in range(nl):
            patch_v = v[ia : ia + size[0], il : il + size[1]]
            if not np.any(patch_v):
                continue
            for c in range(2):
                patch = u[ia : ia + size[0], il : il + size[1], c]
                out[ia, il, c] = np.median(patch[patch_v])
            out_valid[ia, il] = True
    return CoarseDisplacementGrid(
        grid.axial_positions.copy(), grid.lateral_positions.copy(), out, out_valid
    )


def to_initial_guess(grid: CoarseDisplacementGrid, mesh: QuadMesh) -> NodalField:
    """Bilinear interpolation of the coarse grid at mesh node positions.

    Node coordinates outside the grid hull are clamped to it, so such
    nodes take the nearest grid-edge value.
    """
    if grid.u.size == 0:
        raise InvalidArgumentError("empty coarse displacement grid")
    ax, lat = grid.axial_positions, grid.lateral_positions
    pts = mesh.nodes.copy()
    pts[:, 0] = np.clip(pts[:, 0], ax[0], ax[-1])
    pts[:, 1] = np.clip(pts[:, 1], lat[0], lat[-1])
    values = np.empty((mesh.n_nodes, 2))
    for c in range(2):
        values[:, c] = _bilinear(ax, lat, grid.u[:, :, c], pts)
    return NodalField(mesh, values)


def _bilinear(xs, ys, z, pts):
    """Bilinear sample of z(xs, ys) at clamped points; handles singleton axes."""
    if xs.size == 1 and ys.size == 1:
        return np.full(pts.shape[0], z[0, 0])
    if xs.size == 1:
        return np.interp(pts[:, 1], ys, z[0, :])
    if ys.size == 1:
        return np.interp(pts[:, 0], xs, z[:, 0])
    ix = np.clip(np.searchsorted(xs, pts[:, 0]) - 1, 0, xs.size - 2)
    iy = np.clip(np.searchsorted(ys, pts[:, 1]) - 1, 0, ys.size - 2)
    tx = (pts[:, 0] - xs[ix]) / (xs[ix + 1] - xs[ix])
    ty = (pts[:, 1] - ys[iy]) / (ys[iy + 1] - ys[iy])
    return (
        z[ix, iy] * (1 - tx) * (1 - ty)
        + z[ix + 1, iy] * tx * (1 - ty)
        + z[ix, iy + 1] * (1 - tx) * ty
        + z[ix + 1, iy + 1] * tx * ty
    )


def save_coarse_grid_csv(grid: CoarseDisplacementGrid, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write("x_mm,y_mm,ux_mm,uy_mm,valid\n")
        for ia, x in enumerate(grid.axial_positions):
            for il, y in enumerate(grid.lateral_positions):
                ux, uy = grid.u[ia, il]
                f.write(
                    f"{x:.17g},{y:.17g},{ux:.17g},{uy:.17g},"
                    f"{int(grid.valid[ia, il])}\n"
                )
