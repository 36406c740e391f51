"""Plotting-free raster exports: portable graymaps and delimited dumps."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .mesh import NodalField, interpolate_field
from .metrics import StrainField


def save_pgm(array, path, maxval: int = 65535) -> None:
    """Binary 16-bit PGM of a 2D array, min/max normalized."""
    a = np.asarray(array, dtype=float)
    if a.ndim != 2:
        raise InvalidArgumentError("PGM export needs a 2D array")
    lo, hi = np.nanmin(a), np.nanmax(a)
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((a - lo) / span * maxval).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(scaled.tobytes())


def save_matrix_csv(array, path) -> None:
    a = np.asarray(array, dtype=float)
    with open(path, "w", encoding="ascii") as f:
        for row in np.atleast_2d(a):
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def rasterize_nodal(field: NodalField, component: int, n_axial: int = 200,
                    n_lateral: int = 200) -> np.ndarray:
    """Sample one displacement component on a regular grid over the mesh
    bounding box (NaN outside the mesh)."""
    lo, hi = field.mesh.bbox()
    xs = np.linspace(lo[0], hi[0], n_axial)
    ys = np.linspace(lo[1], hi[1], n_lateral)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    vals = interpolate_field(field, pts, outside_value=(np.nan, np.nan))
    return vals[:, component].reshape(n_axial, n_lateral)


def rasterize_strain(eps: StrainField, component: int, n_axial: int = 200,
                     n_lateral: int = 200) -> np.ndarray:
    """Per-element strain painted onto a regular grid (NaN outside)."""
    mesh = eps.mesh
    lo, hi = mesh.bbox()
    xs = np.linspace(lo[0], hi[0], n_axial)
    ys = np.linspace(lo[1], hi[1], n_lateral)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    elems, _ = mesh.locate_points(pts)
    out = np.full(pts.shape[0], np.nan)
    inside = elems >= 0
    out[inside] = eps.values[elems[inside], component]
    return out.reshape(n_axial, n_lateral)


def export_field_rasters(field: NodalField, out_dir, stem: str,
                         n_axial: int = 200, n_lateral: int = 200) -> None:
    """PGM + CSV rasters of both displacement components and the strain
    components derived from the field."""
    from pathlib import Path

    from .metrics import strain_from_displacement

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for comp, name in ((0, "ux"), (1, "uy")):
        arr = rasterize_nodal(field, comp, n_axial, n_lateral)
        filled = np.where(np.isnan(arr), np.nanmin(arr), arr)
        save_pgm(filled, out / f"{stem}_{name}.pgm")
        save_matrix_csv(arr, out / f"{stem}_{name}.csv")
    eps = strain_from_displacement(field)
    for comp, name in ((0, "exx"), (1, "eyy"), (2, "exy")):
        arr = rasterize_strain(eps, comp, n_axial, n_lateral)
        filled = np.where(np.isnan(arr), np.nanmin(arr), arr)
        save_pgm(filled, out / f"{stem}_{name}.pgm")
        save_matrix_csv(arr, out / f"{stem}_{name}.csv")
