"""Displacement/strain error norms, strain ratio, and elastographic CNR.

Strains live at element centers (piecewise constant per element), so the
strain norms reduce to area-weighted element sums; displacement norms use
3x3 Gauss quadrature of the nodal interpolant. All error metrics are
percentages of the truth-field norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.path import Path as MplPath

from .errors import InvalidArgumentError, UndefinedMetricError
from .forward import element_center_strains
from .mesh import GAUSS_3X3, NodalField, QuadMesh, shape_values, shape_derivs
from .ussim import Disk

DISP_COMPONENTS = ("x", "y", "total")
STRAIN_COMPONENTS = ("xx", "yy", "xy", "total")


@dataclass
class StrainField:
    """Symmetric strain (e_xx, e_yy, e_xy) at element centers."""

    mesh: QuadMesh
    values: np.ndarray  # (n_elements, 3)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(
            self.mesh.n_elements, 3
        )


@dataclass
class RoiMask:
    """Inclusion region B (per-element mask) and its complement A."""

    mesh: QuadMesh
    inclusion: np.ndarray  # bool (n_elements,), True inside B

    def __post_init__(self):
        self.inclusion = np.asarray(self.inclusion, dtype=bool).reshape(
            self.mesh.n_elements
        )
        if not self.inclusion.any() or self.inclusion.all():
            raise InvalidArgumentError(
                "ROI must leave both the inclusion and the background nonempty"
            )

    @classmethod
    def from_disk(cls, mesh: QuadMesh, disk: Disk) -> "RoiMask":
        return cls(mesh, disk.contains(mesh.element_centroids()))

    @classmethod
    def from_polygon(cls, mesh: QuadMesh, vertices) -> "RoiMask":
        path = MplPath(np.asarray(vertices, dtype=float))
        return cls(mesh, path.contains_points(mesh.element_centroids()))


def strain_from_displacement(u: NodalField) -> StrainField:
    """Element-center symmetric gradient of a nodal displacement field."""
    return StrainField(u.mesh, element_center_strains(u))


def _disp_norm_sq(u: NodalField, component: str) -> float:
    mesh = u.mesh
    coords = mesh.nodes[mesh.elements]
    d = shape_derivs(GAUSS_3X3.points)
    jac = np.einsum("qia,eib->eqab", d, coords)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    n = shape_values(GAUSS_3X3.points)  # (nq, 4)
    ue = u.values[mesh.elements]  # (ne, 4, 2)
    at_qp = np.einsum("qi,eic->eqc", n, ue)  # (ne, nq, 2)
    if component == "x":
        sq = at_qp[..., 0] ** 2
    elif component == "y":
        sq = at_qp[..., 1] ** 2
    elif component == "total":
        sq = at_qp[..., 0] ** 2 + at_qp[..., 1] ** 2
    else:
        raise InvalidArgumentError(f"unknown displacement component {component!r}")
    return float(np.einsum("eq,q,eq->", sq, GAUSS_3X3.weights, det))


def disp_error(u_true: NodalField, u_meas: NodalField, component: str = "total") -> float:
    """Percent L2 displacement error ||u_t - u_m|| / ||u_t|| * 100."""
    num = _disp_norm_sq(u_true - u_meas, component)
    den = _disp_norm_sq(u_true, component)
    if den <= 0.0:
        raise UndefinedMetricError(
            f"truth displacement has zero {component} norm"
        )
    return 100.0 * float(np.sqrt(num / den))


def _strain_norm_sq(eps: StrainField, component: str) -> float:
    areas = eps.mesh.element_areas()
    v = eps.values
    if component == "xx":
        sq = v[:, 0] ** 2
    elif component == "yy":
        sq = v[:, 1] ** 2
    elif component == "xy":
        sq = v[:, 2] ** 2
    elif component == "total":
        # Tensor double-dot: exx^2 + eyy^2 + 2 exy^2.
        sq = v[:, 0] ** 2 + v[:, 1] ** 2 + 2.0 * v[:, 2] ** 2
    else:
        raise InvalidArgumentError(f"unknown strain component {component!r}")
    return float(np.dot(areas, sq))


def strain_error(eps_true: StrainField, eps_meas: StrainField,
                 component: str = "total") -> float:
    """Percent L2 strain error with the double-dot norm for 'total'."""
    diff = StrainField(eps_true.mesh, eps_true.values - eps_meas.values)
    num = _strain_norm_sq(diff, component)
    den = _strain_norm_sq(eps_true, component)
    if den <= 0.0:
        raise UndefinedMetricError(f"truth strain has zero {component} norm")
    return 100.0 * float(np.sqrt(num / den))


def _region_stats(eps: StrainField, mask: np.ndarray):
    areas = eps.mesh.element_areas()[mask]
    exx = eps.values[mask, 0]
    total = areas.sum()
    mean = float(np.dot(areas, exx) / total)
    var = float(np.dot(areas, (exx - mean) ** 2) / total)
    return mean, var


def strain_ratio(eps: StrainField, roi: RoiMask) -> float:
    """Background-to-inclusion ratio of area-weighted mean axial strain."""
    mean_a, _ = _region_stats(eps, ~roi.inclusion)
    mean_b, _ = _region_stats(eps, roi.inclusion)
    if mean_b == 0.0:
        raise UndefinedMetricError("inclusion mean axial strain is zero")
    return mean_a / mean_b


def cnr_e(eps: StrainField, roi: RoiMask) -> float:
    """Elastographic contrast-to-noise 2*(mean_A - mean_B)^2 / (var_A + var_B).

    Returns +inf when both regional variances vanish (undefined contrast
    noise); callers should treat that as a flagged sentinel.
    """
    if roi.inclusion.sum() < 2 or (~roi.inclusion).sum() < 2:
        raise UndefinedMetricError("CNR needs at least two elements per region")
    mean_a, var_a = _region_stats(eps, ~roi.inclusion)
    mean_b, var_b = _region_stats(eps, roi.inclusion)
    den = var_a + var_b
    # Regional variances at roundoff level count as zero contrast noise.
    scale = max(abs(mean_a), abs(mean_b), 1e-300)
    if den <= (1e-12 * scale) ** 2:
        return float("inf")
    return 2.0 * (mean_a - mean_b) ** 2 / den


def restrict_to_mesh(field: NodalField, mesh: QuadMesh) -> NodalField:
    """Truth fields on another mesh, interpolated at this mesh's nodes."""
    from .mesh import interpolate_field_nearest

    return NodalField(mesh, interpolate_field_nearest(field, mesh.nodes))


def metric_table(u_true: NodalField, u_meas: NodalField, roi: RoiMask | None):
    """All error and contrast metrics for one field pair, as a dict."""
    eps_t = strain_from_displacement(u_true)
    eps_m = strain_from_displacement(u_meas)
    out = {}
    for comp in DISP_COMPONENTS:
        key = "disp_error_" + comp
        try:
            out[key] = disp_error(u_true, u_meas, comp)
        except UndefinedMetricError:
            out[key] = float("nan")
    for comp in STRAIN_COMPONENTS:
        key = "strain_error_" + comp
        try:
            out[key] = strain_error(eps_t, eps_m, comp)
        except UndefinedMetricError:
            out[key] = float("nan")
    if roi is not None:
        try:
            out["strain_ratio"] = strain_ratio(eps_m, roi)
        except UndefinedMetricError:
            out["strain_ratio"] = float("nan")
        out["cnr_e"] = cnr_e(eps_m, roi)
    return out
