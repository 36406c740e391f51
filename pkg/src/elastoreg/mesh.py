"""Bilinear quadrilateral FE meshes, quadrature, and field interpolation.

Conventions fixed repo-wide
---------------------------
* Coordinates are (x, y) in mm with x the axial direction (along the
  ultrasound beam, increasing with depth) and y the lateral direction.
* Element connectivity is counter-clockwise in the (x, y) plane.
* Nodal vector fields are flattened interleaved: entry ``2*n`` is the x
  component at node ``n`` and ``2*n + 1`` the y component, giving an array
  of length ``2 * n_nodes``.
* Interior edge normals point from the lower-index ("left") adjacent
  element toward the higher-index ("right") one; jump quantities follow
  the same right-minus-left sign.

Meshes are immutable after construction and safe to share between
threads; all interpolation routines are pure functions of their inputs.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.spatial import cKDTree

from .errors import InvalidArgumentError, SingularElementError

# Reference square corners in connectivity order.
_REF_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

# Local edges of the reference element as (corner, corner) index pairs.
_LOCAL_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss rule on the reference square [-1, 1]^2."""

    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)

    @classmethod
    def gauss(cls, n: int) -> "QuadratureRule":
        x, w = leggauss(n)
        pts = np.array([(xi, yj) for yj in x for xi in x])
        wts = np.array([wi * wj for wj in w for wi in w])
        return cls(points=pts, weights=wts)


GAUSS_3X3 = QuadratureRule.gauss(3)
GAUSS_2X2 = QuadratureRule.gauss(2)
CENTER_RULE = QuadratureRule(points=np.zeros((1, 2)), weights=np.array([4.0]))


def shape_values(local) -> np.ndarray:
    """Bilinear shape functions N_a at reference points.

    ``local`` is (2,) or (m, 2); returns (4,) or (m, 4).
    """
    local = np.asarray(local, dtype=float)
    single = local.ndim == 1
    pts = np.atleast_2d(local)
    xi, eta = pts[:, 0], pts[:, 1]
    n = 0.25 * np.stack(
        [
            (1 - xi) * (1 - eta),
            (1 + xi) * (1 - eta),
            (1 + xi) * (1 + eta),
            (1 - xi) * (1 + eta),
        ],
        axis=1,
    )
    return n[0] if single else n


def shape_derivs(local) -> np.ndarray:
    """Reference-coordinate derivatives dN_a/d(xi, eta); (4, 2) or (m, 4, 2)."""
    local = np.asarray(local, dtype=float)
    single = local.ndim == 1
    pts = np.atleast_2d(local)
    xi, eta = pts[:, 0], pts[:, 1]
    d = np.empty((pts.shape[0], 4, 2))
    d[:, 0, 0] = -(1 - eta)
    d[:, 1, 0] = (1 - eta)
    d[:, 2, 0] = (1 + eta)
    d[:, 3, 0] = -(1 + eta)
    d[:, 0, 1] = -(1 - xi)
    d[:, 1, 1] = -(1 + xi)
    d[:, 2, 1] = (1 + xi)
    d[:, 3, 1] = (1 - xi)
    d *= 0.25
    return d[0] if single else d


class QuadMesh:
    """4-node quadrilateral mesh with interior-edge topology.

    Parameters
    ----------
    nodes : (n_nodes, 2) array
        Node coordinates in mm.
    elements : (n_elements, 4) int array
        Counter-clockwise node indices per element.
    """

    def __init__(self, nodes, elements):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise InvalidArgumentError("nodes must be (n, 2)")
        if self.elements.ndim != 2 or self.elements.shape[1] != 4:
            raise InvalidArgumentError("elements must be (m, 4)")
        self._check_jacobians()
        self._build_edges()
        self._locator = None
        self._node_tree = None

    # -- basic properties -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_interior_edges(self) -> int:
        return self.edge_nodes.shape[0]

    def element_coords(self, elem: int) -> np.ndarray:
        return self.nodes[self.elements[elem]]

    def bbox(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    # -- construction checks ----------------------------------------------

    def _check_jacobians(self):
        coords = self.nodes[self.elements]  # (ne, 4, 2)
        d = shape_derivs(GAUSS_3X3.points)  # (9, 4, 2)
        # J[e, q, a, b] = sum_i d[q, i, a] * coords[e, i, b]
        jac = np.einsum("qia,eib->eqab", d, coords)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        if np.any(det <= 0):
            bad = int(np.argwhere(np.any(det <= 0, axis=1))[0, 0])
            raise SingularElementError(
                f"element {bad} has non-positive Jacobian determinant"
            )

    def _build_edges(self):
        seen = {}
        for e, conn in enumerate(self.elements):
            for a, b in _LOCAL_EDGES:
                key = (min(conn[a], conn[b]), max(conn[a], conn[b]))
                seen.setdefault(key, []).append(e)
        nodes_list, left_list, right_list = [], [], []
        for key in sorted(seen):
            elems = seen[key]
            if len(elems) > 2:
                raise InvalidArgumentError(
                    f"edge {key} shared by more than two elements"
                )
            if len(elems) == 2:
                lo, hi = min(elems), max(elems)
                nodes_list.append(key)
                left_list.append(lo)
                right_list.append(hi)
        self.edge_nodes = np.array(nodes_list, dtype=np.int64).reshape(-1, 2)
        self.edge_left = np.array(left_list, dtype=np.int64)
        self.edge_right = np.array(right_list, dtype=np.int64)
        if self.n_interior_edges:
            p0 = self.nodes[self.edge_nodes[:, 0]]
            p1 = self.nodes[self.edge_nodes[:, 1]]
            tang = p1 - p0
            self.edge_lengths = np.linalg.norm(tang, axis=1)
            normals = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
            normals /= self.edge_lengths[:, None]
            # Orient from left (lower-index) element toward right element.
            cl = self.nodes[self.elements[self.edge_left]].mean(axis=1)
            cr = self.nodes[self.elements[self.edge_right]].mean(axis=1)
            flip = np.einsum("ij,ij->i", normals, cr - cl) < 0
            normals[flip] *= -1
            self.edge_normals = normals
        else:
            self.edge_lengths = np.zeros(0)
            self.edge_normals = np.zeros((0, 2))

    # -- element-level geometry ---------------------------------------------

    def jacobian(self, elem: int, local) -> np.ndarray:
        coords = self.element_coords(elem)
        d = shape_derivs(local)
        return d.T @ coords  # (2, 2) with J[a, b] = d x_b / d xi_a

    def shape_gradients(self, elem: int, local) -> np.ndarray:
        """Physical gradients dN_a/d(x, y) at a reference point; (4, 2)."""
        coords = self.element_coords(elem)
        d = shape_derivs(local)  # (4, 2) dN/d(xi, eta)
        jac = np.einsum("ia,ib->ab", d, coords)  # J[a, b] = dx_b/dxi_a
        det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        if abs(det) < 1e-14:
            raise SingularElementError(
                f"degenerate Jacobian in element {elem} at local {tuple(local)}"
            )
        inv = np.array([[jac[1, 1], -jac[0, 1]], [-jac[1, 0], jac[0, 0]]]) / det
        # dN/dx_b = dN/dxi_a * dxi_a/dx_b, with dxi/dx = inv(J)^T in this layout.
        return d @ inv.T

    def jacobian_det(self, elem: int, local) -> float:
        coords = self.element_coords(elem)
        d = shape_derivs(local)
        jac = np.einsum("ia,ib->ab", d, coords)
        return float(jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0])

    def forward_map(self, elem: int, local) -> np.ndarray:
        return shape_values(local) @ self.element_coords(elem)

    def element_areas(self, rule: QuadratureRule = GAUSS_3X3) -> np.ndarray:
        coords = self.nodes[self.elements]
        d = shape_derivs(rule.points)
        jac = np.einsum("qia,eib->eqab", d, coords)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        return det @ rule.weights

    def element_centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    # -- point location -----------------------------------------------------

    def _build_locator(self):
        lo, hi = self.bbox()
        span = np.maximum(hi - lo, 1e-12)
        nbin = max(1, int(np.sqrt(self.n_elements)))
        shape = (nbin, nbin)
        coords = self.nodes[self.elements]
        emin = coords.min(axis=1)
        emax = coords.max(axis=1)
        bins = [[[] for _ in range(shape[1])] for _ in range(shape[0])]
        i0 = np.clip(((emin[:, 0] - lo[0]) / span[0] * shape[0]).astype(int), 0, shape[0] - 1)
        i1 = np.clip(((emax[:, 0] - lo[0]) / span[0] * shape[0]).astype(int), 0, shape[0] - 1)
        j0 = np.clip(((emin[:, 1] - lo[1]) / span[1] * shape[1]).astype(int), 0, shape[1] - 1)
        j1 = np.clip(((emax[:, 1] - lo[1]) / span[1] * shape[1]).astype(int), 0, shape[1] - 1)
        for e in range(self.n_elements):
            for bi in range(i0[e], i1[e] + 1):
                for bj in range(j0[e], j1[e] + 1):
                    bins[bi][bj].append(e)
        self._locator = (lo, span, shape, [[np.array(c, dtype=np.int64) for c in row] for row in bins])

    def _candidates(self, points: np.ndarray):
        if self._locator is None:
            self._build_locator()
        lo, span, shape, bins = self._locator
        bi = np.clip(((points[:, 0] - lo[0]) / span[0] * shape[0]).astype(int), 0, shape[0] - 1)
        bj = np.clip(((points[:, 1] - lo[1]) / span[1] * shape[1]).astype(int), 0, shape[1] - 1)
        return [bins[i][j] for i, j in zip(bi, bj)]

    def locate_points(self, points, tol=1e-10, max_iter=50):
        """Find containing elements and reference coordinates for points.

        Returns ``(elems, locals)`` where ``elems`` is int (-1 for points
        outside every element) and ``locals`` the reference coordinates.
        Points on shared edges resolve to the lowest-index containing
        element.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        elems = np.full(n, -1, dtype=np.int64)
        locs = np.zeros((n, 2))
        cands = self._candidates(points)
        max_rounds = max((len(c) for c in cands), default=0)
        unresolved = np.arange(n)
        for r in range(max_rounds):
            trial_pts, trial_idx, trial_elem = [], [], []
            for k in unresolved:
                if r < len(cands[k]):
                    trial_idx.append(k)
                    trial_elem.append(cands[k][r])
                    trial_pts.append(points[k])
            if not trial_idx:
                break
            idx = np.array(trial_idx)
            tel = np.array(trial_elem)
            tp = np.array(trial_pts)
            ok, loc = self._newton_batch(tel, tp, tol, max_iter)
            elems[idx[ok]] = tel[ok]
            locs[idx[ok]] = loc[ok]
            unresolved = np.array([k for k in unresolved if elems[k] < 0], dtype=np.int64)
            if unresolved.size == 0:
                break
        return elems, locs

    def _newton_batch(self, elem_idx, points, tol, max_iter):
        coords = self.nodes[self.elements[elem_idx]]  # (m, 4, 2)
        m = points.shape[0]
        xi = np.zeros((m, 2))
        active = np.arange(m)
        for _ in range(max_iter):
            xa = xi[active]
            ca = coords[active]
            nvals = shape_values(xa)  # (k, 4)
            res = np.einsum("mi,mib->mb", nvals, ca) - points[active]
            hot = np.any(np.abs(res) >= tol, axis=1)
            if not np.any(hot):
                break
            active = active[hot]
            xa, ca, res = xa[hot], ca[hot], res[hot]
            d = shape_derivs(xa)  # (k, 4, 2)
            jac = np.einsum("mia,mib->mab", d, ca)  # dx_b/dxi_a
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            # Solve J^T dxi = res for the update (res_b = dx_b/dxi_a dxi_a).
            dxi = np.empty_like(xa)
            dxi[:, 0] = (jac[:, 1, 1] * res[:, 0] - jac[:, 1, 0] * res[:, 1]) / det
            dxi[:, 1] = (-jac[:, 0, 1] * res[:, 0] + jac[:, 0, 0] * res[:, 1]) / det
            xi[active] = np.clip(xa - dxi, -1.5, 1.5)  # bound wandering iterates
        nvals = shape_values(xi)
        res = np.einsum("mi,mib->mb", nvals, coords) - points
        inside = np.all(np.abs(xi) <= 1 + 1e-8, axis=1)
        converged = np.all(np.abs(res) <= max(tol, 1e-10), axis=1)
        return inside & converged, xi

    def inverse_map(self, point, tol=1e-10):
        """Map a physical point to ``(elem, local)``; None when outside."""
        elems, locs = self.locate_points(np.asarray(point, dtype=float)[None, :], tol=tol)
        if elems[0] < 0:
            return None
        return int(elems[0]), locs[0]

    def node_tree(self) -> cKDTree:
        if self._node_tree is None:
            self._node_tree = cKDTree(self.nodes)
        return self._node_tree


def build_structured_mesh(width, height, nx, ny, origin=(0.0, 0.0)) -> QuadMesh:
    """Structured quadrilateral mesh of ``nx`` by ``ny`` elements.

    ``width`` spans x (axial) and ``height`` spans y (lateral); ``origin``
    places the (0, 0) corner. Node ``i + j*(nx+1)`` sits at
    ``origin + (i*width/nx, j*height/ny)``; element ``i + j*nx`` has the
    counter-clockwise corner nodes of cell (i, j).
    """
    if width <= 0 or height <= 0:
        raise InvalidArgumentError("mesh dimensions must be positive")
    if nx < 1 or ny < 1:
        raise InvalidArgumentError("element counts must be at least 1")
    xs = origin[0] + np.linspace(0.0, width, nx + 1)
    ys = origin[1] + np.linspace(0.0, height, ny + 1)
    nodes = np.array([(x, y) for y in ys for x in xs])
    elements = []
    for j in range(ny):
        for i in range(nx):
            n00 = i + j * (nx + 1)
            elements.append([n00, n00 + 1, n00 + nx + 2, n00 + nx + 1])
    return QuadMesh(nodes, np.array(elements))


class NodalField:
    """2-vector field on mesh nodes (displacements, increments, sums).

    ``values`` is (n_nodes, 2); ``dofs`` is the interleaved flat view of
    length ``2 * n_nodes`` (x then y per node).
    """

    def __init__(self, mesh: QuadMesh, values=None):
        self.mesh = mesh
        if values is None:
            self.values = np.zeros((mesh.n_nodes, 2))
        else:
            self.values = np.array(values, dtype=float).reshape(mesh.n_nodes, 2)

    @classmethod
    def zeros(cls, mesh: QuadMesh) -> "NodalField":
        return cls(mesh)

    @classmethod
    def from_dofs(cls, mesh: QuadMesh, dofs) -> "NodalField":
        return cls(mesh, np.asarray(dofs, dtype=float).reshape(mesh.n_nodes, 2))

    @property
    def dofs(self) -> np.ndarray:
        return self.values.reshape(-1)

    def copy(self) -> "NodalField":
        return NodalField(self.mesh, self.values.copy())

    def scaled(self, c: float) -> "NodalField":
        return NodalField(self.mesh, c * self.values)

    def __add__(self, other: "NodalField") -> "NodalField":
        return NodalField(self.mesh, self.values + other.values)

    def __sub__(self, other: "NodalField") -> "NodalField":
        return NodalField(self.mesh, self.values - other.values)


def interpolate_field(field: NodalField, points, outside_value=(0.0, 0.0)) -> np.ndarray:
    """Evaluate a nodal field at physical points; (m, 2).

    Points outside every element take ``outside_value``. Exact for fields
    bilinear within each element.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = field.mesh
    elems, locs = mesh.locate_points(points)
    out = np.tile(np.asarray(outside_value, dtype=float), (points.shape[0], 1))
    inside = elems >= 0
    if np.any(inside):
        n = shape_values(locs[inside])  # (m, 4)
        conn = mesh.elements[elems[inside]]  # (m, 4)
        out[inside] = np.einsum("mi,mib->mb", n, field.values[conn])
    return out


def interpolate_field_nearest(field: NodalField, points) -> np.ndarray:
    """Like :func:`interpolate_field`, but outside points take the value at
    the nearest mesh node (safety net for slightly out-of-domain queries)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = field.mesh
    elems, locs = mesh.locate_points(points)
    out = np.zeros((points.shape[0], 2))
    inside = elems >= 0
    if np.any(inside):
        n = shape_values(locs[inside])
        conn = mesh.elements[elems[inside]]
        out[inside] = np.einsum("mi,mib->mb", n, field.values[conn])
    if np.any(~inside):
        _, nearest = mesh.node_tree().query(points[~inside])
        out[~inside] = field.values[nearest]
    return out


# -- serialization ----------------------------------------------------------


def save_quadmesh(mesh: QuadMesh, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(serialize_quadmesh(mesh))


def serialize_quadmesh(mesh: QuadMesh) -> str:
    buf = io.StringIO()
    buf.write("quadmesh v1\n")
    buf.write(f"{mesh.n_nodes} {mesh.n_elements}\n")
    for x, y in mesh.nodes:
        buf.write(f"{x:.17g} {y:.17g}\n")
    for conn in mesh.elements:
        buf.write(" ".join(str(int(c)) for c in conn) + "\n")
    return buf.getvalue()


def load_quadmesh(path) -> QuadMesh:
    with open(path, "r", encoding="ascii") as f:
        return parse_quadmesh(f.read())


def parse_quadmesh(text: str) -> QuadMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "quadmesh v1":
        raise InvalidArgumentError("not a quadmesh v1 file")
    n_nodes, n_elems = (int(t) for t in lines[1].split())
    nodes = np.array(
        [[float(t) for t in lines[2 + k].split()] for k in range(n_nodes)]
    )
    elems = np.array(
        [[int(t) for t in lines[2 + n_nodes + k].split()] for k in range(n_elems)]
    )
    return QuadMesh(nodes, elems)


def mesh_hash(mesh: QuadMesh) -> str:
    return hashlib.sha256(serialize_quadmesh(mesh).encode("ascii")).hexdigest()
