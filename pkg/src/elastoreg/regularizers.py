"""Regularization energies, gradients, and Gauss-Newton Hessians.

Four interchangeable penalties on the nodal displacement vector ``ubar``
(interleaved, length 2*n_nodes):

* ``strain``: (alpha/2) * integral of the squared symmetric gradient.
* ``strain_incompressible``: the strain term plus (alpha_i/2) * integral
  of the squared divergence, the latter integrated at element centers
  only (reduced integration) to avoid over-constraining the solution.
* ``momentum_plane_strain`` / ``momentum_plane_stress``: total variation
  of the momentum residual of a piecewise-constant-modulus linear elastic
  body, reduced to a sum over interior element edges of the jump in
  ``A[u] = lambda_bar * div(u) * I + 2 * sym(grad(u))`` projected on the
  edge normal. Edge terms use ``sqrt(jump^2 + delta)`` smoothing; the
  Gauss-Newton Hessian drops the rank-one TV curvature term, leaving the
  positive semidefinite form K^T D K with D diagonal.

For the jump evaluation the symmetric-gradient part of A is taken at the
edge midpoint of each adjacent element while the dilatational part is
taken at the adjacent element centers (reduced, anti-locking). The same
center evaluation is applied for both plane variants to keep one code
path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError
from .mesh import (
    CENTER_RULE,
    GAUSS_3X3,
    NodalField,
    QuadMesh,
    QuadratureRule,
    shape_derivs,
)

STRAIN = "strain"
STRAIN_INCOMPRESSIBLE = "strain_incompressible"
MOMENTUM_PLANE_STRAIN = "momentum_plane_strain"
MOMENTUM_PLANE_STRESS = "momentum_plane_stress"
KINDS = (STRAIN, STRAIN_INCOMPRESSIBLE, MOMENTUM_PLANE_STRAIN, MOMENTUM_PLANE_STRESS)
MOMENTUM_KINDS = (MOMENTUM_PLANE_STRAIN, MOMENTUM_PLANE_STRESS)

# Default operating points: plane-stress jumps assume an incompressible
# sheet (lambda_bar = 2); the plane-strain variant uses lambda_bar = 9,
# i.e. an effective Poisson ratio of 0.45.
DEFAULT_LAMBDA_BAR = {MOMENTUM_PLANE_STRAIN: 9.0, MOMENTUM_PLANE_STRESS: 2.0}
DEFAULT_DELTA = 1e-8
DEFAULT_ALPHA = {
    STRAIN: 24.8,
    STRAIN_INCOMPRESSIBLE: 1.89e4,
    MOMENTUM_PLANE_STRAIN: 1.14e-4,
    MOMENTUM_PLANE_STRESS: 2.33e-4,
}
INCOMPRESSIBILITY_WEIGHT_RATIO = 100.0


@dataclass
class RegularizerSpec:
    """Tagged regularizer choice with its weights.

    ``alpha_i`` applies only to ``strain_incompressible`` (default
    100 * alpha); ``lambda_bar`` and ``delta`` only to the momentum kinds.
    """

    kind: str
    alpha: float
    alpha_i: float | None = None
    lambda_bar: float | None = None
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown regularizer kind {self.kind!r}")
        if self.alpha <= 0:
            raise InvalidArgumentError("alpha must be positive")
        if self.kind == STRAIN_INCOMPRESSIBLE and self.alpha_i is None:
            self.alpha_i = INCOMPRESSIBILITY_WEIGHT_RATIO * self.alpha
        if self.kind in MOMENTUM_KINDS:
            if self.lambda_bar is None:
                self.lambda_bar = DEFAULT_LAMBDA_BAR[self.kind]
            if self.delta <= 0:
                raise InvalidArgumentError("delta must be positive")

    def with_alpha(self, alpha: float) -> "RegularizerSpec":
        alpha_i = None
        if self.kind == STRAIN_INCOMPRESSIBLE and self.alpha_i is not None:
            ratio = self.alpha_i / self.alpha
            alpha_i = ratio * alpha
        return RegularizerSpec(self.kind, alpha, alpha_i, self.lambda_bar, self.delta)


@dataclass
class RegEval:
    value: float
    gradient: np.ndarray
    gn_hessian: sp.csr_matrix


@dataclass
class EdgeJumpOperators:
    """Sparse maps from nodal displacements to per-edge jump components.

    Row j of ``kx`` / ``ky`` applied to ``ubar`` gives the x / y component
    of the jump of ``A[u] . n`` across interior edge j (right element
    minus left, normal pointing left to right). Rows vanish on globally
    linear displacement fields.
    """

    kx: sp.csr_matrix
    ky: sp.csr_matrix
    edge_lengths: np.ndarray
    lambda_bar: float
    n_dofs: int


def _edge_midpoint_local(mesh: QuadMesh, elem: int, edge_nodes) -> np.ndarray:
    """Reference coordinates of an edge midpoint inside an adjacent
    element (element edges are straight, so the reference midpoint maps
    to the physical midpoint)."""
    conn = list(mesh.elements[elem])
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    c1 = corners[conn.index(edge_nodes[0])]
    c2 = corners[conn.index(edge_nodes[1])]
    return 0.5 * (c1 + c2)


def build_edge_operators(mesh: QuadMesh, lambda_bar: float) -> EdgeJumpOperators:
    """Assemble the jump operators for a mesh and dilatation weight."""
    if mesh.n_interior_edges < 1:
        raise InvalidArgumentError("mesh has no interior edges")
    rows_x, cols_x, vals_x = [], [], []
    rows_y, cols_y, vals_y = [], [], []
    for j in range(mesh.n_interior_edges):
        nodes = mesh.edge_nodes[j]
        nx, ny = mesh.edge_normals[j]
        for elem, sign in ((mesh.edge_right[j], 1.0), (mesh.edge_left[j], -1.0)):
            mid_local = _edge_midpoint_local(mesh, elem, nodes)
            g_edge = mesh.shape_gradients(elem, mid_local)  # (4, 2)
            g_ctr = mesh.shape_gradients(elem, (0.0, 0.0))
            conn = mesh.elements[elem]
            for a in range(4):
                dgx, dgy = g_edge[a]
                cgx, cgy = g_ctr[a]
                dof_x, dof_y = 2 * conn[a], 2 * conn[a] + 1
                # (A.n)_x = lb*div*nx + 2*exx*nx + 2*exy*ny
                rows_x += [j, j]
                cols_x += [dof_x, dof_y]
                vals_x += [
                    sign * (lambda_bar * cgx * nx + 2.0 * dgx * nx + dgy * ny),
                    sign * (lambda_bar * cgy * nx + dgx * ny),
                ]
                # (A.n)_y = lb*div*ny + 2*exy*nx + 2*eyy*ny
                rows_y += [j, j]
                cols_y += [dof_x, dof_y]
                vals_y += [
                    sign * (lambda_bar * cgx * ny + dgy * nx),
                    sign * (lambda_bar * cgy * ny + 2.0 * dgy * ny + dgx * nx),
                ]
    shape = (mesh.n_interior_edges, mesh.n_dofs)
    kx = sp.coo_matrix((vals_x, (rows_x, cols_x)), shape=shape).tocsr()
    ky = sp.coo_matrix((vals_y, (rows_y, cols_y)), shape=shape).tocsr()
    return EdgeJumpOperators(kx, ky, mesh.edge_lengths.copy(), lambda_bar, mesh.n_dofs)


def _strain_matrices(mesh: QuadMesh):
    """(K_s, K_d): quadratic forms of the strain-squared and reduced
    divergence-squared integrals."""
    coords = mesh.nodes[mesh.elements]
    conn = mesh.elements
    edofs = np.empty((mesh.n_elements, 8), dtype=np.int64)
    edofs[:, 0::2] = 2 * conn
    edofs[:, 1::2] = 2 * conn + 1

    def grads_dets(rule: QuadratureRule):
        d = shape_derivs(rule.points)
        jac = np.einsum("qia,eib->eqab", d, coords)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1]
        inv[..., 0, 1] = -jac[..., 0, 1]
        inv[..., 1, 0] = -jac[..., 1, 0]
        inv[..., 1, 1] = jac[..., 0, 0]
        inv /= det[..., None, None]
        grads = np.einsum("qia,eqba->eqib", d, inv)
        return grads, det

    # sym-grad contraction in Voigt [exx, eyy, gxy]: eps:eps uses diag(1, 1, 1/2).
    grads, det = grads_dets(GAUSS_3X3)
    nq = GAUSS_3X3.points.shape[0]
    b = np.zeros((mesh.n_elements, nq, 3, 8))
    b[:, :, 0, 0::2] = grads[..., 0]
    b[:, :, 1, 1::2] = grads[..., 1]
    b[:, :, 2, 0::2] = grads[..., 1]
    b[:, :, 2, 1::2] = grads[..., 0]
    m = np.diag([1.0, 1.0, 0.5])
    ks_e = np.einsum("eqci,cd,eqdj,q,eq->eij", b, m, b, GAUSS_3X3.weights, det)

    grads_c, det_c = grads_dets(CENTER_RULE)
    div = np.zeros((mesh.n_elements, 8))
    div[:, 0::2] = grads_c[:, 0, :, 0]
    div[:, 1::2] = grads_c[:, 0, :, 1]
    kd_e = np.einsum("ei,ej->eij", div, div)
    kd_e *= (CENTER_RULE.weights[0] * det_c[:, 0])[:, None, None]

    rows = np.repeat(edofs, 8, axis=1).ravel()
    cols = np.tile(edofs, (1, 8)).ravel()
    shape = (mesh.n_dofs, mesh.n_dofs)
    ks = sp.coo_matrix((ks_e.ravel(), (rows, cols)), shape=shape).tocsr()
    kd = sp.coo_matrix((kd_e.ravel(), (rows, cols)), shape=shape).tocsr()
    return ks, kd


def eval_strain_reg(u: NodalField, alpha: float, alpha_i: float = 0.0) -> RegEval:
    """Value, gradient, and (constant) Hessian of the strain penalty.

    ``alpha_i = 0`` gives the plain strain-magnitude regularizer; a
    positive value adds the reduced-integration incompressibility term.
    """
    ks, kd = _strain_matrices(u.mesh)
    h = (alpha * ks + alpha_i * kd).tocsr()
    ubar = u.dofs
    grad = h @ ubar
    value = 0.5 * float(ubar @ grad)
    return RegEval(value, grad, h)


def eval_momentum_reg(u: NodalField, ops: EdgeJumpOperators, alpha: float,
                      delta: float = DEFAULT_DELTA) -> RegEval:
    """Smoothed TV of the per-edge momentum jump.

    value = alpha * sum_j l_j * sqrt(jx_j^2 + jy_j^2 + delta); the
    Gauss-Newton Hessian keeps only the K^T D K part (the rank-one TV
    curvature term is dropped), so it is symmetric positive semidefinite.
    """
    if delta <= 0:
        raise InvalidArgumentError("delta must be positive")
    ubar = u.dofs
    if ubar.shape[0] != ops.n_dofs:
        raise InvalidArgumentError("field does not match the edge operators")
    jx = ops.kx @ ubar
    jy = ops.ky @ ubar
    root = np.sqrt(jx * jx + jy * jy + delta)
    value = alpha * float(np.dot(ops.edge_lengths, root))
    w = alpha * ops.edge_lengths / root
    grad = ops.kx.T @ (w * jx) + ops.ky.T @ (w * jy)
    d = sp.diags(w)
    h = (ops.kx.T @ d @ ops.kx + ops.ky.T @ d @ ops.ky).tocsr()
    return RegEval(value, grad, h)


class RegularizerEvaluator:
    """Spec-bound evaluator with per-mesh precomputation.

    Strain kinds precompute their constant Hessian; momentum kinds
    precompute the edge operators and rescale the diagonal each call.
    """

    def __init__(self, spec: RegularizerSpec, mesh: QuadMesh):
        self.spec = spec
        self.mesh = mesh
        if spec.kind in MOMENTUM_KINDS:
            self.ops = build_edge_operators(mesh, spec.lambda_bar)
            self._hess = None
        else:
            ks, kd = _strain_matrices(mesh)
            alpha_i = spec.alpha_i if spec.kind == STRAIN_INCOMPRESSIBLE else 0.0
            self._hess = (spec.alpha * ks + (alpha_i or 0.0) * kd).tocsr()
            self.ops = None

    def evaluate(self, u: NodalField) -> RegEval:
        if self.ops is not None:
            return eval_momentum_reg(u, self.ops, self.spec.alpha, self.spec.delta)
        ubar = u.dofs
        grad = self._hess @ ubar
        return RegEval(0.5 * float(ubar @ grad), grad, self._hess)


def evaluate_regularizer(spec: RegularizerSpec, u: NodalField) -> RegEval:
    return RegularizerEvaluator(spec, u.mesh).evaluate(u)


# -- reduction oracle: band integral of the smooth TV form -------------------


def edge_jump_sum(mesh: QuadMesh, elem_tensors) -> float:
    """sum_j l_j * ||jump(A) . n_j|| for per-element constant symmetric
    tensors given as (n_elements, 3) rows (A_xx, A_yy, A_xy)."""
    a = np.asarray(elem_tensors, dtype=float).reshape(mesh.n_elements, 3)
    total = 0.0
    for j in range(mesh.n_interior_edges):
        d = a[mesh.edge_right[j]] - a[mesh.edge_left[j]]
        nx, ny = mesh.edge_normals[j]
        vx = d[0] * nx + d[2] * ny
        vy = d[2] * nx + d[1] * ny
        total += mesh.edge_lengths[j] * np.hypot(vx, vy)
    return float(total)


def build_band_mesh(coarse: QuadMesh, band_width: float) -> QuadMesh:
    """Banded refinement of a structured coarse mesh.

    Every interior grid line of the coarse mesh is straddled by a
    transition band of the given width; away from the bands the coarse
    cells shrink accordingly. Used by :func:`tv_limit_check`.
    """
    from .mesh import QuadMesh as _QuadMesh

    xs = np.unique(coarse.nodes[:, 0])
    ys = np.unique(coarse.nodes[:, 1])
    if band_width <= 0:
        raise InvalidArgumentError("band width must be positive")
    min_gap = min(np.diff(xs).min(), np.diff(ys).min())
    if band_width >= min_gap:
        raise InvalidArgumentError("band width must be below the coarse spacing")

    def banded(axis_vals):
        out = [axis_vals[0]]
        for v in axis_vals[1:-1]:
            out += [v - band_width / 2.0, v + band_width / 2.0]
        out.append(axis_vals[-1])
        return np.array(out)

    bx, by = banded(xs), banded(ys)
    nx, ny = bx.size - 1, by.size - 1
    nodes = np.array([(x, y) for y in by for x in bx])
    elements = []
    for j in range(ny):
        for i in range(nx):
            n00 = i + j * (nx + 1)
            elements.append([n00, n00 + 1, n00 + nx + 2, n00 + nx + 1])
    return _QuadMesh(nodes, np.array(elements))


def tv_limit_check(coarse: QuadMesh, refined: QuadMesh, elem_tensors) -> float:
    """Discrepancy between the edge-jump sum and the band integral.

    The per-coarse-element constant tensors are lifted to a continuous
    bilinear field on the refined band mesh (each refined node takes the
    tensor of the coarse element containing it); the total variation of
    its divergence is integrated by Gauss quadrature and compared with
    the coarse edge-jump sum. Returns the relative discrepancy (absolute
    when the jump sum is zero). The two agree in the vanishing-band
    limit, the leftover being the O(dx*dy) cross bands.
    """
    lo_c, hi_c = coarse.bbox()
    lo_r, hi_r = refined.bbox()
    if not (np.allclose(lo_c, lo_r, atol=1e-9) and np.allclose(hi_c, hi_r, atol=1e-9)):
        raise InvalidArgumentError("refined mesh does not cover the coarse domain")
    a = np.asarray(elem_tensors, dtype=float).reshape(coarse.n_elements, 3)
    elems, _ = coarse.locate_points(refined.nodes)
    if np.any(elems < 0):
        raise InvalidArgumentError("refined mesh node outside the coarse mesh")
    nodal = a[elems]  # (n_refined_nodes, 3)

    rule = QuadratureRule.gauss(5)
    coords = refined.nodes[refined.elements]
    d = shape_derivs(rule.points)
    jac = np.einsum("qia,eib->eqab", d, coords)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    inv = np.empty_like(jac)
    inv[..., 0, 0] = jac[..., 1, 1]
    inv[..., 0, 1] = -jac[..., 0, 1]
    inv[..., 1, 0] = -jac[..., 1, 0]
    inv[..., 1, 1] = jac[..., 0, 0]
    inv /= det[..., None, None]
    grads = np.einsum("qia,eqba->eqib", d, inv)  # (ne, nq, 4, 2)
    ae = nodal[refined.elements]  # (ne, 4, 3)
    # dA_c/dx_b at each quadrature point
    da = np.einsum("eic,eqib->eqcb", ae, grads)
    gx = da[:, :, 0, 0] + da[:, :, 2, 1]  # d(Axx)/dx + d(Axy)/dy
    gy = da[:, :, 2, 0] + da[:, :, 1, 1]  # d(Axy)/dx + d(Ayy)/dy
    integrand = np.sqrt(gx * gx + gy * gy)
    band_integral = float(np.einsum("eq,q,eq->", integrand, rule.weights, det))

    jump = edge_jump_sum(coarse, a)
    if jump == 0.0:
        return abs(band_integral)
    return abs(band_integral - jump) / jump
