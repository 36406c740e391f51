"""2D linear-elasticity forward solver for ground-truth displacement fields.

Plane-strain and plane-stress quasi-static equilibrium on bilinear quads.
The shear part of the stiffness is integrated with the full 3x3 Gauss rule
while the dilatational (lambda) part uses a single element-center point;
this selective reduced integration keeps near-incompressible materials
(Poisson ratio up to 0.495 and beyond) from volumetric locking.

Displacement fields are produced as whole-solve solutions and then scaled
per frame so that the mean axial strain inside the imaged window grows by
a fixed step between consecutive frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    InvalidArgumentError,
    SolverFailureError,
    UnderConstrainedError,
)
from .mesh import (
    CENTER_RULE,
    GAUSS_3X3,
    NodalField,
    QuadMesh,
    mesh_hash,
    shape_derivs,
)
from .ussim import Rect

PLANE_STRAIN = "plane_strain"
PLANE_STRESS = "plane_stress"


@dataclass
class MaterialField:
    """Per-element Young's modulus (MPa) with a shared Poisson ratio."""

    young_modulus: np.ndarray  # (n_elements,)
    poisson_ratio: float
    mode: str = PLANE_STRAIN

    def __post_init__(self):
        self.young_modulus = np.asarray(self.young_modulus, dtype=float).reshape(-1)
        if np.any(self.young_modulus <= 0):
            raise InvalidArgumentError("Young's modulus must be positive everywhere")
        if self.mode not in (PLANE_STRAIN, PLANE_STRESS):
            raise InvalidArgumentError(f"unknown 2D mode {self.mode!r}")
        nu = self.poisson_ratio
        if self.mode == PLANE_STRAIN and not 0.0 <= nu < 0.5:
            raise InvalidArgumentError("plane strain requires 0 <= nu < 0.5")
        if self.mode == PLANE_STRESS and not 0.0 <= nu <= 0.5:
            raise InvalidArgumentError("plane stress requires 0 <= nu <= 0.5")

    def lame_parameters(self):
        """Per-element (lambda_2d, mu) for the chosen 2D idealization."""
        e, nu = self.young_modulus, self.poisson_ratio
        mu = e / (2.0 * (1.0 + nu))
        if self.mode == PLANE_STRAIN:
            lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        else:
            lam = e * nu / (1.0 - nu * nu)
        return lam, mu

    @classmethod
    def homogeneous(cls, mesh: QuadMesh, young, poisson, mode=PLANE_STRAIN):
        return cls(np.full(mesh.n_elements, float(young)), poisson, mode)

    @classmethod
    def with_inclusion(cls, mesh: QuadMesh, background, inclusion_young,
                       disk, poisson, mode=PLANE_STRAIN):
        e = np.full(mesh.n_elements, float(background))
        inside = disk.contains(mesh.element_centroids())
        e[inside] = float(inclusion_young)
        return cls(e, poisson, mode)


class BoundarySpec:
    """Dirichlet constraints by node; unconstrained boundaries are
    traction-free.

    Slip (roller) supports fix a single component; full fixity or a
    prescribed vector fixes both. Conflicting prescriptions on one DOF
    are rejected.
    """

    def __init__(self, mesh: QuadMesh):
        self.mesh = mesh
        self._values = {}  # dof index -> prescribed value

    def _set(self, dof: int, value: float):
        if dof in self._values and self._values[dof] != value:
            raise InvalidArgumentError(
                f"conflicting prescriptions for dof {dof}"
            )
        self._values[dof] = float(value)

    def fix_xy(self, nodes, value=(0.0, 0.0)) -> "BoundarySpec":
        for n in np.atleast_1d(nodes):
            self._set(2 * int(n), value[0])
            self._set(2 * int(n) + 1, value[1])
        return self

    def slip(self, nodes, axis: int, value: float = 0.0) -> "BoundarySpec":
        """Fix the ``axis`` component (0 = x/axial, 1 = y/lateral), leave
        the tangential component free."""
        if axis not in (0, 1):
            raise InvalidArgumentError("axis must be 0 or 1")
        for n in np.atleast_1d(nodes):
            self._set(2 * int(n) + axis, value)
        return self

    def prescribe(self, nodes, displacement) -> "BoundarySpec":
        return self.fix_xy(nodes, displacement)

    @property
    def constrained_dofs(self) -> np.ndarray:
        return np.array(sorted(self._values), dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([self._values[d] for d in sorted(self._values)])

    def nodes_on(self, predicate) -> np.ndarray:
        """Node indices satisfying a coordinate predicate."""
        mask = predicate(self.mesh.nodes)
        return np.nonzero(mask)[0]


def _element_stiffness(mesh: QuadMesh, lam: np.ndarray, mu: np.ndarray):
    """Element stiffness matrices (n_elements, 8, 8) with SRI."""
    coords = mesh.nodes[mesh.elements]  # (ne, 4, 2)

    def b_matrices(rule):
        d = shape_derivs(rule.points)  # (nq, 4, 2)
        jac = np.einsum("qia,eib->eqab", d, coords)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1]
        inv[..., 0, 1] = -jac[..., 0, 1]
        inv[..., 1, 0] = -jac[..., 1, 0]
        inv[..., 1, 1] = jac[..., 0, 0]
        inv /= det[..., None, None]
        # grads[e, q, i, b] = dN_i/dx_b
        grads = np.einsum("qia,eqba->eqib", d, inv)
        nq = rule.points.shape[0]
        b = np.zeros((mesh.n_elements, nq, 3, 8))
        b[:, :, 0, 0::2] = grads[..., 0]
        b[:, :, 1, 1::2] = grads[..., 1]
        b[:, :, 2, 0::2] = grads[..., 1]
        b[:, :, 2, 1::2] = grads[..., 0]
        return b, det

    # Shear contribution, full integration: D_mu = mu * diag(2, 2, 1)
    b_full, det_full = b_matrices(GAUSS_3X3)
    d_mu = np.diag([2.0, 2.0, 1.0])
    w_full = GAUSS_3X3.weights
    k_mu = np.einsum(
        "eqci,cd,eqdj,q,eq->eij", b_full, d_mu, b_full, w_full, det_full
    )
    k_mu *= mu[:, None, None]

    # Dilatational contribution at the element center only.
    b_ctr, det_ctr = b_matrices(CENTER_RULE)
    div_row = b_ctr[:, 0, 0, :] + b_ctr[:, 0, 1, :]  # (ne, 8)
    w_ctr = CENTER_RULE.weights[0]
    k_lam = np.einsum("ei,ej->eij", div_row, div_row)
    k_lam *= (lam * w_ctr * det_ctr[:, 0])[:, None, None]
    return k_mu + k_lam


def assemble_stiffness(mesh: QuadMesh, material: MaterialField) -> sp.csr_matrix:
    if material.young_modulus.shape[0] != mesh.n_elements:
        raise InvalidArgumentError("material field does not match the mesh")
    lam, mu = material.lame_parameters()
    ke = _element_stiffness(mesh, lam, mu)
    conn = mesh.elements
    edofs = np.empty((mesh.n_elements, 8), dtype=np.int64)
    edofs[:, 0::2] = 2 * conn
    edofs[:, 1::2] = 2 * conn + 1
    rows = np.repeat(edofs, 8, axis=1).ravel()
    cols = np.tile(edofs, (1, 8)).ravel()
    k = sp.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)
    ).tocsr()
    return k


def solve_static(mesh: QuadMesh, material: MaterialField, bcs: BoundarySpec) -> NodalField:
    """Nodal displacements of the constrained quasi-static problem.

    Raises UnderConstrainedError when the reduced system is singular and
    SolverFailureError when the direct solve leaves a large residual.
    """
    k = assemble_stiffness(mesh, material)
    fixed = bcs.constrained_dofs
    if fixed.size == 0:
        raise UnderConstrainedError("no Dirichlet constraints given")
    values = bcs.values
    free = np.setdiff1d(np.arange(mesh.n_dofs), fixed)
    u = np.zeros(mesh.n_dofs)
    u[fixed] = values
    k_ff = k[free][:, free].tocsc()
    rhs = -k[free][:, fixed] @ values
    if free.size:
        try:
            lu = spla.splu(k_ff)
            sol = lu.solve(rhs)
        except RuntimeError as exc:
            raise UnderConstrainedError(
                f"singular constrained system (rigid-body modes remain?): {exc}"
            ) from exc
        if not np.all(np.isfinite(sol)):
            raise UnderConstrainedError("singular constrained system")
        res = np.linalg.norm(k_ff @ sol - rhs)
        scale = np.linalg.norm(rhs)
        if scale > 0 and res / scale > 1e-6:
            raise SolverFailureError(
                f"direct solve residual {res / scale:.3e} exceeds 1e-6",
                residual=res / scale,
            )
        u[free] = sol
    return NodalField.from_dofs(mesh, u)


def element_center_strains(u: NodalField) -> np.ndarray:
    """(n_elements, 3) symmetric strain (e_xx, e_yy, e_xy) at centers."""
    mesh = u.mesh
    coords = mesh.nodes[mesh.elements]
    d = shape_derivs(CENTER_RULE.points)[0]  # (4, 2)
    jac = np.einsum("ia,eib->eab", d, coords)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1]
    inv[:, 0, 1] = -jac[:, 0, 1]
    inv[:, 1, 0] = -jac[:, 1, 0]
    inv[:, 1, 1] = jac[:, 0, 0]
    inv /= det[:, None, None]
    grads = np.einsum("ia,eba->eib", d, inv)  # (ne, 4, 2)
    ue = u.values[mesh.elements]  # (ne, 4, 2)
    dudx = np.einsum("eic,eib->ecb", ue, grads)  # du_c/dx_b
    strains = np.empty((mesh.n_elements, 3))
    strains[:, 0] = dudx[:, 0, 0]
    strains[:, 1] = dudx[:, 1, 1]
    strains[:, 2] = 0.5 * (dudx[:, 0, 1] + dudx[:, 1, 0])
    return strains


def window_mean_axial_strain(u: NodalField, window: Rect) -> float:
    """Area-weighted mean e_xx over elements whose centroid lies in the
    window."""
    mesh = u.mesh
    cents = mesh.element_centroids()
    inside = (
        (cents[:, 0] >= window.x0)
        & (cents[:, 0] <= window.x0 + window.width)
        & (cents[:, 1] >= window.y0)
        & (cents[:, 1] <= window.y0 + window.height)
    )
    if not np.any(inside):
        raise InvalidArgumentError("image window contains no element centroids")
    areas = mesh.element_areas()[inside]
    exx = element_center_strains(u)[inside, 0]
    return float(np.dot(areas, exx) / areas.sum())


def make_truth_frames(solution: NodalField, n_frames: int, mean_step_strain: float,
                      mesh: QuadMesh, image_window: Rect) -> list:
    """Scale a solved field into a frame sequence with uniform strain steps.

    Frame k is ``c_k * solution`` with c_k chosen so the window-mean axial
    strain magnitude grows by ``mean_step_strain`` per frame; frame 0 is
    the zero field.
    """
    if n_frames < 2:
        raise InvalidArgumentError("need at least two frames")
    base = window_mean_axial_strain(solution, image_window)
    if abs(base) < 1e-15:
        raise InvalidArgumentError("solution has zero mean axial strain in window")
    frames = [NodalField.zeros(mesh)]
    for k in range(1, n_frames):
        c = k * mean_step_strain / abs(base)
        frames.append(solution.scaled(c))
    return frames


# -- truth sequence file format ----------------------------------------------


def save_truthseq(frames, mesh: QuadMesh, path) -> None:
    """Write the ``truthseq v1`` binary: mesh hash, counts, nodal arrays."""
    h = mesh_hash(mesh)
    header = f"truthseq v1\n{h}\n{len(frames)} {mesh.n_nodes}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for frame in frames:
            f.write(np.ascontiguousarray(frame.values, dtype="<f8").tobytes())


def load_truthseq(path, mesh: QuadMesh) -> list:
    from .errors import MeshIncompatibilityError

    with open(path, "rb") as f:
        if f.readline().decode("ascii").strip() != "truthseq v1":
            raise InvalidArgumentError(f"{path}: not a truthseq v1 file")
        h = f.readline().decode("ascii").strip()
        if h != mesh_hash(mesh):
            raise MeshIncompatibilityError(
                f"{path}: mesh hash {h[:12]}... does not match the given mesh"
            )
        n_frames, n_nodes = (int(t) for t in f.readline().split())
        frames = []
        for _ in range(n_frames):
            data = np.frombuffer(f.read(16 * n_nodes), dtype="<f8")
            frames.append(NodalField(mesh, data.reshape(n_nodes, 2).copy()))
    return frames
