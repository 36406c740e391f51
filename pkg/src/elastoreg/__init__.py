"""Quasi-static ultrasound elastography by regularized variational registration.

The package covers the full measurement chain: synthetic RF image
simulation, a 2D elasticity forward solver for ground-truth motion,
block-matching initialization, Gauss-Newton image registration under four
interchangeable regularizers, and quantitative error/contrast metrics.
"""

__version__ = "0.1.0"

from .blockmatch import BlockMatchConfig, median_filter_grid, ncc_match, to_initial_guess
from .forward import (
    BoundarySpec,
    MaterialField,
    make_truth_frames,
    solve_static,
)
from .mesh import (
    NodalField,
    QuadMesh,
    QuadratureRule,
    build_structured_mesh,
    interpolate_field,
    load_quadmesh,
    mesh_hash,
    save_quadmesh,
)
from .metrics import (
    RoiMask,
    StrainField,
    cnr_e,
    disp_error,
    strain_error,
    strain_from_displacement,
    strain_ratio,
)
from .registration import (
    ImageMatcher,
    eval_match,
    register_pair,
    register_sequence,
)
from .regularizers import (
    EdgeJumpOperators,
    RegularizerSpec,
    build_edge_operators,
    eval_momentum_reg,
    eval_strain_reg,
)
from .ussim import (
    Disk,
    ImageGrid,
    Psf,
    Rect,
    RfImage,
    ScattererField,
    add_noise,
    bmode_envelope,
    displace_scatterers,
    gen_scatterers,
    make_sequence,
    render_rf,
)

__all__ = [
    "BlockMatchConfig",
    "BoundarySpec",
    "Disk",
    "EdgeJumpOperators",
    "ImageGrid",
    "ImageMatcher",
    "MaterialField",
    "NodalField",
    "Psf",
    "QuadMesh",
    "QuadratureRule",
    "Rect",
    "RegularizerSpec",
    "RfImage",
    "RoiMask",
    "ScattererField",
    "StrainField",
    "add_noise",
    "bmode_envelope",
    "build_edge_operators",
    "build_structured_mesh",
    "cnr_e",
    "displace_scatterers",
    "disp_error",
    "eval_match",
    "eval_momentum_reg",
    "eval_strain_reg",
    "gen_scatterers",
    "interpolate_field",
    "load_quadmesh",
    "make_sequence",
    "make_truth_frames",
    "median_filter_grid",
    "mesh_hash",
    "ncc_match",
    "register_pair",
    "register_sequence",
    "render_rf",
    "save_quadmesh",
    "solve_static",
    "strain_error",
    "strain_from_displacement",
    "strain_ratio",
    "to_initial_guess",
]
