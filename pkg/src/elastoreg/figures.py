"""Matplotlib figure rendering for the CLI report paths.

Every figure lands next to its delimited counterpart so results can be
eyeballed without rerunning anything. All rendering uses the Agg backend
and writes PNG files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import PolyCollection

from .mesh import NodalField, QuadMesh
from .metrics import StrainField
from .ussim import RfImage, bmode_envelope


def _element_polys(mesh: QuadMesh):
    return mesh.nodes[mesh.elements]


def save_element_field_png(mesh: QuadMesh, values, path, title="",
                           cbar_label="") -> None:
    """Per-element scalar painted on the mesh (axial axis points down)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    coll = PolyCollection(
        [p[:, ::-1] for p in _element_polys(mesh)], array=np.asarray(values),
        cmap="viridis", edgecolors="none",
    )
    ax.add_collection(coll)
    lo, hi = mesh.bbox()
    ax.set_xlim(lo[1], hi[1])
    ax.set_ylim(hi[0], lo[0])
    ax.set_xlabel("lateral (mm)")
    ax.set_ylabel("axial (mm)")
    ax.set_title(title)
    fig.colorbar(coll, ax=ax, label=cbar_label)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_nodal_field_png(field: NodalField, component: int, path,
                         title="") -> None:
    """Nodal component averaged per element, painted on the mesh."""
    vals = field.values[field.mesh.elements, component].mean(axis=1)
    label = "u_x (mm)" if component == 0 else "u_y (mm)"
    save_element_field_png(field.mesh, vals, path, title=title, cbar_label=label)


def save_strain_field_png(eps: StrainField, component: int, path,
                          title="") -> None:
    labels = ("e_xx", "e_yy", "e_xy")
    save_element_field_png(eps.mesh, eps.values[:, component], path,
                           title=title, cbar_label=labels[component])


def save_bmode_png(image: RfImage, path, dynamic_range_db: float = 40.0,
                   title="B-mode") -> None:
    env = bmode_envelope(image).samples
    peak = env.max() if env.max() > 0 else 1.0
    db = 20.0 * np.log10(np.maximum(env / peak, 10 ** (-dynamic_range_db / 20 - 1)))
    db = np.clip(db, -dynamic_range_db, 0.0)
    extent = [
        image.origin[1],
        image.origin[1] + (image.n_lateral - 1) * image.lateral_spacing,
        image.origin[0] + (image.n_axial - 1) * image.axial_spacing,
        image.origin[0],
    ]
    fig, ax = plt.subplots(figsize=(4, 6))
    im = ax.imshow(db, cmap="gray", aspect="auto", extent=extent)
    ax.set_xlabel("lateral (mm)")
    ax.set_ylabel("axial (mm)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="dB")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_objective_trace_png(reports, path, label="") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    positive = all(min(rep.objective_trace) > 0 for rep in reports if rep.objective_trace)
    for k, rep in enumerate(reports):
        ax.plot(rep.objective_trace, marker=".",
                label=f"pair {k}" if len(reports) > 1 else None)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.set_title(f"Gauss-Newton trace {label}".strip())
    if len(reports) > 1 and len(reports) <= 8:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_strain_step_trace_png(frame_means, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(frame_means)), 100 * np.asarray(frame_means), "o-")
    ax.set_xlabel("frame")
    ax.set_ylabel("window-mean axial strain (%)")
    ax.set_title("Per-frame compression schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_curves_png(rows, path) -> None:
    """rows: iterable of (regularizer, case, alpha, total_strain_error_pct)."""
    by_key = {}
    for reg, case, alpha, err in rows:
        by_key.setdefault((reg, case), []).append((alpha, err))
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for (reg, case), pts in sorted(by_key.items()):
        pts = sorted(pts)
        alphas = [p[0] for p in pts]
        errs = [p[1] for p in pts]
        label = reg if not case else f"{reg} ({case})"
        ax.loglog(alphas, errs, "o-", label=label)
    ax.set_xlabel("regularization weight")
    ax.set_ylabel("total strain error (%)")
    ax.set_title("Weight sweep")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_bars_png(metric_rows, path) -> None:
    """rows: iterable of (regularizer, metric, value); grouped bar chart of
    the error metrics."""
    regs = sorted({r for r, _, _ in metric_rows})
    metrics = sorted({m for _, m, _ in metric_rows if m.endswith("_total")})
    lookup = {(r, m): v for r, m, v in metric_rows}
    x = np.arange(len(metrics))
    width = 0.8 / max(len(regs), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, reg in enumerate(regs):
        vals = [lookup.get((reg, m), np.nan) for m in metrics]
        ax.bar(x + i * width, vals, width, label=reg)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(metrics, rotation=20, fontsize=8)
    ax.set_ylabel("percent error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
