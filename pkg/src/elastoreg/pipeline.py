"""Config-driven orchestration behind the CLI subcommands.

Each step reads/writes the documented file formats, renders companion
matplotlib figures next to the delimited outputs, and is deterministic
for fixed seeds. File writes go through a temp-and-rename helper so
partially written outputs never appear under their final names.
"""

from __future__ import annotations

import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import InvalidArgumentError, MeshIncompatibilityError
from .forward import (
    BoundarySpec,
    MaterialField,
    load_truthseq,
    make_truth_frames,
    save_truthseq,
    solve_static,
    window_mean_axial_strain,
)
from .mesh import NodalField, interpolate_field_nearest, load_quadmesh, save_quadmesh
from .metrics import RoiMask, metric_table, strain_from_displacement
from .registration import (
    block_match_initial,
    load_dispfield,
    register_pair,
    register_sequence,
    save_dispfield,
    save_report_csv,
)
from .regularizers import RegularizerSpec
from .ussim import (
    Rect,
    gen_scatterers,
    load_rfimage,
    make_sequence,
    save_rfimage,
    save_scatterers_csv,
)


def atomic_write(path, writer) -> None:
    """Run ``writer(tmp_path)`` then rename the result into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def forward_boundaries(cfg: ExperimentConfig, mesh) -> BoundarySpec:
    """Platen slip on part of the top face, slip-fixed bottom, one lateral
    pin; the remaining boundary is traction-free."""
    dom = cfg.domain
    comp = cfg.compression
    center_y = dom.y0_mm + dom.lateral_mm / 2.0
    top = np.nonzero(
        (mesh.nodes[:, 0] < dom.x0_mm + 1e-9)
        & (np.abs(mesh.nodes[:, 1] - center_y) <= comp.platen_halfwidth_mm + 1e-9)
    )[0]
    bottom = np.nonzero(
        mesh.nodes[:, 0] > dom.x0_mm + dom.axial_mm - 1e-9
    )[0]
    if top.size == 0 or bottom.size == 0:
        raise InvalidArgumentError("platen or bottom boundary has no nodes")
    bcs = BoundarySpec(mesh)
    bcs.slip(top, axis=0, value=comp.displacement_mm)
    bcs.slip(bottom, axis=0, value=0.0)
    pin = bottom[np.argmin(np.abs(mesh.nodes[bottom, 1] - center_y))]
    bcs.slip(pin, axis=1, value=0.0)
    return bcs


def solve_truth(cfg: ExperimentConfig, inclusion_mpa: float | None = None):
    """Forward solve plus frame scaling; returns (forward_mesh, frames)."""
    mesh = cfg.domain.build()
    e_inc = cfg.material.inclusion_mpa if inclusion_mpa is None else inclusion_mpa
    material = MaterialField.with_inclusion(
        mesh, cfg.material.background_mpa, e_inc,
        cfg.material.inclusion.disk(), cfg.material.poisson_ratio,
        cfg.material.mode,
    )
    solution = solve_static(mesh, material, forward_boundaries(cfg, mesh))
    frames = make_truth_frames(
        solution, cfg.sequence.n_frames, cfg.sequence.mean_step_strain,
        mesh, cfg.imaging.region.rect(),
    )
    return mesh, frames


def scatterer_region(cfg: ExperimentConfig) -> Rect:
    img = cfg.imaging.region
    m = cfg.imaging.scatterer_margin_mm
    return Rect(img.x0_mm - m, img.y0_mm - m,
                img.axial_mm + 2 * m, img.lateral_mm + 2 * m)


def simulate_frames(cfg: ExperimentConfig, truth_frames, which=None):
    """Render the RF frames (all, or a subset of indices)."""
    scatterers = gen_scatterers(
        scatterer_region(cfg), cfg.imaging.scatterer_density_per_mm2,
        inclusion=cfg.material.inclusion.disk(),
        inclusion_gain=cfg.imaging.inclusion_gain, seed=cfg.imaging.seed,
    )
    grid = cfg.imaging.grid()
    if which is None:
        frames = make_sequence(scatterers, cfg.imaging.psf, grid, truth_frames,
                               cfg.imaging.snr_db, seed=cfg.imaging.seed)
        return scatterers, frames
    # Subset rendering reuses the full sequence's per-frame noise streams
    # so frame k is identical however many frames are produced.
    from .ussim import add_noise, displace_scatterers, render_rf

    children = np.random.SeedSequence(cfg.imaging.seed).spawn(len(truth_frames))
    frames = {}
    for k in sorted(set(which)):
        moved = (
            displace_scatterers(scatterers, truth_frames[k]) if k > 0 else scatterers
        )
        frame = render_rf(moved, cfg.imaging.psf, grid)
        snr = cfg.imaging.snr_db
        if snr is not None and snr != math.inf:
            frame = add_noise(frame, snr, seed=children[k])
        frames[k] = frame
    return scatterers, frames


def restrict_frames(frames, mesh):
    """Truth fields interpolated at another mesh's nodes."""
    return [
        NodalField(mesh, interpolate_field_nearest(f, mesh.nodes)) for f in frames
    ]


def run_simulate(cfg: ExperimentConfig, out_dir, write_csv_images=False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fwd_mesh, truth = solve_truth(cfg)
    reg_mesh = cfg.registration.mesh.build()
    scatterers, frames = simulate_frames(cfg, truth)

    atomic_write(out / "mesh_forward.quadmesh",
                 lambda p: save_quadmesh(fwd_mesh, p))
    atomic_write(out / "mesh_registration.quadmesh",
                 lambda p: save_quadmesh(reg_mesh, p))
    atomic_write(out / "truth_forward.truthseq",
                 lambda p: save_truthseq(truth, fwd_mesh, p))
    truth_reg = restrict_frames(truth, reg_mesh)
    atomic_write(out / "truth_registration.truthseq",
                 lambda p: save_truthseq(truth_reg, reg_mesh, p))
    atomic_write(out / "scatterers.csv",
                 lambda p: save_scatterers_csv(scatterers, p))

    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)
    for k, frame in enumerate(frames):
        atomic_write(frames_dir / f"frame_{k:03d}.rfimg",
                     lambda p, fr=frame: save_rfimage(fr, p))
        if write_csv_images:
            from .ussim import save_rfimage_csv

            atomic_write(frames_dir / f"frame_{k:03d}.csv",
                         lambda p, fr=frame: save_rfimage_csv(fr, p))

    window = cfg.imaging.region.rect()
    means = [0.0] + [
        window_mean_axial_strain(t, window) for t in truth[1:]
    ]
    atomic_write(out / "strain_trace.csv", lambda p: _write_strain_trace(p, means))

    from .figures import save_bmode_png, save_strain_step_trace_png

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    save_bmode_png(frames[0], fig_dir / "bmode_frame000.png")
    save_strain_step_trace_png(means, fig_dir / "strain_trace.png")
    return {"out": out, "n_frames": len(frames)}


def _write_strain_trace(path, means):
    with open(path, "w", encoding="ascii") as f:
        f.write("frame,window_mean_axial_strain\n")
        for k, m in enumerate(means):
            f.write(f"{k},{m:.17g}\n")


def load_sequence(data_dir):
    """(registration mesh, frames) from a simulate output directory."""
    data = Path(data_dir)
    if not data.exists():
        raise InvalidArgumentError(f"sequence directory not found: {data}")
    mesh_path = data / "mesh_registration.quadmesh"
    if not mesh_path.exists():
        raise InvalidArgumentError(f"missing mesh file: {mesh_path}")
    mesh = load_quadmesh(mesh_path)
    frame_paths = sorted((data / "frames").glob("frame_*.rfimg"))
    if not frame_paths:
        raise InvalidArgumentError(f"no rfimg frames under {data / 'frames'}")
    frames = [load_rfimage(p) for p in frame_paths]
    return mesh, frames


def run_register(cfg: ExperimentConfig, data_dir, out_dir) -> dict:
    mesh, frames = load_sequence(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .figures import save_objective_trace_png

    produced = {}
    for spec in cfg.registration.regularizers:
        reg_dir = out / f"reg_{spec.kind}"
        reg_dir.mkdir(exist_ok=True)
        result = register_sequence(
            frames, spec, mesh, init_policy=cfg.registration.init_policy,
            block_config=cfg.registration.block_match,
            max_iterations=cfg.registration.max_iterations,
            step_tol=cfg.registration.step_tol,
        )
        for k, u in enumerate(result.increments):
            atomic_write(reg_dir / f"incr_{k:03d}.dispfield",
                         lambda p, f=u: save_dispfield(f, p))
        for k, s in enumerate(result.accumulated):
            atomic_write(reg_dir / f"accum_{k:03d}.dispfield",
                         lambda p, f=s: save_dispfield(f, p))
        atomic_write(reg_dir / "report.csv",
                     lambda p: save_report_csv(result.reports, p, spec.kind))
        save_objective_trace_png(result.reports, reg_dir / "trace.png", spec.kind)
        produced[spec.kind] = result
    return produced


def pair_strain_error(cfg: ExperimentConfig, frames_by_index, truth_on_reg,
                      reg_mesh, spec: RegularizerSpec, *, matcher=None,
                      init=None) -> float:
    """Total strain error of a single-pair registration at one weight."""
    ref, tgt = cfg.registration.pair
    if init is None:
        init = block_match_initial(frames_by_index[ref], frames_by_index[tgt],
                                   reg_mesh, cfg.registration.block_match)
    u, _ = register_pair(
        frames_by_index[ref], frames_by_index[tgt], init, spec, reg_mesh,
        max_iterations=cfg.registration.max_iterations,
        step_tol=cfg.registration.step_tol, matcher=matcher,
    )
    truth_diff = truth_on_reg[tgt] - truth_on_reg[ref]
    from .metrics import strain_error

    return strain_error(
        strain_from_displacement(truth_diff), strain_from_displacement(u)
    )


def _sweep_case_worker(args):
    from .registration import ImageMatcher

    cfg, case_name, inclusion_mpa = args
    fwd_mesh, truth = solve_truth(cfg, inclusion_mpa=inclusion_mpa)
    reg_mesh = cfg.registration.mesh.build()
    ref, tgt = cfg.registration.pair
    _, frames = simulate_frames(cfg, truth, which=[ref, tgt])
    truth_on_reg = restrict_frames(truth, reg_mesh)
    matcher = ImageMatcher(frames[ref], frames[tgt], reg_mesh)
    init = block_match_initial(frames[ref], frames[tgt], reg_mesh,
                               cfg.registration.block_match)
    rows = []
    alphas = cfg.sweep.alphas()
    for spec in cfg.registration.regularizers:
        for alpha in alphas:
            trial = spec.with_alpha(float(alpha))
            try:
                err = pair_strain_error(cfg, frames, truth_on_reg, reg_mesh,
                                        trial, matcher=matcher, init=init)
            except Exception as exc:  # record and move on; sweep edges may fail
                rows.append((spec.kind, case_name, float(alpha), float("nan"),
                             type(exc).__name__))
                continue
            rows.append((spec.kind, case_name, float(alpha), err, ""))
    return rows


def run_sweep(cfg: ExperimentConfig, out_dir, jobs: int = 1) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = cfg.sweep.cases or [None]
    tasks = []
    for case in cases:
        if case is None:
            tasks.append((cfg, "", None))
        else:
            tasks.append((cfg, case.name, case.inclusion_mpa))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_case_worker, tasks))
    else:
        results = [_sweep_case_worker(t) for t in tasks]
    rows = [r for chunk in results for r in chunk]

    def write_rows(path):
        with open(path, "w", encoding="ascii") as f:
            f.write("regularizer,case,alpha,total_strain_error_pct,error\n")
            for reg, case, alpha, err, tag in rows:
                err_s = "nan" if np.isnan(err) else f"{err:.17g}"
                f.write(f"{reg},{case},{alpha:.17g},{err_s},{tag}\n")

    atomic_write(out / "sweep.csv", write_rows)

    # Per-regularizer argmin per case plus the cross-case average.
    summary = []
    kinds = sorted({r[0] for r in rows})
    for kind in kinds:
        argmins = []
        for case in sorted({r[1] for r in rows}):
            sub = [r for r in rows if r[0] == kind and r[1] == case
                   and not np.isnan(r[3])]
            if not sub:
                continue
            best = min(sub, key=lambda r: r[3])
            summary.append((kind, case, best[2], best[3]))
            argmins.append(best[2])
        if argmins:
            summary.append((kind, "__mean__", float(np.mean(argmins)), float("nan")))

    def write_summary(path):
        with open(path, "w", encoding="ascii") as f:
            f.write("regularizer,case,alpha_argmin,total_strain_error_pct\n")
            for kind, case, alpha, err in summary:
                err_s = "nan" if np.isnan(err) else f"{err:.17g}"
                f.write(f"{kind},{case},{alpha:.17g},{err_s}\n")

    atomic_write(out / "sweep_summary.csv", write_summary)

    from .figures import save_sweep_curves_png

    plot_rows = [(r[0], r[1], r[2], r[3]) for r in rows if not np.isnan(r[3])]
    if plot_rows:
        save_sweep_curves_png(plot_rows, out / "sweep.png")
    return rows


def run_metrics(cfg: ExperimentConfig, truth_path, measured_path, out_dir,
                label: str | None = None, sequence: str = "sim") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reg_mesh = cfg.registration.mesh.build()
    truth_path = Path(truth_path)
    if not truth_path.exists():
        raise InvalidArgumentError(f"truth file not found: {truth_path}")
    truth = load_truthseq(truth_path, reg_mesh)

    measured_path = Path(measured_path)
    if measured_path.is_dir():
        paths = sorted(measured_path.glob("accum_*.dispfield"))
        if not paths:
            raise InvalidArgumentError(
                f"no accum_*.dispfield files under {measured_path}"
            )
        measured = {int(p.stem.split("_")[1]): load_dispfield(p, reg_mesh)
                    for p in paths}
        if label is None:
            label = measured_path.name.removeprefix("reg_")
    else:
        if not measured_path.exists():
            raise InvalidArgumentError(f"measured file not found: {measured_path}")
        measured = {len(truth) - 1: load_dispfield(measured_path, reg_mesh)}
        if label is None:
            label = measured_path.stem

    roi = None
    if cfg.metrics.roi is not None:
        roi = RoiMask.from_disk(reg_mesh, cfg.metrics.roi.disk())

    rows = []
    undefined = False
    for k in sorted(measured):
        if k >= len(truth):
            raise MeshIncompatibilityError(
                f"measured frame {k} exceeds the {len(truth)}-frame truth"
            )
        if k == 0:
            continue  # zero reference frame has no defined error norms
        table = metric_table(truth[k], measured[k], roi)
        for metric, value in table.items():
            rows.append((sequence, k, label, metric, value))
            if not np.isfinite(value):
                undefined = True

    def write_rows(path):
        with open(path, "w", encoding="ascii") as f:
            f.write("sequence,frame,regularizer,metric,value\n")
            for seq, frame, reg, metric, value in rows:
                f.write(f"{seq},{frame},{reg},{metric},{value:.17g}\n")

    atomic_write(out / "metrics.csv", write_rows)

    # Figures plus plot-free rasters for the last measured frame.
    last = max(measured)
    from .figures import (
        save_metric_bars_png,
        save_nodal_field_png,
        save_strain_field_png,
    )
    from .rasters import export_field_rasters

    fig_dir = out / "figures"
    fig_dir.mkdir(exist_ok=True)
    bar_rows = [(r[2], r[3], r[4]) for r in rows if r[1] == last]
    if bar_rows:
        save_metric_bars_png(bar_rows, fig_dir / f"metrics_{label}.png")
    save_nodal_field_png(measured[last], 0, fig_dir / f"{label}_ux.png",
                         title=f"{label} axial displacement")
    save_nodal_field_png(measured[last], 1, fig_dir / f"{label}_uy.png",
                         title=f"{label} lateral displacement")
    eps = strain_from_displacement(measured[last])
    save_strain_field_png(eps, 0, fig_dir / f"{label}_exx.png",
                          title=f"{label} axial strain")
    export_field_rasters(measured[last], out / "rasters", label)
    return {"rows": rows, "undefined": undefined}
