"""Command-line interface.

Subcommands: ``simulate``, ``register``, ``sweep-alpha``, ``metrics``,
``convert-rf``. Every failure path exits nonzero after printing a single
``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ElastoregError, InvalidArgumentError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elastoreg",
        description="Quasi-static ultrasound elastography toolkit",
    )
    parser.add_argument("--debug", action="store_true",
                        help="re-raise errors with a traceback")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the imaging seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="concurrent independent jobs")

    p = sub.add_parser("simulate", help="forward-solve and render RF frames")
    add_common(p)
    p.add_argument("--csv-images", action="store_true",
                   help="also write per-frame CSV exports")

    p = sub.add_parser("register", help="register a simulated sequence")
    add_common(p)
    p.add_argument("--data", required=True,
                   help="simulate output directory with frames/ and meshes")

    p = sub.add_parser("sweep-alpha",
                       help="sweep regularization weights on one frame pair")
    add_common(p)

    p = sub.add_parser("metrics", help="compare measured against truth fields")
    add_common(p)
    p.add_argument("--truth", required=True, help="truthseq on the registration mesh")
    p.add_argument("--measured", required=True,
                   help="dispfield file or directory of accum_*.dispfield")
    p.add_argument("--label", default=None, help="regularizer label for the CSV")
    p.add_argument("--sequence-label", default="sim")

    p = sub.add_parser("convert-rf", help="ingest raw RF data into rfimg v1 files")
    p.add_argument("--input", required=True, help="raw binary RF file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--axial-samples", type=int, required=True)
    p.add_argument("--lines", type=int, required=True)
    p.add_argument("--axial-spacing-mm", type=float, required=True)
    p.add_argument("--lateral-spacing-mm", type=float, required=True)
    p.add_argument("--origin", type=float, nargs=2, default=(0.0, 0.0),
                   metavar=("X0", "Y0"))
    p.add_argument("--dtype", default="float32",
                   choices=["float32", "float64", "int16"])
    p.add_argument("--stride", type=int, default=1,
                   help="keep every stride-th frame (fixed decimation)")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg.imaging = replace(cfg.imaging, seed=args.seed_override)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    return cfg, out


def cmd_simulate(args) -> int:
    from .pipeline import run_simulate

    cfg, out = _load(args)
    info = run_simulate(cfg, out, write_csv_images=args.csv_images)
    print(f"simulate: wrote {info['n_frames']} frames under {info['out']}")
    return 0


def cmd_register(args) -> int:
    from .pipeline import run_register

    cfg, out = _load(args)
    produced = run_register(cfg, args.data, out)
    for kind, result in produced.items():
        flags = sum(r.converged for r in result.reports)
        print(f"register: {kind}: {len(result.increments)} increments, "
              f"{flags} converged, results under {out / ('reg_' + kind)}")
    return 0


def cmd_sweep(args) -> int:
    from .pipeline import run_sweep

    cfg, out = _load(args)
    rows = run_sweep(cfg, out, jobs=args.jobs)
    ok = sum(1 for r in rows if not np.isnan(r[3]))
    print(f"sweep-alpha: {ok}/{len(rows)} registrations succeeded, "
          f"results under {out}")
    return 0


def cmd_metrics(args) -> int:
    from .pipeline import run_metrics

    cfg, out = _load(args)
    info = run_metrics(cfg, args.truth, args.measured, out,
                       label=args.label, sequence=args.sequence_label)
    print(f"metrics: {len(info['rows'])} rows written under {out}")
    if info["undefined"]:
        print("error: undefined-metric: at least one metric is undefined",
              file=sys.stderr)
        return 4
    return 0


def cmd_convert_rf(args) -> int:
    from .ussim import RfImage, save_rfimage

    src = Path(args.input)
    if not src.exists():
        raise InvalidArgumentError(f"input file not found: {src}")
    dtype = {"float32": "<f4", "float64": "<f8", "int16": "<i2"}[args.dtype]
    raw = np.fromfile(src, dtype=dtype)
    frame_len = args.axial_samples * args.lines
    if raw.size == 0 or raw.size % frame_len != 0:
        raise InvalidArgumentError(
            f"raw size {raw.size} is not a multiple of "
            f"{args.axial_samples}x{args.lines}"
        )
    if args.stride < 1:
        raise InvalidArgumentError("stride must be at least 1")
    n_frames = raw.size // frame_len
    frames = raw.reshape(n_frames, args.axial_samples, args.lines)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kept = 0
    for k in range(0, n_frames, args.stride):
        img = RfImage(frames[k].astype(float), args.axial_spacing_mm,
                      args.lateral_spacing_mm, tuple(args.origin))
        save_rfimage(img, out / f"frame_{kept:03d}.rfimg")
        kept += 1
    print(f"convert-rf: kept {kept} of {n_frames} frames under {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "register": cmd_register,
    "sweep-alpha": cmd_sweep,
    "metrics": cmd_metrics,
    "convert-rf": cmd_convert_rf,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ElastoregError as exc:
        if args.debug:
            raise
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        if args.debug:
            raise
        print(f"error: io: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # keep the contract: one line, nonzero exit
        if args.debug:
            raise
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 70


if __name__ == "__main__":
    sys.exit(main())
