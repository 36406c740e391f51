"""Experiment configuration: YAML schema, validation, and derived objects.

One config file drives the whole pipeline (simulate, register, sweep,
metrics). Validation is strict: unknown keys are rejected with their
dotted path, and the imaging seed must be given explicitly so reruns are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .blockmatch import BlockMatchConfig
from .errors import ConfigError
from .forward import PLANE_STRAIN, PLANE_STRESS
from .regularizers import DEFAULT_ALPHA, KINDS, RegularizerSpec
from .ussim import Disk, Psf, Rect


def _take(d: dict, path: str, key: str, default=None, required=False):
    if key in d:
        return d.pop(key)
    if required:
        raise ConfigError(f"missing required key {path}.{key}")
    return default


def _reject_unknown(d: dict, path: str):
    if d:
        raise ConfigError(f"unknown key {path}.{sorted(d)[0]}")


def _number(value, path, positive=False):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path} must be a number")
    if positive and value <= 0:
        raise ConfigError(f"{path} must be positive")
    return float(value)


def _integer(value, path, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{path} must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path} must be at least {minimum}")
    return value


@dataclass
class MeshSpec:
    x0_mm: float
    y0_mm: float
    axial_mm: float
    lateral_mm: float
    nx: int
    ny: int

    @classmethod
    def from_dict(cls, d: dict, path: str, default_origin=(0.0, 0.0)):
        d = dict(d)
        out = cls(
            x0_mm=_number(_take(d, path, "x0_mm", default_origin[0]), f"{path}.x0_mm"),
            y0_mm=_number(_take(d, path, "y0_mm", default_origin[1]), f"{path}.y0_mm"),
            axial_mm=_number(_take(d, path, "axial_mm", required=True),
                             f"{path}.axial_mm", positive=True),
            lateral_mm=_number(_take(d, path, "lateral_mm", required=True),
                               f"{path}.lateral_mm", positive=True),
            nx=_integer(_take(d, path, "nx", required=True), f"{path}.nx", 1),
            ny=_integer(_take(d, path, "ny", required=True), f"{path}.ny", 1),
        )
        _reject_unknown(d, path)
        return out

    def build(self):
        from .mesh import build_structured_mesh

        return build_structured_mesh(
            self.axial_mm, self.lateral_mm, self.nx, self.ny,
            origin=(self.x0_mm, self.y0_mm),
        )


@dataclass
class InclusionSpec:
    center_axial_mm: float
    center_lateral_mm: float
    radius_mm: float

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        out = cls(
            _number(_take(d, path, "center_axial_mm", required=True),
                    f"{path}.center_axial_mm"),
            _number(_take(d, path, "center_lateral_mm", required=True),
                    f"{path}.center_lateral_mm"),
            _number(_take(d, path, "radius_mm", required=True),
                    f"{path}.radius_mm", positive=True),
        )
        _reject_unknown(d, path)
        return out

    def disk(self) -> Disk:
        return Disk((self.center_axial_mm, self.center_lateral_mm), self.radius_mm)


@dataclass
class MaterialSpec:
    mode: str
    background_mpa: float
    inclusion_mpa: float
    poisson_ratio: float
    inclusion: InclusionSpec

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        mode = _take(d, path, "mode", PLANE_STRESS)
        if mode not in (PLANE_STRAIN, PLANE_STRESS):
            raise ConfigError(f"{path}.mode must be plane_strain or plane_stress")
        inc = _take(d, path, "inclusion", required=True)
        out = cls(
            mode=mode,
            background_mpa=_number(_take(d, path, "background_mpa", 10.0),
                                   f"{path}.background_mpa", positive=True),
            inclusion_mpa=_number(_take(d, path, "inclusion_mpa", 40.0),
                                  f"{path}.inclusion_mpa", positive=True),
            poisson_ratio=_number(_take(d, path, "poisson_ratio", 0.495),
                                  f"{path}.poisson_ratio"),
            inclusion=InclusionSpec.from_dict(inc, f"{path}.inclusion"),
        )
        _reject_unknown(d, path)
        return out


@dataclass
class CompressionSpec:
    platen_halfwidth_mm: float
    displacement_mm: float

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        out = cls(
            _number(_take(d, path, "platen_halfwidth_mm", required=True),
                    f"{path}.platen_halfwidth_mm", positive=True),
            _number(_take(d, path, "displacement_mm", 0.5),
                    f"{path}.displacement_mm", positive=True),
        )
        _reject_unknown(d, path)
        return out


@dataclass
class RegionSpec:
    x0_mm: float
    y0_mm: float
    axial_mm: float
    lateral_mm: float

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        out = cls(
            _number(_take(d, path, "x0_mm", required=True), f"{path}.x0_mm"),
            _number(_take(d, path, "y0_mm", required=True), f"{path}.y0_mm"),
            _number(_take(d, path, "axial_mm", required=True),
                    f"{path}.axial_mm", positive=True),
            _number(_take(d, path, "lateral_mm", required=True),
                    f"{path}.lateral_mm", positive=True),
        )
        _reject_unknown(d, path)
        return out

    def rect(self) -> Rect:
        return Rect(self.x0_mm, self.y0_mm, self.axial_mm, self.lateral_mm)


@dataclass
class ImagingSpec:
    region: RegionSpec
    psf: Psf
    sampling_frequency_mhz: float
    lateral_spacing_mm: float
    scatterer_density_per_mm2: float
    scatterer_margin_mm: float
    inclusion_gain: float
    snr_db: float | None
    seed: int

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        region = RegionSpec.from_dict(_take(d, path, "region", required=True),
                                      f"{path}.region")
        psf_d = dict(_take(d, path, "psf", {}) or {})
        psf = Psf(
            center_frequency=_number(_take(psf_d, f"{path}.psf",
                                           "center_frequency_mhz", 5.5),
                                     f"{path}.psf.center_frequency_mhz", True),
            pulse_length=_number(_take(psf_d, f"{path}.psf", "pulse_length_us", 0.43),
                                 f"{path}.psf.pulse_length_us", True),
            lateral_fwhm=_number(_take(psf_d, f"{path}.psf", "lateral_fwhm_mm", 1.4),
                                 f"{path}.psf.lateral_fwhm_mm", True),
            sound_speed=_number(_take(psf_d, f"{path}.psf", "sound_speed_m_s", 1540.0),
                                f"{path}.psf.sound_speed_m_s", True),
        )
        _reject_unknown(psf_d, f"{path}.psf")
        snr = _take(d, path, "snr_db", 12.0)
        if snr is not None:
            snr = _number(snr, f"{path}.snr_db")
        out = cls(
            region=region,
            psf=psf,
            sampling_frequency_mhz=_number(
                _take(d, path, "sampling_frequency_mhz", 40.0),
                f"{path}.sampling_frequency_mhz", True),
            lateral_spacing_mm=_number(_take(d, path, "lateral_spacing_mm", 0.3),
                                       f"{path}.lateral_spacing_mm", True),
            scatterer_density_per_mm2=_number(
                _take(d, path, "scatterer_density_per_mm2", 30.0),
                f"{path}.scatterer_density_per_mm2", True),
            scatterer_margin_mm=_number(_take(d, path, "scatterer_margin_mm", 1.0),
                                        f"{path}.scatterer_margin_mm"),
            inclusion_gain=_number(_take(d, path, "inclusion_gain", 2.0),
                                   f"{path}.inclusion_gain", True),
            snr_db=snr,
            seed=_integer(_take(d, path, "seed", required=True), f"{path}.seed"),
        )
        _reject_unknown(d, path)
        return out

    def grid(self):
        from .ussim import ImageGrid

        return ImageGrid.for_region(
            self.region.rect(), self.sampling_frequency_mhz,
            self.lateral_spacing_mm, self.psf.sound_speed,
        )


@dataclass
class SequenceSpec:
    n_frames: int
    mean_step_strain: float

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        out = cls(
            n_frames=_integer(_take(d, path, "n_frames", 20), f"{path}.n_frames", 2),
            mean_step_strain=_number(_take(d, path, "mean_step_strain", 0.004),
                                     f"{path}.mean_step_strain", positive=True),
        )
        _reject_unknown(d, path)
        return out


def _regularizer_from_dict(d: dict, path: str) -> RegularizerSpec:
    d = dict(d)
    kind = _take(d, path, "kind", required=True)
    if kind not in KINDS:
        raise ConfigError(f"{path}.kind must be one of {', '.join(KINDS)}")
    alpha = _take(d, path, "alpha", DEFAULT_ALPHA[kind])
    spec = RegularizerSpec(
        kind=kind,
        alpha=_number(alpha, f"{path}.alpha", positive=True),
        alpha_i=(
            _number(d.pop("alpha_i"), f"{path}.alpha_i", positive=True)
            if "alpha_i" in d else None
        ),
        lambda_bar=(
            _number(d.pop("lambda_bar"), f"{path}.lambda_bar", positive=True)
            if "lambda_bar" in d else None
        ),
        delta=_number(_take(d, path, "delta", 1e-8), f"{path}.delta", positive=True),
    )
    _reject_unknown(d, path)
    return spec


def default_regularizers() -> list:
    return [RegularizerSpec(kind, DEFAULT_ALPHA[kind]) for kind in KINDS]


@dataclass
class RegistrationSpec:
    mesh: MeshSpec
    regularizers: list
    init_policy: str
    max_iterations: int
    step_tol: float
    pair: tuple
    block_match: BlockMatchConfig

    @classmethod
    def from_dict(cls, d: dict, path: str):
        from .registration import INIT_POLICIES

        d = dict(d)
        mesh = MeshSpec.from_dict(_take(d, path, "mesh", required=True),
                                  f"{path}.mesh")
        regs_raw = _take(d, path, "regularizers", None)
        if regs_raw is None:
            regs = default_regularizers()
        else:
            regs = [
                _regularizer_from_dict(r, f"{path}.regularizers[{i}]")
                for i, r in enumerate(regs_raw)
            ]
        policy = _take(d, path, "init_policy", "auto")
        if policy not in INIT_POLICIES:
            raise ConfigError(
                f"{path}.init_policy must be one of {', '.join(INIT_POLICIES)}"
            )
        pair_raw = _take(d, path, "pair", [0, 2])
        if (not isinstance(pair_raw, (list, tuple)) or len(pair_raw) != 2
                or pair_raw[0] == pair_raw[1]):
            raise ConfigError(f"{path}.pair must be two distinct frame indices")
        bm_raw = dict(_take(d, path, "block_match", {}) or {})
        bpath = f"{path}.block_match"
        radius = _take(bm_raw, bpath, "search_radius_px", None)
        if radius is not None:
            radius = tuple(int(r) for r in radius)
        bm = BlockMatchConfig(
            window_axial=_number(_take(bm_raw, bpath, "window_axial_mm", 5.0),
                                 f"{bpath}.window_axial_mm", True),
            window_lateral=_number(_take(bm_raw, bpath, "window_lateral_mm", 9.0),
                                   f"{bpath}.window_lateral_mm", True),
            overlap_axial=_number(_take(bm_raw, bpath, "overlap_axial", 0.25),
                                  f"{bpath}.overlap_axial"),
            overlap_lateral=_number(_take(bm_raw, bpath, "overlap_lateral", 0.40),
                                    f"{bpath}.overlap_lateral"),
            search_radius=radius,
            median_filter=tuple(
                _take(bm_raw, bpath, "median_filter", [5, 5])
            ),
        )
        _reject_unknown(bm_raw, bpath)
        out = cls(
            mesh=mesh,
            regularizers=regs,
            init_policy=policy,
            max_iterations=_integer(_take(d, path, "max_iterations", 20),
                                    f"{path}.max_iterations", 1),
            step_tol=_number(_take(d, path, "step_tol", 1e-3),
                             f"{path}.step_tol", positive=True),
            pair=(int(pair_raw[0]), int(pair_raw[1])),
            block_match=bm,
        )
        _reject_unknown(d, path)
        return out


@dataclass
class SweepCase:
    name: str
    inclusion_mpa: float


@dataclass
class SweepSpec:
    alpha_min_exponent: float
    alpha_max_exponent: float
    points_per_decade: int
    cases: list

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        cases_raw = _take(d, path, "cases", None)
        cases = []
        if cases_raw:
            for i, c in enumerate(cases_raw):
                c = dict(c)
                cpath = f"{path}.cases[{i}]"
                name = _take(c, cpath, "name", required=True)
                e = _number(_take(c, cpath, "inclusion_mpa", required=True),
                            f"{cpath}.inclusion_mpa", positive=True)
                _reject_unknown(c, cpath)
                cases.append(SweepCase(str(name), e))
        out = cls(
            alpha_min_exponent=_number(_take(d, path, "alpha_min_exponent", -6),
                                       f"{path}.alpha_min_exponent"),
            alpha_max_exponent=_number(_take(d, path, "alpha_max_exponent", 6),
                                       f"{path}.alpha_max_exponent"),
            points_per_decade=_integer(_take(d, path, "points_per_decade", 1),
                                       f"{path}.points_per_decade", 1),
            cases=cases,
        )
        if out.alpha_min_exponent > out.alpha_max_exponent:
            raise ConfigError(f"{path}: alpha exponent range is empty")
        _reject_unknown(d, path)
        return out

    def alphas(self):
        import numpy as np

        n = int(
            round(
                (self.alpha_max_exponent - self.alpha_min_exponent)
                * self.points_per_decade
            )
        ) + 1
        return list(
            np.logspace(self.alpha_min_exponent, self.alpha_max_exponent, n)
        )


@dataclass
class MetricsSpec:
    roi: InclusionSpec | None

    @classmethod
    def from_dict(cls, d: dict, path: str):
        d = dict(d)
        roi_raw = _take(d, path, "roi", None)
        roi = None
        if roi_raw is not None:
            roi_raw = dict(roi_raw)
            kind = _take(roi_raw, f"{path}.roi", "kind", "disk")
            if kind != "disk":
                raise ConfigError(f"{path}.roi.kind: only 'disk' is supported")
            roi = InclusionSpec.from_dict(roi_raw, f"{path}.roi")
        _reject_unknown(d, path)
        return cls(roi=roi)


@dataclass
class ExperimentConfig:
    domain: MeshSpec
    material: MaterialSpec
    compression: CompressionSpec
    imaging: ImagingSpec
    sequence: SequenceSpec
    registration: RegistrationSpec
    sweep: SweepSpec
    metrics: MetricsSpec
    output_dir: str

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        d = dict(raw)
        domain = MeshSpec.from_dict(_take(d, "config", "domain", required=True),
                                    "domain")
        material = MaterialSpec.from_dict(
            _take(d, "config", "material", required=True), "material")
        compression = CompressionSpec.from_dict(
            _take(d, "config", "compression", required=True), "compression")
        imaging = ImagingSpec.from_dict(
            _take(d, "config", "imaging", required=True), "imaging")
        sequence = SequenceSpec.from_dict(
            _take(d, "config", "sequence", {}) or {}, "sequence")
        registration = RegistrationSpec.from_dict(
            _take(d, "config", "registration", required=True), "registration")
        sweep = SweepSpec.from_dict(_take(d, "config", "sweep", {}) or {}, "sweep")
        metrics = MetricsSpec.from_dict(
            _take(d, "config", "metrics", {}) or {}, "metrics")
        output_raw = dict(_take(d, "config", "output", {}) or {})
        out_dir = _take(output_raw, "output", "dir", "out")
        _reject_unknown(output_raw, "output")
        _reject_unknown(d, "config")
        cfg = cls(domain, material, compression, imaging, sequence,
                  registration, sweep, metrics, str(out_dir))
        cfg.validate_geometry()
        return cfg

    def validate_geometry(self):
        dom = self.domain
        img = self.imaging.region
        if (img.x0_mm < dom.x0_mm - 1e-9
                or img.y0_mm < dom.y0_mm - 1e-9
                or img.x0_mm + img.axial_mm > dom.x0_mm + dom.axial_mm + 1e-9
                or img.y0_mm + img.lateral_mm > dom.y0_mm + dom.lateral_mm + 1e-9):
            raise ConfigError("imaging.region must lie inside the domain")
        rm = self.registration.mesh
        if (rm.x0_mm < img.x0_mm - 1e-9
                or rm.y0_mm < img.y0_mm - 1e-9
                or rm.x0_mm + rm.axial_mm > img.x0_mm + img.axial_mm + 1e-9
                or rm.y0_mm + rm.lateral_mm > img.y0_mm + img.lateral_mm + 1e-9):
            raise ConfigError("registration.mesh must lie inside imaging.region")
        pair = self.registration.pair
        if not (0 <= pair[0] < self.sequence.n_frames
                and 0 <= pair[1] < self.sequence.n_frames):
            raise ConfigError("registration.pair indices exceed sequence.n_frames")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw or {})
