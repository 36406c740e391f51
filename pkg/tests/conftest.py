"""Shared fixtures: a fast mini experiment config for pipeline tests."""

import copy

import pytest

MINI_CONFIG = {
    "domain": {"axial_mm": 10.0, "lateral_mm": 12.0, "nx": 10, "ny": 12},
    "material": {
        "mode": "plane_stress",
        "background_mpa": 10.0,
        "inclusion_mpa": 40.0,
        "poisson_ratio": 0.495,
        "inclusion": {"center_axial_mm": 4.0, "center_lateral_mm": 6.0,
                      "radius_mm": 1.5},
    },
    "compression": {"platen_halfwidth_mm": 4.0, "displacement_mm": 0.2},
    "imaging": {
        "region": {"x0_mm": 1.0, "y0_mm": 2.5, "axial_mm": 6.0, "lateral_mm": 7.0},
        "seed": 11,
        "snr_db": 12.0,
        "scatterer_margin_mm": 1.0,
    },
    "sequence": {"n_frames": 3, "mean_step_strain": 0.004},
    "registration": {
        "mesh": {"x0_mm": 1.3, "y0_mm": 2.8, "axial_mm": 5.4, "lateral_mm": 6.4,
                 "nx": 5, "ny": 6},
        "pair": [0, 2],
        "block_match": {"window_axial_mm": 1.5, "window_lateral_mm": 2.4,
                        "search_radius_px": [15, 4]},
    },
    "sweep": {"alpha_min_exponent": 0, "alpha_max_exponent": 0},
    "metrics": {"roi": {"center_axial_mm": 4.0, "center_lateral_mm": 6.0,
                        "radius_mm": 1.5}},
}


@pytest.fixture()
def mini_config_dict():
    return copy.deepcopy(MINI_CONFIG)


@pytest.fixture()
def mini_config(mini_config_dict):
    from elastoreg.config import ExperimentConfig

    return ExperimentConfig.from_dict(mini_config_dict)


@pytest.fixture()
def mini_config_file(tmp_path, mini_config_dict):
    import yaml

    path = tmp_path / "mini.yaml"
    path.write_text(yaml.safe_dump(mini_config_dict))
    return path
