"""Scenario and run configuration: JSON schema, defaults, presets."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional

import jsonschema

from . import sim
from .degeneracy import Thresholds
from .inertial import NoiseParams

SCENARIO_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "duration": {"type": "number", "exclusiveMinimum": 0},
        "environment": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["box", "corridor", "tunnel", "plane"]},
                "size": {"type": "array", "items": {"type": "number"}, "minItems": 3,
                         "maxItems": 3},
                "radius": {"type": "number", "exclusiveMinimum": 0},
                "length": {"type": "number", "exclusiveMinimum": 0},
                "curvature": {"type": "number"},
                "density": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "trajectory": {
            "type": "object",
            "properties": {
                "profile": {"enum": ["twist", "sinusoid"]},
                "segments": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "properties": {
                            "duration": {"type": "number", "exclusiveMinimum": 0},
                            "omega": {"type": "array", "items": {"type": "number"},
                                      "minItems": 3, "maxItems": 3},
                            "vel": {"type": "array", "items": {"type": "number"},
                                    "minItems": 3, "maxItems": 3},
                        },
                        "required": ["duration"],
                        "additionalProperties": False,
                    },
                },
                "start_pos": {"type": "array", "items": {"type": "number"},
                              "minItems": 3, "maxItems": 3},
                "sin_amplitude": {"type": "array", "items": {"type": "number"},
                                  "minItems": 3, "maxItems": 3},
                "sin_frequency": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "imu": {
            "type": "object",
            "properties": {
                "rate": {"type": "number", "exclusiveMinimum": 0},
                "gyro_noise": {"type": "number", "exclusiveMinimum": 0},
                "accel_noise": {"type": "number", "exclusiveMinimum": 0},
                "gyro_bias_walk": {"type": "number", "exclusiveMinimum": 0},
                "accel_bias_walk": {"type": "number", "exclusiveMinimum": 0},
                "init_bias_gyro": {"type": "array", "items": {"type": "number"},
                                   "minItems": 3, "maxItems": 3},
                "init_bias_accel": {"type": "array", "items": {"type": "number"},
                                    "minItems": 3, "maxItems": 3},
            },
            "additionalProperties": False,
        },
        "lidar": {
            "type": "object",
            "properties": {
                "rate": {"type": "number", "exclusiveMinimum": 0},
                "points_per_scan": {"type": "integer", "minimum": 10},
                "range_sigma": {"type": "number", "minimum": 0},
                "max_range": {"type": "number", "exclusiveMinimum": 0},
                "meas_sigma": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "aux_odometry": {
            "type": "object",
            "properties": {
                "enabled": {"type": "boolean"},
                "rate": {"type": "number", "exclusiveMinimum": 0},
                "sigma_rot": {"type": "number", "exclusiveMinimum": 0},
                "sigma_trans": {"type": "number", "exclusiveMinimum": 0},
                "latency": {"type": "number", "minimum": 0},
                "outliers": {
                    "type": "object",
                    "properties": {
                        "probability": {"type": "number", "minimum": 0,
                                        "exclusiveMaximum": 1},
                        "trans_magnitude": {"type": "number", "minimum": 0},
                        "rot_magnitude": {"type": "number", "minimum": 0},
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "map": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["surfaces", "sampled", "slam"]},
                "voxel": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULT_SCENARIO = {
    "name": "box",
    "seed": 0,
    "duration": 20.0,
    "environment": {"kind": "box", "size": [10.0, 10.0, 3.0], "radius": 3.0,
                    "length": 60.0, "curvature": 0.0, "density": 10.0},
    "trajectory": {
        "profile": "twist",
        "segments": [{"duration": 20.0, "omega": [0.0, 0.0, 0.3],
                      "vel": [0.5, 0.0, 0.0]}],
        "start_pos": [0.0, 0.0, 1.2],
        "sin_amplitude": [0.0, 0.0, 0.0],
        "sin_frequency": 0.5,
    },
    "imu": {"rate": 200.0, "gyro_noise": 1e-3, "accel_noise": 1e-2,
            "gyro_bias_walk": 1e-5, "accel_bias_walk": 5e-5,
            "init_bias_gyro": [0.0, 0.0, 0.0], "init_bias_accel": [0.0, 0.0, 0.0]},
    "lidar": {"rate": 10.0, "points_per_scan": 600, "range_sigma": 0.01,
              "max_range": 60.0, "meas_sigma": 0.02},
    "aux_odometry": {"enabled": True, "rate": 10.0, "sigma_rot": 0.002,
                     "sigma_trans": 0.01, "latency": 0.0,
                     "outliers": {"probability": 0.0, "trans_magnitude": 20.0,
                                  "rot_magnitude": 0.5}},
    "map": {"mode": "slam", "voxel": 0.2},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_scenario(source) -> dict:
    """Load, validate and default-fill a scenario from a path, file or dict."""
    if isinstance(source, dict):
        raw = source
    else:
        with open(source) as f:
            raw = json.load(f)
    jsonschema.validate(raw, SCENARIO_SCHEMA)
    merged = _deep_merge(DEFAULT_SCENARIO, raw)
    # The trajectory must cover the requested duration.
    total = sum(s["duration"] for s in merged["trajectory"]["segments"])
    if total + 1e-9 < merged["duration"]:
        raise ValueError("trajectory segments shorter than scenario duration")
    return merged


def scenario_objects(cfg: dict):
    """Instantiate simulator objects from a validated scenario dict."""
    env = sim.Environment(
        kind=cfg["environment"]["kind"],
        size=tuple(cfg["environment"]["size"]),
        radius=cfg["environment"]["radius"],
        length=cfg["environment"]["length"],
        curvature=cfg["environment"]["curvature"],
        density=cfg["environment"]["density"],
    )
    tr = cfg["trajectory"]
    segments = tuple(
        sim.TwistSegment(s["duration"], tuple(s.get("omega", (0, 0, 0))),
                         tuple(s.get("vel", (0, 0, 0))))
        for s in tr["segments"]
    )
    spec = sim.TrajectorySpec(
        segments=segments,
        profile=tr["profile"],
        sin_amplitude=tuple(tr["sin_amplitude"]),
        sin_frequency=tr["sin_frequency"],
        start_pos=tuple(tr["start_pos"]),
        imu_rate=cfg["imu"]["rate"],
        scan_rate=cfg["lidar"]["rate"],
    )
    noise = NoiseParams(
        gyro_noise=cfg["imu"]["gyro_noise"],
        accel_noise=cfg["imu"]["accel_noise"],
        gyro_bias_walk=cfg["imu"]["gyro_bias_walk"],
        accel_bias_walk=cfg["imu"]["accel_bias_walk"],
    )
    return env, sim.Trajectory(spec), noise


@dataclass
class RunConfig:
    """One experiment: scenario plus estimator toggles and tuning."""

    scenario: dict
    constraints_enabled: bool = True
    gnc_enabled: bool = True
    backend_prior_enabled: bool = True
    thresholds: Thresholds = field(default_factory=Thresholds)
    window: float = 1.0
    out_dir: Optional[str] = None
    seed_override: Optional[int] = None

    @property
    def seed(self) -> int:
        return self.scenario["seed"] if self.seed_override is None else self.seed_override


PRESETS = {
    "box": {},
    "corridor": {
        "name": "corridor",
        "duration": 20.0,
        "environment": {"kind": "corridor", "size": [40.0, 4.0, 3.0], "length": 40.0},
        "trajectory": {
            "segments": [{"duration": 20.0, "omega": [0.0, 0.0, 0.0],
                          "vel": [1.2, 0.0, 0.0]}],
            "start_pos": [0.0, 0.0, 1.2],
        },
        "lidar": {"max_range": 25.0},
    },
    "tunnel": {
        "name": "tunnel",
        "duration": 60.0,
        "environment": {"kind": "tunnel", "radius": 3.0, "length": 80.0,
                        "curvature": 0.005, "density": 6.0},
        "trajectory": {
            "segments": [{"duration": 60.0, "omega": [0.0, 0.0, 0.006],
                          "vel": [1.2, 0.0, 0.0]}],
            "start_pos": [0.0, 0.0, 0.0],
        },
        "imu": {"init_bias_accel": [0.05, -0.02, 0.03],
                "init_bias_gyro": [2e-4, -1e-4, 3e-4]},
        "lidar": {"max_range": 25.0},
    },
    "plane": {
        "name": "plane",
        "duration": 15.0,
        "environment": {"kind": "plane", "length": 60.0, "density": 4.0},
        "trajectory": {
            "segments": [{"duration": 15.0, "omega": [0.0, 0.0, 0.1],
                          "vel": [1.0, 0.0, 0.0]}],
            "start_pos": [0.0, 0.0, 1.5],
        },
        "lidar": {"max_range": 30.0},
    },
}


def preset_scenario(kind: str) -> dict:
    if kind not in PRESETS:
        raise ValueError(f"unknown scenario preset {kind!r}")
    return load_scenario(_deep_merge(DEFAULT_SCENARIO, PRESETS[kind]))
