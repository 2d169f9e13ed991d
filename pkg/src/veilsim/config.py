"""Experiment configuration: one JSON file, one section per stage.

Loading is strict: unknown keys are rejected, hyperparameters are checked
against their documented ranges, and referenced paths must resolve. The
``VEILSIM_OUTPUT_ROOT`` environment variable overrides ``output_root``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass
class ImageConfig:
    size: int = 128
    channels: int = 3


@dataclass
class ScheduleConfig:
    T_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 10


@dataclass
class SimulateConfig:
    grid_rows: int = 4
    grid_cols: int = 4
    kernel_size: int = 11
    severity: float = 0.7
    glare_strength: float = 0.7
    map_downscale: int = 4
    n_source_train: int = 24
    n_source_test: int = 8
    n_target_train: int = 50
    n_target_test: int = 10
    clean_dir: str | None = None


@dataclass
class GeneratorConfig:
    iters: int = 2000
    batch_size: int = 4
    lr: float = 1e-5
    p_source: float = 0.3
    crop: int = 64
    base_width: int = 32
    emb_dim: int = 64


@dataclass
class PairsConfig:
    count: int = 32
    n_clean: int | None = None
    w: float = 0.85
    t_star: int = 0


@dataclass
class DistillConfig:
    iters: int = 1500
    batch_size: int = 4
    lr_start: float = 2e-4
    lr_end: float = 1e-7
    crop: int = 96
    base_width: int = 24


@dataclass
class RestorerConfig:
    phase1_iters: int = 1500
    phase2_iters: int = 600
    batch_size: int = 4
    lr_phase1: float = 2e-4
    lr_phase2: float = 5e-5
    lr_end: float = 1e-7
    crop: int = 96
    base_width: int = 32
    lambda_rev: float = 1.0
    lambda_perc: float = 0.1
    lambda_source_maps: float = 0.05


@dataclass
class SweepConfig:
    n_values: list = field(default_factory=lambda: [0, 5, 15, 25, 50])


@dataclass
class CalibrationConfig:
    csv_path: str | None = None
    output_json: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_root: str = "runs/default"
    latent_space: str = "identity"  # or "conv4x"
    image: ImageConfig = field(default_factory=ImageConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    pairs: PairsConfig = field(default_factory=PairsConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    restorer: RestorerConfig = field(default_factory=RestorerConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "ExperimentConfig":
        return config_from_dict(self.to_dict())


_SECTIONS = {
    "image": ImageConfig,
    "schedule": ScheduleConfig,
    "simulate": SimulateConfig,
    "generator": GeneratorConfig,
    "pairs": PairsConfig,
    "distill": DistillConfig,
    "restorer": RestorerConfig,
    "sweep": SweepConfig,
    "calibration": CalibrationConfig,
}


def _build_section(cls, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> "ExperimentConfig":
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            section = data.pop(name)
            if not isinstance(section, dict):
                raise ConfigurationError(f"section {name!r} must be an object")
            kwargs[name] = _build_section(cls, section, name)
    top_known = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(data) - top_known
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs.update(data)
    cfg = ExperimentConfig(**kwargs)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    def require(cond, msg):
        if not cond:
            raise ConfigurationError(msg)

    require(cfg.latent_space in ("identity", "conv4x"), f"unknown latent_space {cfg.latent_space!r}")
    require(cfg.image.size >= 16, "image.size must be >= 16")
    require(cfg.image.channels in (1, 3), "image.channels must be 1 or 3")
    sc = cfg.schedule
    require(sc.T_steps >= 1, "schedule.T_steps must be >= 1")
    require(0.0 < sc.beta_start <= sc.beta_end < 1.0, "need 0 < beta_start <= beta_end < 1")
    require(1 <= sc.sample_steps <= sc.T_steps, "sample_steps must be in [1, T_steps]")
    sim = cfg.simulate
    require(sim.kernel_size >= 3 and sim.kernel_size % 2 == 1, "kernel_size must be odd >= 3")
    require(0.0 <= sim.severity <= 1.0, "severity must be in [0, 1]")
    require(0.0 <= sim.glare_strength <= 1.0, "glare_strength must be in [0, 1]")
    require(sim.map_downscale >= 1, "map_downscale must be >= 1")
    require(
        cfg.image.size % sim.grid_rows == 0 and cfg.image.size % sim.grid_cols == 0,
        "patch grid must tile the image exactly",
    )
    require(0.0 <= cfg.generator.p_source <= 1.0, "generator.p_source must be in [0, 1]")
    require(0.0 <= cfg.pairs.w <= 1.0, "pairs.w must be in [0, 1]")
    require(cfg.pairs.t_star >= 0, "pairs.t_star must be >= 0")
    require(cfg.pairs.t_star <= sc.T_steps, "pairs.t_star must be <= T_steps")
    r = cfg.restorer
    require(r.lambda_rev >= 0.0, "lambda_rev must be >= 0")
    require(r.lambda_perc >= 0.0, "lambda_perc must be >= 0")
    require(r.lambda_source_maps >= 0.0, "lambda_source_maps must be >= 0")
    require(all(n >= 0 for n in cfg.sweep.n_values), "sweep.n_values must be >= 0")
    if sim.clean_dir is not None:
        require(os.path.isdir(sim.clean_dir), f"clean_dir does not exist: {sim.clean_dir}")
    for name in ("csv_path",):
        path = getattr(cfg.calibration, name)
        if path is not None:
            require(os.path.exists(path), f"calibration.{name} does not exist: {path}")


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    cfg = config_from_dict(data)
    root = os.environ.get("VEILSIM_OUTPUT_ROOT")
    if root:
        cfg.output_root = root
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of a config."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like section.key=value: {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = data
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigurationError(f"unknown config section in override: {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigurationError(f"unknown config key in override: {dotted!r}")
        try:
            node[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[keys[-1]] = raw
    return config_from_dict(data)


def smoke_profile() -> ExperimentConfig:
    """Every stage in minutes on a laptop CPU; for end-to-end checks only."""
    return config_from_dict(
        {
            "seed": 0,
            "output_root": "runs/smoke",
            "image": {"size": 64},
            "schedule": {"T_steps": 50, "beta_start": 0.002, "beta_end": 0.32, "sample_steps": 10},
            "simulate": {
                "grid_rows": 2,
                "grid_cols": 2,
                "kernel_size": 7,
                "n_source_train": 10,
                "n_source_test": 4,
                "n_target_train": 8,
                "n_target_test": 4,
            },
            "generator": {"iters": 300, "batch_size": 4, "lr": 1e-3, "crop": 48},
            "pairs": {"count": 8},
            "distill": {"iters": 300, "crop": 64},
            "restorer": {"phase1_iters": 300, "phase2_iters": 150, "crop": 64},
            "sweep": {"n_values": [0, 2]},
        }
    )


def desk_profile() -> ExperimentConfig:
    """Desk-scale profile: 128x128 oracle domain, directional adaptation runs."""
    return config_from_dict(
        {
            "seed": 0,
            "output_root": "runs/desk",
            "image": {"size": 128},
            "schedule": {"T_steps": 250, "beta_start": 0.0005, "beta_end": 0.08, "sample_steps": 10},
            "simulate": {
                "grid_rows": 4,
                "grid_cols": 4,
                "kernel_size": 11,
                "n_source_train": 24,
                "n_source_test": 8,
                "n_target_train": 50,
                "n_target_test": 10,
            },
            "generator": {"iters": 1200, "batch_size": 4, "lr": 1e-3, "crop": 64},
            "pairs": {"count": 24},
            "distill": {"iters": 800, "crop": 96},
            "restorer": {"phase1_iters": 1200, "phase2_iters": 500, "crop": 96},
            "sweep": {"n_values": [0, 5, 15, 50]},
        }
    )


PROFILES = {"smoke": smoke_profile, "desk": desk_profile}
