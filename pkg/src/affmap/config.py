"""JSON run configuration. Unknown keys are rejected at every level."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

EXPERIMENTS = ("fit-pinv", "swissroll", "mse-affine", "texture-gan")
VARIANTS = {
    "fit-pinv": (),
    "swissroll": ("MSE", "MAE", "AffGAN", "SoftGAN", "AffDG", "SoftDG"),
    "mse-affine": ("MSE-fixedproj", "MSE-trainproj", "MSE-randproj", "MSE-noproj"),
    "texture-gan": ("AffGAN", "AffMSE"),
}


class ConfigError(ValueError):
    pass


@dataclass
class OptimSection:
    algorithm: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    batch_size: int = 256
    iterations: int = 20000
    lr_decay: str = "none"        # none | linear (generator only, to zero at the last iteration)


@dataclass
class OperatorSection:
    mode: str = "conv"            # conv | matrix (toy average)
    stride: int = 4
    kernel_size: int = 9
    sigma_blur: float = 0.9
    image_size: int = 32
    pinv_kernel_size: int = 5
    pinv_samples: int = 32
    pinv_iterations: int = 3000
    pinv_lr: float = 1e-3
    pinv_momentum: float = 0.9
    pinv_seed: int = 0
    blob_dtype: str = "float32"
    pinv_path: str = ""           # reuse a fitted operator manifest instead of fitting


@dataclass
class InstanceNoiseSection:
    family: str = "constant"
    sigma_start: float = 0.0
    sigma_end: float = 0.0
    target: float = 1.25


@dataclass
class DenoiserSection:
    sigma_start: float = 0.5
    sigma_end: float = 0.25
    levels: int = 3
    hidden: int = 256
    iterations: int = 9000
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    fallback_radius: float = 0.0  # defer to a coarser checkpoint when |f(y) - y| > radius * sigma; 0 = off


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    soft_weight: float = 10.0
    k_d: int = 1
    disc_lr: float = 1e-3
    channels: int = 16
    z_dim: int = 0


@dataclass
class EvalSection:
    grid_points: int = 401
    grid_lo: float = -8.0
    grid_hi: float = 8.0
    grid_weight_samples: int = 2_000_000
    kde_points: int = 50_000
    kde_seed: int = 0
    log_every: int = 500


@dataclass
class DataSection:
    source: str = "procedural"    # procedural | path to a directory of PGM files
    n_images: int = 256
    image_size: int = 32
    data_seed: int = 0


@dataclass
class RunConfig:
    experiment: str
    output_dir: str = "runs/out"
    variants: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    dtype: str = "float64"
    optimizer: OptimSection = field(default_factory=OptimSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    instance_noise: InstanceNoiseSection = field(default_factory=InstanceNoiseSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    overrides: dict = field(default_factory=dict)  # variant -> {section: {key: value}}

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        allowed = VARIANTS[self.experiment]
        if not self.variants:
            self.variants = list(allowed)
        bad = [v for v in self.variants if v not in allowed]
        if bad:
            raise ConfigError(f"variants {bad} not valid for {self.experiment}; choose from {allowed}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.operator.mode not in ("conv", "matrix"):
            raise ConfigError("operator.mode must be conv or matrix")
        if self.optimizer.lr_decay not in ("none", "linear"):
            raise ConfigError("optimizer.lr_decay must be none or linear")
        if self.optimizer.lr <= 0 or self.optimizer.batch_size < 1 or self.optimizer.iterations < 0:
            raise ConfigError("optimizer needs lr > 0, batch_size >= 1, iterations >= 0")
        if self.model.soft_weight < 0 or self.model.k_d < 1:
            raise ConfigError("model needs soft_weight >= 0 and k_d >= 1")
        bad = sorted(set(self.overrides) - set(allowed))
        if bad:
            raise ConfigError(f"overrides for unknown variants {bad}")
        for v in self.overrides:
            self.for_variant(v)

    def to_dict(self):
        return dataclasses.asdict(self)

    def for_variant(self, variant):
        """Copy of this config with the variant's overrides merged in (no further overrides)."""
        patch = self.overrides.get(variant)
        if not patch:
            return self
        if not isinstance(patch, dict):
            raise ConfigError(f"overrides.{variant}: expected an object")
        base = self.to_dict()
        base["overrides"] = {}
        for section, values in patch.items():
            if section not in base or not isinstance(base[section], dict):
                raise ConfigError(f"overrides.{variant}: unknown section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"overrides.{variant}.{section}: expected an object")
            base[section] = {**base[section], **values}
        try:
            return config_from_dict(base)
        except ConfigError as exc:
            raise ConfigError(f"overrides.{variant}: {exc}") from None


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kwargs[k] = _build(t, v, f"{where}{k}.")
        elif t is tuple:
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(data)
