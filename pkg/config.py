#!/usr/bin/env python3
"""
config.py - Configuration, logging and runtime set-up

Strict YAML configuration parsed into nested dataclasses (unknown keys are
rejected with their dotted path), environment overrides for output paths,
logging set-up and thread limits. Builders turn sections into the objects
the pipeline modules expect; heavy modules are imported lazily so thread
settings take effect before JAX loads.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional

import yaml


class ConfigError(ValueError):
    """Raised for unknown keys, wrong types or invalid values in a configuration."""


def setup_logging(log_dir: str = "logs", name: str = "hint") -> None:
    """Set up logging configuration."""
    os.makedirs(log_dir, exist_ok=True)

    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(f"{log_dir}/{name}.log"),
            logging.StreamHandler()
        ]
    )


def configure_threads(n: int) -> None:
    """Cap XLA and BLAS threads; must run before jax or numpy do heavy work."""
    n = max(1, int(n))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    flags = os.environ.get("XLA_FLAGS", "")
    if n == 1 and "xla_cpu_multi_thread_eigen" not in flags:
        os.environ["XLA_FLAGS"] = (flags + " --xla_cpu_multi_thread_eigen=false "
                                   "intra_op_parallelism_threads=1").strip()


@dataclass
class PathsConfig:
    out_dir: str = "output"
    log_dir: str = "logs"


@dataclass
class PotentialConfig:
    kind: str = "double_well_chain"
    params: Dict[str, Any] = field(default_factory=lambda: {"embedding": "hosted"})


@dataclass
class LowFidelityConfig:
    energy_scale: float = 0.9
    force_noise_amplitude: float = 0.02
    stiffness_scale: float = 0.8
    wavenumber: float = 2.0


@dataclass
class DataConfig:
    n_samples: int = 200
    n_low_fidelity: int = 200
    sigma: float = 0.1
    hessian_fraction: float = 1.0
    eta: float = 0.0


@dataclass
class DescriptorSection:
    cutoff: float = 4.0
    n_basis: int = 8
    r_min: float = 0.5
    switch_fraction: float = 0.5
    species: Optional[List[str]] = None


@dataclass
class ModelSection:
    layer_widths: List[int] = field(default_factory=lambda: [32, 32])


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    per_atom_energy: bool = False
    validation_fraction: float = 0.1
    w_E: float = 4.0
    w_F: float = 100.0
    w_0: float = 0.0
    w_H: float = 0.1
    t_start: Optional[int] = None
    t_end: Optional[int] = None
    schedule: str = "linear"


@dataclass
class HessianLossSection:
    mode: str = "rademacher"
    m: int = 5
    per_sample: bool = True


@dataclass
class SamplingSection:
    k: int = 10
    exponent: float = 2.0
    sigma: float = 0.4
    n_select: int = 50
    strategy: str = "wld"
    fraction: float = 0.5


@dataclass
class ThermoSection:
    temperature: float = 298.15
    pressure: float = 101325.0
    sigma_rot: float = 1.0


@dataclass
class TsSection:
    n_images: int = 11
    string_sweeps: int = 300
    string_dt: float = 2e-4
    string_clip: float = 0.02
    trust_radius: float = 0.1
    g_tol: float = 1e-6
    min_tol: float = 1e-6
    max_min_iterations: int = 500
    max_saddle_iterations: int = 200
    irc_delta: float = 0.01
    irc_step: float = 0.05
    irc_f_tol: float = 1e-4
    irc_max_steps: int = 2000
    match_tol: float = 1e-3


@dataclass
class SschaSection:
    ensemble_size: int = 500
    max_populations: int = 30
    alpha_centroid: float = 0.002
    alpha_phi: float = 0.002
    kong_liu_threshold: float = 0.5
    meaningful_factor: float = 0.001
    temperature: float = 0.0
    max_inner_steps: int = 50
    gradient_tol: float = 1e-8
    relax_centroid: bool = True
    project_rigid: Optional[bool] = None


@dataclass
class SuperconductSection:
    mu_star: List[float] = field(default_factory=lambda: [0.125])


@dataclass
class HintConfig:
    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    low_fidelity: LowFidelityConfig = field(default_factory=LowFidelityConfig)
    data: DataConfig = field(default_factory=DataConfig)
    descriptor: DescriptorSection = field(default_factory=DescriptorSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    hessian_loss: HessianLossSection = field(default_factory=HessianLossSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    thermo: ThermoSection = field(default_factory=ThermoSection)
    ts: TsSection = field(default_factory=TsSection)
    sscha: SschaSection = field(default_factory=SschaSection)
    superconduct: SuperconductSection = field(default_factory=SuperconductSection)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(value, default, dotted: str):
    """Light type check against the default's type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{dotted}' must be true or false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{dotted}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{dotted}' must be an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"'{dotted}' must be a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"'{dotted}' must be a list, got {value!r}")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"'{dotted}' must be a mapping, got {value!r}")
    return value


def build_section(cls, data: Optional[Dict[str, Any]], path: str = ""):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    instance = cls()
    if data is None:
        return instance
    if not isinstance(data, dict):
        raise ConfigError(f"'{path or 'config'}' must be a mapping")
    known = {f.name for f in fields(cls)}
    for key, value in data.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"Unknown configuration key '{dotted}'")
        default = getattr(instance, key)
        if is_dataclass(default):
            setattr(instance, key, build_section(type(default), value, dotted))
        elif value is None or default is None:
            setattr(instance, key, value)
        else:
            setattr(instance, key, _coerce(value, default, dotted))
    return instance


def _apply_env(cfg: HintConfig) -> HintConfig:
    if os.environ.get("HINT_OUT_DIR"):
        cfg.paths.out_dir = os.environ["HINT_OUT_DIR"]
    if os.environ.get("HINT_LOG_DIR"):
        cfg.paths.log_dir = os.environ["HINT_LOG_DIR"]
    return cfg


def load_config(path: Optional[str] = None) -> HintConfig:
    """
    Load a YAML configuration (defaults when path is None).

    Raises:
        ConfigError: unreadable file, unknown key or wrong type
    """
    if path is None:
        return _apply_env(HintConfig())
    if not os.path.exists(path):
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})")
    cfg = build_section(HintConfig, data or {})
    if cfg.threads < 1:
        raise ConfigError("'threads' must be >= 1")
    return _apply_env(cfg)


# Builders

def build_potential(cfg: HintConfig):
    from oracles import make_potential
    try:
        return make_potential(cfg.potential.kind, cfg.potential.params)
    except ValueError as e:
        raise ConfigError(f"potential: {e}")


def build_low_fidelity(cfg: HintConfig):
    from oracles import FidelityPerturbation, low_fidelity_of
    return low_fidelity_of(build_potential(cfg), FidelityPerturbation(**asdict(cfg.low_fidelity)))


def build_model(cfg: HintConfig, species: Optional[List[str]] = None):
    from potential import DescriptorConfig, NeuralPotential
    d = cfg.descriptor
    species = d.species or species
    if not species:
        raise ConfigError("descriptor.species is required when no data defines the species")
    try:
        descriptor = DescriptorConfig(d.cutoff, d.n_basis, d.r_min, d.switch_fraction)
        return NeuralPotential(descriptor, tuple(sorted(set(species), key=species.index)),
                               tuple(cfg.model.layer_widths))
    except ValueError as e:
        raise ConfigError(f"descriptor/model: {e}")


def build_train_config(cfg: HintConfig, phase: str = "finetune"):
    """Training configuration for one phase; pre-training always uses the fixed Hessian weight w_H."""
    from hessian_loss import ProjectionConfig
    from trainer import CurriculumSchedule, Phase, TrainConfig
    t = cfg.train
    h = cfg.hessian_loss
    try:
        if Phase(phase) == Phase.PRETRAIN:
            schedule = CurriculumSchedule(t.w_E, t.w_F, t.w_H, t.w_H, mode="fixed")
        else:
            schedule = CurriculumSchedule(t.w_E, t.w_F, t.w_0, t.w_H, t.t_start, t.t_end, t.schedule)
        projection = ProjectionConfig(h.mode, h.m, h.per_sample)
        return TrainConfig(schedule, projection, t.learning_rate, t.beta1, t.beta2, t.eps,
                           t.batch_size, t.epochs, cfg.seed, t.per_atom_energy, t.validation_fraction)
    except ValueError as e:
        raise ConfigError(f"train/hessian_loss: {e}")


def build_ts_config(cfg: HintConfig):
    from ts_search import TsConfig
    return TsConfig(**asdict(cfg.ts))


def build_sscha_config(cfg: HintConfig):
    from sscha import SschaConfig
    try:
        return SschaConfig(seed=cfg.seed, **asdict(cfg.sscha))
    except ValueError as e:
        raise ConfigError(f"sscha: {e}")
