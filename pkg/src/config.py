"""Experiment configuration files and controller parameter files"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import yaml

from .certify import resolve_epsilon
from .control import CONTROLLERS, ControllerParams
from .engine import P_CONVENTIONS, CostSpec
from .errors import ConfigError, DimensionError, FormatError
from .grid import FeederModel, bundled_feeder_path
from .scenario import ScenarioConfig, derive_seed  # noqa: F401  (re-exported)
from .train import GRADIENT_MODES, TrainConfig, matrices_from_factors


@dataclass
class FeederSettings:
    path: Optional[str] = None       # None: bundled IEEE 33-bus feeder
    scale_factor: float = 1.0

    def resolved_path(self) -> Path:
        return Path(self.path) if self.path else bundled_feeder_path()


@dataclass
class ControllerSettings:
    epsilon: Union[float, str] = 'auto'
    alpha: Optional[float] = None    # default 1 - epsilon
    u_max_min: float = 0.01
    u_max_max: float = 0.05
    clamp: bool = False
    p_convention: str = 'next'


@dataclass
class TrainSettings:
    learning_rate: float = 0.05
    batch_size: int = 8
    horizon: int = 200
    epochs: int = 100
    gradient_mode: str = 'analytic'
    controller: str = 'adaptive'
    workers: int = 1


@dataclass
class EvaluateSettings:
    test_size: int = 100
    ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 1.5])


@dataclass
class OutputSettings:
    directory: str = 'out'
    emit_plot_data: bool = True


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration; every section falls back to the published defaults"""
    feeder: FeederSettings = field(default_factory=FeederSettings)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    cost: CostSpec = field(default_factory=CostSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    evaluate: EvaluateSettings = field(default_factory=EvaluateSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def validate(self):
        self.scenario.validate()
        if self.controller.p_convention not in P_CONVENTIONS:
            raise ConfigError(f"p_convention must be one of {P_CONVENTIONS}, got {self.controller.p_convention!r}")
        if self.train.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"gradient_mode must be one of {GRADIENT_MODES}, got {self.train.gradient_mode!r}")
        if self.train.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.train.controller!r}")
        if self.evaluate.test_size < 1:
            raise ConfigError(f"test_size must be >= 1, got {self.evaluate.test_size}")
        if not self.evaluate.ratios or min(self.evaluate.ratios) < 0:
            raise ConfigError(f"ratios must be a non-empty list of non-negative values, got {self.evaluate.ratios}")
        if self.feeder.scale_factor <= 0:
            raise ConfigError(f"scale_factor must be > 0, got {self.feeder.scale_factor}")

    def to_dict(self) -> dict:
        return {
            'feeder': asdict(self.feeder),
            'scenario': asdict(self.scenario),
            'controller': asdict(self.controller),
            'cost': asdict(self.cost),
            'train': asdict(self.train),
            'evaluate': asdict(self.evaluate),
            'output': asdict(self.output),
        }

    def epsilon(self, model: FeederModel) -> float:
        return resolve_epsilon(model, self.controller.epsilon)

    def train_config(self, model: FeederModel) -> TrainConfig:
        """TrainConfig with epsilon resolved against the feeder"""
        epsilon = self.epsilon(model)
        config = TrainConfig(
            learning_rate=self.train.learning_rate,
            batch_size=self.train.batch_size,
            horizon=self.train.horizon,
            epochs=self.train.epochs,
            epsilon=epsilon,
            alpha=self.controller.alpha,
            gradient_mode=self.train.gradient_mode,
            seed=self.seed,
            cost=self.cost,
            controller=self.train.controller,
            clamp=self.controller.clamp,
            p_convention=self.controller.p_convention,
            u_max_min=self.controller.u_max_min,
            u_max_max=self.controller.u_max_max,
            workers=self.train.workers,
        )
        config.validate()
        return config


SECTIONS = {
    'feeder': FeederSettings,
    'scenario': ScenarioConfig,
    'controller': ControllerSettings,
    'cost': CostSpec,
    'train': TrainSettings,
    'evaluate': EvaluateSettings,
    'output': OutputSettings,
}


BASIS_KEYS = ('kind', 'frequencies', 'table', 'window')


def _flatten_basis(values: dict) -> dict:
    """scenario.basis.{kind, frequencies, table, window} -> basis_<key>"""
    basis = values.get('basis')
    if basis is None:
        return values
    if not isinstance(basis, dict):
        raise ConfigError("scenario.basis must be a mapping")
    unknown = sorted(set(basis) - set(BASIS_KEYS))
    if unknown:
        raise ConfigError(f"unknown keys in section 'scenario.basis': {', '.join(unknown)}")
    flat = {key: value for key, value in values.items() if key != 'basis'}
    flat.update({f"basis_{key}": value for key, value in basis.items()})
    return flat


def _build_section(name: str, cls, values) -> object:
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    if name == 'scenario':
        values = _flatten_basis(values)
    known = {f.name for f in fields(cls) if not f.name.startswith('_')}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section '{name}': {e}")


def load_config(path=None) -> ExperimentConfig:
    """
    Load an experiment config (YAML). Missing sections keep their defaults.

    Raises:
        FileNotFoundError: path given but missing
        ConfigError: unknown section or key, or invalid value
    """
    if path is None:
        config = ExperimentConfig()
        config.validate()
        return config

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")

    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    config = ExperimentConfig(**{name: _build_section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()})
    config.validate()
    return config


def load_scenario_config(path) -> ScenarioConfig:
    """Scenario keys from a YAML file, either top-level or under a 'scenario' section"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Scenario config not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"scenario config {path} is not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"scenario config {path} must be a mapping")
    scenario = _build_section('scenario', ScenarioConfig, raw.get('scenario', raw))
    scenario.validate()
    return scenario


def config_hash(config: Union[ExperimentConfig, dict]) -> str:
    """SHA-256 of the canonical JSON form of the resolved config"""
    data = config.to_dict() if isinstance(config, ExperimentConfig) else config
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def params_to_dict(params: ControllerParams) -> dict:
    return {
        'controller': params.controller,
        'dims': list(params.dims),
        'k': params.k.tolist(),
        'A': [params.A[i, :m, :m].tolist() for i, m in enumerate(params.dims)],
        'alpha': params.alpha,
        'epsilon': params.epsilon,
        'u_max': None if params.u_max is None else params.u_max.tolist(),
    }


def save_params(path, params: ControllerParams, provenance: Optional[dict] = None):
    """Write a controller parameter file (YAML, per-bus A_i unpadded)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dict(provenance or {})
    data.update(params_to_dict(params))
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(data, f, sort_keys=False)


def _pad_blocks(blocks, dims, what: str) -> np.ndarray:
    m = max(dims)
    out = np.zeros((len(dims), m, m))
    for i, (block, mi) in enumerate(zip(blocks, dims)):
        block = np.asarray(block, dtype=float)
        if block.shape != (mi, mi):
            raise FormatError(f"{what}[{i}] must be {mi}x{mi}, got shape {block.shape}")
        out[i, :mi, :mi] = block
    return out


def load_params(path) -> ControllerParams:
    """
    Read a controller parameter file with keys controller, k, A or A_chol, alpha,
    epsilon, u_max and (optionally) dims. A_chol holds lower factors with
    A_i = L_i L_i^T + 1e-8 I.

    Raises:
        FileNotFoundError: path missing
        FormatError: malformed or incomplete file
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Parameter file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise FormatError(f"parameter file {path} is not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise FormatError(f"parameter file {path} must be a mapping")

    missing = [key for key in ('k', 'alpha', 'epsilon') if key not in raw]
    if 'A' not in raw and 'A_chol' not in raw:
        missing.append('A | A_chol')
    if missing:
        raise FormatError(f"parameter file {path} is missing: {', '.join(missing)}")

    try:
        k = np.asarray(raw['k'], dtype=float).ravel()
        blocks = raw['A'] if 'A' in raw else raw['A_chol']
        if len(blocks) != len(k):
            raise FormatError(f"{len(blocks)} adaptation blocks for {len(k)} buses")
        dims = tuple(raw.get('dims') or [len(block) for block in blocks])
        if len(dims) != len(k):
            raise FormatError(f"dims lists {len(dims)} buses, k has {len(k)}")
        if 'A' in raw:
            A = _pad_blocks(blocks, dims, 'A')
        else:
            A = matrices_from_factors(_pad_blocks(blocks, dims, 'A_chol'), dims)
        return ControllerParams(k=k, A=A, dims=dims, alpha=float(raw['alpha']), epsilon=float(raw['epsilon']),
                                u_max=raw.get('u_max'), controller=raw.get('controller', 'adaptive'))
    except FormatError:
        raise
    except (TypeError, ValueError, DimensionError) as e:
        raise FormatError(f"parameter file {path}: {e}")
