"""Experiment configuration. A configuration is a JSON object with one section per stage; every
key has a default and unknown keys are rejected."""

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .diffusion.model import Architecture
from .diffusion.schedule import make_schedule
from .diffusion.training import TrainingConfig
from .errors import ConfigurationError

OUTPUT_ROOT_VARIABLE = 'PYDIME_OUTPUT_ROOT'
DATA_FORMATS = ('toy', 'cifar10', 'raw')

@dataclass
class DataConfig:
    """Source of the training set. `path` is a CIFAR-10 batch file (or list of files) or a raw
    manifest. The toy_* keys describe the synthetic dataset used by format 'toy'; toy_duplicates
    maps an image index to its number of copies."""

    format: str = 'toy'
    path: Optional[object] = None
    limit: Optional[int] = None
    toy_size: int = 512
    toy_shape: tuple = (16, 16, 3)
    toy_duplicates: dict = field(default_factory=dict)
    toy_num_classes: int = 10

    def __post_init__(self):

        if self.format not in DATA_FORMATS:
            raise ConfigurationError(f'`format` must be one of {DATA_FORMATS}')
        if self.format!='toy' and self.path is None:
            raise ConfigurationError(f'Data format {self.format} needs a `path`')
        if self.limit is not None and self.limit<1:
            raise ConfigurationError('`limit` must be positive')
        if len(self.toy_shape)!=3:
            raise ConfigurationError('`toy_shape` must be (height, width, channels)')

@dataclass
class ScheduleConfig:

    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.2

    def build(self):

        return make_schedule(self.T, self.beta_min, self.beta_max)

@dataclass
class GenerateConfig:
    """Sampling of the `generate` stage. `checkpoint` defaults to the final checkpoint of the
    `train` stage of the same run."""

    count: int = 1024
    label: Optional[int] = None
    stride: int = 1
    batch_size: int = 512
    checkpoint: Optional[str] = None

    def __post_init__(self):

        if self.count<1:
            raise ConfigurationError('`count` must be positive')
        if self.stride<1:
            raise ConfigurationError('`stride` must be positive')

@dataclass
class ExtractConfig:
    """Scoring of generations. With `calibrate`, the score cutoff is placed below the scores of
    an untrained model. Clique inference runs when `clique_threshold` is set ('auto' calibrates
    it). Targeted extraction of the `targeted_top` most atypical images needs a conditional
    model."""

    alpha: float = 0.5
    n: int = 50
    delta: float = 0.15
    eidetic_delta: float = 0.1
    score_cutoff: Optional[float] = 1.
    calibrate: bool = False
    clique_threshold: Optional[object] = None
    clique_min: int = 10
    grid: tuple = (2, 2)
    targeted_top: int = 0
    targeted_per_target: int = 16

    def __post_init__(self):

        for name in ('delta', 'eidetic_delta'):
            if not 0<getattr(self, name)<1:
                raise ConfigurationError(f'`{name}` must be in (0, 1)')
        if self.alpha<=0:
            raise ConfigurationError('`alpha` must be positive')
        if self.n<1:
            raise ConfigurationError('`n` must be positive')
        if self.clique_threshold not in (None, 'auto') and not isinstance(self.clique_threshold,
                                                                           (int, float)):
            raise ConfigurationError("`clique_threshold` must be a number, 'auto' or null")

@dataclass
class MiaConfig:
    """Shadow models and attack parameters shared by the mia, sweep-t, progress and inpaint
    stages. `t_list` defaults to (1, T/10, T/4, T/2, 9T/10)."""

    shadow_models: int = 8
    split: float = 0.5
    target_index: int = 0
    t: int = 100
    n_noise: int = 1
    use_flip: bool = False
    fixed_variance: bool = False
    fpr: float = 0.01
    progress_fpr: float = 0.1
    t_list: Optional[tuple] = None

    def __post_init__(self):

        if self.shadow_models<2:
            raise ConfigurationError('At least 2 shadow models are needed')
        if not 0<self.split<1:
            raise ConfigurationError('`split` must be in (0, 1)')
        if not 0<=self.target_index<self.shadow_models:
            raise ConfigurationError('`target_index` must refer to a shadow model')
        if self.n_noise<1:
            raise ConfigurationError('`n_noise` must be positive')
        for name in ('fpr', 'progress_fpr'):
            if not 0<getattr(self, name)<1:
                raise ConfigurationError(f'`{name}` must be in (0, 1)')

@dataclass
class InpaintConfig:

    num_targets: int = 20
    n: int = 200
    top_k: int = 10
    t: int = 100
    n_noise: int = 1
    mask: str = 'left-half'
    fraction: float = 0.6
    jump_length: int = 10
    resamplings: int = 2

    def __post_init__(self):

        if not 1<=self.top_k<=self.n:
            raise ConfigurationError('Need 1 <= top_k <= n')
        if self.num_targets<1:
            raise ConfigurationError('`num_targets` must be positive')

@dataclass
class DedupConfig:

    threshold: float = 0.85
    experiment: bool = True
    generations: int = 1024

    def __post_init__(self):

        if not 0<self.threshold<=1:
            raise ConfigurationError('`threshold` must be in (0, 1]')

@dataclass
class CanaryConfig:
    """Canary audit. `per_count` canaries are inserted for each entry of `duplicate_counts`."""

    pool_size: int = 256
    duplicate_counts: tuple = (1, 2, 4, 8, 16)
    per_count: int = 1
    t: int = 100
    n_noise: int = 20
    label: int = 0

    def __post_init__(self):

        if self.pool_size<2 or self.pool_size & (self.pool_size-1):
            raise ConfigurationError('`pool_size` must be a power of two >= 2')
        if len(self.duplicate_counts)*self.per_count>self.pool_size:
            raise ConfigurationError('More inserted canaries than the pool holds')

@dataclass
class ExperimentConfig:
    """Configuration of a run. Stage seeds are derived from `seed`; `output_dir` defaults to a
    folder under the output root."""

    seed: int = 0
    output_dir: Optional[str] = None
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    arch: Architecture = field(default_factory=Architecture)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    mia: MiaConfig = field(default_factory=MiaConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    canary: CanaryConfig = field(default_factory=CanaryConfig)

    @classmethod
    def from_dict(cls, config):

        return _build(cls, config, 'config')

    def to_dict(self):

        return _to_json(asdict(self))

SECTIONS = {f.name: f.default_factory for f in fields(ExperimentConfig)
            if f.default_factory is not MISSING}

def _coerce(value, default, path):
    """Check a value against the type of the default value of its field."""

    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f'{path} must be a boolean')
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f'{path} must be an integer')
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f'{path} must be a number')
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f'{path} must be a string')
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f'{path} must be a list')
        value = tuple(value)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigurationError(f'{path} must be an object')

    return value

def _build(cls, values, path):
    """Create dataclass `cls` from a dictionary, rejecting unknown keys."""

    if not isinstance(values, dict):
        raise ConfigurationError(f'{path} must be an object')

    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigurationError(f'Unknown configuration key {path}.{unknown[0]}')

    kwargs = {}
    for name, value in values.items():
        key_path = f'{path}.{name}'
        if cls is ExperimentConfig and name in SECTIONS:
            kwargs[name] = _build(SECTIONS[name], value, key_path)
            continue
        spec = known[name]
        default = spec.default_factory() if spec.default_factory is not MISSING else spec.default
        kwargs[name] = _coerce(value, default, key_path)

    try:
        return cls(**kwargs)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigurationError(f'{path}: {exc}') from exc

def _to_json(obj):

    if isinstance(obj, dict):
        return {str(key): _to_json(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_json(value) for value in obj]

    return obj

def _parse_value(text):
    """Parse an override value as JSON, keeping the raw string if it is not valid JSON."""

    try:
        return json.loads(text)
    except ValueError:
        return text

def apply_overrides(config, overrides):
    """Apply dotted-path overrides such as 'train.steps=200' to a configuration dictionary.

    Parameters
    ----------
    config : dict
        The configuration. It is not modified.
    overrides : list of str
        Overrides in the form 'key.subkey=value'.

    Returns
    -------
    dict
        The new configuration.
    """

    config = json.loads(json.dumps(config))
    for override in overrides:
        if '=' not in override:
            raise ConfigurationError(f"Override '{override}' must have the form key=value")
        key, text = override.split('=', 1)
        parts = key.strip().split('.')
        node = config
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f'Cannot override {key}: {part} is not a section')
            node = child
        node[parts[-1]] = _parse_value(text)

    return config

def read_config_file(path):
    """Read a JSON configuration. A run manifest is also accepted, in which case its 'config' key
    is used."""

    try:
        content = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f'Could not read configuration {path}: {exc}') from exc
    if isinstance(content, dict) and 'config' in content and 'artifacts' in content:
        content = content['config']

    return content

def load_config(path=None, overrides=()):
    """Read a configuration file, apply overrides and validate the result."""

    config = {} if path is None else read_config_file(path)
    config = apply_overrides(config, overrides)

    return ExperimentConfig.from_dict(config)

def output_root():
    """Default output root, taken from the environment."""

    return Path(os.environ.get(OUTPUT_ROOT_VARIABLE, 'runs'))
