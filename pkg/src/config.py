"""
Pipeline configuration: TOML (or JSON) files mapped onto per-module dataclasses.

Precedence: built-in defaults < config file < `--set section.key=value` flags.
A top-level `seed` is used by every section that does not set its own.
"""
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, asdict, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from errors import ConfigError
from phase_data import ANNOTATION_FORMATS, DEFAULT_SPLIT_COUNTS, SyntheticSpec
from regime_probe import ProbeConfig
from runtime import resolve_output_root
from stage1_train import Stage1Config
from temporal_tcn import TcnConfig

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ('seed', 'output_root', 'log_level')
SEEDED_SECTIONS = ('synthetic', 'stage1', 'stage2')


@dataclass(frozen=True)
class DatasetConfig:
    root: str = None
    format: str = 'canonical-tsv'
    split: tuple = None
    ordering: str = 'natural'

    def __post_init__(self):
        if self.format not in ANNOTATION_FORMATS:
            raise ConfigError(f'dataset.format must be one of {sorted(ANNOTATION_FORMATS)}, '
                              f'got {self.format!r}')
        if self.split is not None:
            split = tuple(int(c) for c in self.split)
            if len(split) != 3 or min(split) < 0:
                raise ConfigError(f'dataset.split must be [train, val, test] counts, got {self.split}')
            object.__setattr__(self, 'split', split)
        if self.ordering not in ('natural', 'given'):
            raise ConfigError(f"dataset.ordering must be 'natural' or 'given', got {self.ordering!r}")

    def split_counts(self, n_videos):
        if self.split is not None:
            return self.split
        return DEFAULT_SPLIT_COUNTS.get(self.format, _proportional_split(n_videos))


def _proportional_split(n_videos):
    n_train = max(1, round(0.6 * n_videos))
    n_val = max(0, round(0.2 * n_videos))
    return n_train, n_val, max(0, n_videos - n_train - n_val)


@dataclass(frozen=True)
class EvalConfig:
    ribbons: bool = True
    ribbon_videos: tuple = None
    save_logits: bool = True
    stability: bool = True

    def __post_init__(self):
        if self.ribbon_videos is not None:
            object.__setattr__(self, 'ribbon_videos', tuple(str(v) for v in self.ribbon_videos))


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_root: str = 'runs'
    log_level: str = 'INFO'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synthetic: SyntheticSpec = None
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: TcnConfig = field(default_factory=TcnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def out_root(self):
        return resolve_output_root(self.output_root)

    def validate_paths(self):
        """Paths a run reads from must exist before anything is written"""
        if self.synthetic is None:
            if not self.dataset.root:
                raise ConfigError('dataset.root is required unless a [synthetic] section is given')
            if not os.path.isdir(self.dataset.root):
                raise ConfigError(f'dataset.root does not exist: {self.dataset.root}')
        if self.stage1.weights_path and not os.path.isfile(self.stage1.weights_path):
            raise ConfigError(f'stage1.weights_path does not exist: {self.stage1.weights_path}')

    def to_json(self):
        data = {
            'seed': self.seed,
            'output_root': self.output_root,
            'log_level': self.log_level,
            'dataset': _jsonable(asdict(self.dataset)),
            'synthetic': None if self.synthetic is None else asdict(self.synthetic),
            'stage1': self.stage1.to_json(),
            'stage2': self.stage2.to_json(),
            'eval': _jsonable(asdict(self.eval)),
            'probe': _jsonable(asdict(self.probe)),
        }
        return data


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


SECTIONS = {
    'dataset': DatasetConfig,
    'synthetic': SyntheticSpec,
    'stage1': Stage1Config,
    'stage2': TcnConfig,
    'eval': EvalConfig,
    'probe': ProbeConfig,
}


def read_config_file(path):
    """Parse a .toml or .json config file into a plain dict"""
    if not os.path.exists(path):
        raise ConfigError(f'Config file not found: {path}')
    try:
        if path.endswith('.json'):
            with open(path, 'r') as f:
                return json.load(f)
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f'{path}: cannot parse config ({e})') from e


def parse_override(text):
    """'section.key=value' -> (section, key, value); the value is read as TOML"""
    if '=' not in text:
        raise ConfigError(f'Override {text!r} is not of the form section.key=value')
    dotted, raw = text.split('=', 1)
    parts = dotted.strip().split('.')
    if len(parts) > 2 or not all(parts):
        raise ConfigError(f'Override key {dotted!r} must be "key" or "section.key"')
    try:
        value = tomllib.loads(f'v = {raw.strip()}')['v']
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    section, key = (None, parts[0]) if len(parts) == 1 else parts
    return section, key, value


def apply_overrides(raw, overrides):
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for text in overrides or ():
        section, key, value = parse_override(text)
        if section is None:
            raw[key] = value
        else:
            raw.setdefault(section, {})[key] = value
    return raw


def _build_section(name, cls, data):
    if not isinstance(data, dict):
        raise ConfigError(f'[{name}] must be a table')
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f'Unknown key(s) in [{name}]: {", ".join(unknown)}')
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f'[{name}]: {e}') from e


def build_config(raw):
    unknown = sorted(set(raw) - set(TOP_LEVEL_KEYS) - set(SECTIONS))
    if unknown:
        raise ConfigError(f'Unknown top-level key(s): {", ".join(unknown)}')
    seed = int(raw.get('seed', 0))
    kwargs = {k: raw[k] for k in TOP_LEVEL_KEYS if k in raw}
    kwargs['seed'] = seed
    for name, cls in SECTIONS.items():
        if name not in raw:
            continue
        data = dict(raw[name])
        if name in SEEDED_SECTIONS:
            data.setdefault('seed', seed)
        kwargs[name] = _build_section(name, cls, data)
    config = PipelineConfig(**kwargs)
    for name in ('stage1', 'stage2'):
        if name not in raw:
            config = replace(config, **{name: replace(getattr(config, name), seed=seed)})
    return config


def load_config(path=None, overrides=(), seed=None):
    """
    Defaults, then the file at `path` (if any), then the overrides.
    An explicit `seed` replaces the top-level seed and every section seed.
    """
    raw = apply_overrides(read_config_file(path) if path else {}, overrides)
    if seed is not None:
        raw['seed'] = int(seed)
        for name in SEEDED_SECTIONS:
            if isinstance(raw.get(name), dict):
                raw[name]['seed'] = int(seed)
    config = build_config(raw)
    logger.debug('Loaded config from %s', path or 'defaults')
    return config
