import os
from dataclasses import MISSING, dataclass, field, fields
from typing import Any, Dict, Optional

import tomli

from .encoder import EncoderConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .models import OodShift, SplitSpec, SyntheticAttribute, SyntheticConfig
from .probe import ProbeConfig
from .trainer import TrainConfig


class Config:
    BASE_DIR = os.path.abspath(os.path.dirname(os.path.dirname(__file__)))
    LOG_LEVEL = os.getenv('XRAY_REID_LOG_LEVEL', 'INFO')
    LOG_FORMAT = '%(asctime)s %(levelname)s [%(name)s] %(message)s'
    DEFAULT_CONFIG_PATH = os.path.join(BASE_DIR, 'configs', 'default.toml')
    OUTPUT_DIR = os.getenv('XRAY_REID_OUTPUT_DIR', 'runs')

class DevelopmentConfig(Config):
    LOG_LEVEL = os.getenv('XRAY_REID_LOG_LEVEL', 'DEBUG')

class TestingConfig(Config):
    LOG_LEVEL = os.getenv('XRAY_REID_LOG_LEVEL', 'WARNING')
    DEFAULT_CONFIG_PATH = None

class ProductionConfig(Config):
    pass


SECTIONS = ('seed', 'synthetic', 'split', 'encoder', 'train', 'eval', 'probe')


def _defaults(cls):
    return {f.name for f in fields(cls) if f.default is not MISSING or f.default_factory is not MISSING}


def _check_keys(cls, data, section, exclude=()):
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown field {section}.{unknown[0]}")


def _build(cls, data, section, defaults=None, fixed=None, exclude=()):
    """
    Instantiate a config dataclass from one TOML table

    Args:
        cls: Dataclass to build
        data (dict): Table contents
        section (str): Dotted section name used in error messages
        defaults (dict, optional): Values used when the table omits them
        fixed (dict, optional): Values supplied by the loader itself
        exclude (tuple): Field names the table may not set

    Returns:
        Instance of ``cls``
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{section} must be a table")
    fixed = fixed or {}
    _check_keys(cls, data, section, exclude=tuple(exclude) + tuple(fixed))
    values = {**(defaults or {}), **data, **fixed}
    optional = _defaults(cls)
    missing = [f.name for f in fields(cls) if f.name not in values and f.name not in optional]
    if missing:
        raise ConfigError(f"missing required field {section}.{missing[0]}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid [{section}]: {e}") from e


def _synthetic(data, seed):
    data = dict(data)
    attributes = data.pop('attributes', [])
    ood = data.pop('ood', None)
    specs = []
    for index, raw in enumerate(attributes):
        raw = dict(raw)
        if 'values' in raw:
            raw['values'] = tuple(str(v) for v in raw['values'])
        specs.append(_build(SyntheticAttribute, raw, f'synthetic.attributes[{index}]'))
    if isinstance(data.get('visits_per_identity'), list):
        data['visits_per_identity'] = tuple(data['visits_per_identity'])
    shift = None if ood is None else _build(OodShift, ood, 'synthetic.ood')
    config = _build(
        SyntheticConfig, data, 'synthetic',
        defaults={'projection_seed': seed, 'sample_seed': seed + 1},
        fixed={'attributes': tuple(specs), 'ood_shift': shift},
        exclude=('shifted',),
    )
    return config.validate()


@dataclass(frozen=True)
class RunConfig:
    """
    Everything one pipeline run needs, loaded from a single TOML file

    ``encoder`` and ``probe`` stay as keyword tables: the encoder input size
    comes from the data, and the probe attribute may come from the command line.
    """
    seed: int = 0
    synthetic: Optional[SyntheticConfig] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    encoder: Dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe: Dict[str, Any] = field(default_factory=dict)

    def require_synthetic(self):
        if self.synthetic is None:
            raise ConfigError("missing required field synthetic.num_identities")
        return self.synthetic

    def encoder_config(self, input_dim):
        values = {'init_seed': self.seed, **self.encoder, 'input_dim': input_dim}
        return _build(EncoderConfig, values, 'encoder').validate()

    def probe_config(self, task_attribute=None):
        values = dict(self.probe)
        if task_attribute is not None:
            values['task_attribute'] = task_attribute
        return _build(ProbeConfig, values, 'probe', defaults={'seed': self.seed}).validate()


def _parse_value(text):
    try:
        return tomli.loads(f'value = {text}')['value']
    except tomli.TOMLDecodeError:
        return text


def apply_override(data, assignment):
    """Set ``section.key=value`` inside the raw TOML mapping."""
    key, sep, text = assignment.partition('=')
    path = [part.strip() for part in key.split('.')]
    if not sep or not all(path):
        raise ConfigError(f"override '{assignment}' must look like section.key=value")
    target = data
    for part in path[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError(f"override '{assignment}': '{part}' is not a table")
    target[path[-1]] = _parse_value(text.strip())
    return data


def load_run_config(path=None, seed=None, overrides=()):
    """
    Read a run configuration

    Args:
        path (str, optional): TOML file; None starts from defaults only
        seed (int, optional): Replaces the top-level seed
        overrides (iterable): ``section.key=value`` assignments applied last

    Returns:
        RunConfig
    """
    data = {}
    if path is not None:
        try:
            with open(path, 'rb') as handle:
                data = tomli.load(handle)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config file {path} is not valid TOML: {e}") from e
    for assignment in overrides:
        apply_override(data, assignment)
    if seed is not None:
        data['seed'] = seed

    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]}")
    base_seed = data.get('seed', 0)
    if not isinstance(base_seed, int) or isinstance(base_seed, bool):
        raise ConfigError(f"seed must be an integer, got {base_seed!r}")

    encoder = dict(data.get('encoder', {}))
    _check_keys(EncoderConfig, encoder, 'encoder', exclude=('input_dim',))
    if 'hidden_dims' in encoder:
        encoder['hidden_dims'] = tuple(encoder['hidden_dims'])
    probe = dict(data.get('probe', {}))
    _check_keys(ProbeConfig, probe, 'probe')
    if 'bucket_boundaries' in probe:
        probe['bucket_boundaries'] = tuple(probe['bucket_boundaries'])

    evaluation = dict(data.get('eval', {}))
    for key in ('settings', 'fpr_targets'):
        if key in evaluation:
            evaluation[key] = tuple(evaluation[key])

    return RunConfig(
        seed=base_seed,
        synthetic=_synthetic(data['synthetic'], base_seed) if 'synthetic' in data else None,
        split=_build(SplitSpec, data.get('split', {}), 'split', defaults={'seed': base_seed}).validate(),
        encoder=encoder,
        train=_build(TrainConfig, data.get('train', {}), 'train', defaults={'seed': base_seed}).validate(),
        eval=_build(EvalConfig, evaluation, 'eval', defaults={'seed': base_seed}).validate(),
        probe=probe,
    )
