"""
Run configuration.

A run is described by one JSON file whose sections map onto the component
configs::

    {
      "name": "phantoms",
      "seed": 7,
      "inputs": ["data/anomalous.json"],
      "reference": ["data/normal.json"],
      "rois": null,
      "output_dir": "runs",
      "preprocess": {...},      PreprocessConfig
      "network": {...},         NetworkConfig
      "training": {...},        TrainConfig
      "histogram": {...},       HistogramConfig
      "threshold": {...},       polarity, threshold_override, roi_required
      "per_subject_threshold": false,
      "postproc": {...}         PostprocConfig
    }

Relative paths are resolved against the directory of the config file.
Command-line flags override individual fields through dotted keys such as
``training.batch_size``. The top-level seed is the only source of
randomness: it is copied into the training section.
"""
import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

from cutseg.data.preprocessing import PreprocessConfig
from cutseg.errors import ConfigError, InvalidArgumentError
from cutseg.network.models import NetworkConfig
from cutseg.postprocessing import PostprocConfig
from cutseg.thresholding import HistogramConfig, make_rule
from cutseg.training import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    'preprocess': PreprocessConfig,
    'network': NetworkConfig,
    'training': TrainConfig,
    'histogram': HistogramConfig,
    'postproc': PostprocConfig,
}

THRESHOLD_KEYS = ('polarity', 'threshold_override', 'roi_required')


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _section(cls, data, name, violations):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        violations.append(f'{name} must be an object')
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    for key in unknown:
        violations.append(f'unknown field {name}.{key}')
    kwargs = {k: _tuples(v) for k, v in data.items() if k in known}
    return cls(**kwargs)


@dataclass
class RunConfig:
    """Everything a command needs to run; see the module docstring."""
    name: str = 'run'
    seed: int = 0
    inputs: List[str] = field(default_factory=list)
    reference: List[str] = field(default_factory=list)
    rois: Optional[List[str]] = None
    output_dir: str = 'runs'
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    threshold: dict = field(default_factory=lambda: {
        'polarity': 'bright', 'threshold_override': None,
        'roi_required': None})
    per_subject_threshold: bool = False
    postproc: PostprocConfig = field(default_factory=PostprocConfig)

    @classmethod
    def from_dict(cls, data, base_dir=None):
        """Builds a config from parsed JSON.

        Raises
        ------
        ConfigError
          listing unknown or malformed fields
        """
        if not isinstance(data, dict):
            raise ConfigError(['config must be a JSON object'])
        violations = []
        top = {f.name for f in fields(cls)}
        for key in sorted(set(data) - top):
            violations.append(f'unknown field {key}')
        kwargs = {}
        for key in ('name', 'seed', 'output_dir', 'per_subject_threshold'):
            if key in data:
                kwargs[key] = data[key]
        for key in ('inputs', 'reference', 'rois'):
            if key not in data or data[key] is None:
                continue
            paths = data[key]
            if isinstance(paths, str):
                paths = [paths]
            if not isinstance(paths, list):
                violations.append(f'{key} must be a list of paths')
                continue
            kwargs[key] = [_resolve(p, base_dir) for p in paths]
        if 'output_dir' in kwargs:
            kwargs['output_dir'] = _resolve(kwargs['output_dir'], base_dir)
        for key, section in SECTIONS.items():
            try:
                kwargs[key] = _section(section, data.get(key), key,
                                       violations)
            except TypeError as exc:
                violations.append(f'{key}: {exc}')
        threshold = data.get('threshold') or {}
        for key in sorted(set(threshold) - set(THRESHOLD_KEYS)):
            violations.append(f'unknown field threshold.{key}')
        kwargs['threshold'] = {k: threshold.get(k, None)
                               for k in THRESHOLD_KEYS}
        kwargs['threshold']['polarity'] = kwargs['threshold']['polarity'] \
            or 'bright'
        if violations:
            raise ConfigError(violations)
        config = cls(**kwargs)
        config.training.seed = config.seed
        return config

    def rule(self):
        return make_rule(**self.threshold)

    def validate(self, check_paths=True, need_data=True):
        """All violations of this config, as a list of messages."""
        violations = []
        if not self.name or os.sep in self.name:
            violations.append(f'name must be a non-empty directory name, got '
                              f'{self.name!r}')
        if not isinstance(self.seed, int) or self.seed < 0:
            violations.append(f'seed must be a non-negative int, got '
                              f'{self.seed!r}')
        for key in SECTIONS:
            try:
                violations.extend(getattr(self, key).validate())
            except TypeError as exc:
                violations.append(f'{key}: {exc}')
        try:
            self.rule()
        except InvalidArgumentError as exc:
            violations.append(f'threshold: {exc}')
        target = self.preprocess.target_size
        if target is not None and tuple(target) != tuple(
                self.network.input_size):
            violations.append(f'preprocess.target_size {tuple(target)} must '
                              f'equal network.input_size '
                              f'{tuple(self.network.input_size)}')
        if need_data:
            for key in ('inputs', 'reference'):
                if not getattr(self, key):
                    violations.append(f'{key} must list at least one '
                                      'manifest')
        if check_paths:
            for key in ('inputs', 'reference', 'rois'):
                for p in getattr(self, key) or []:
                    if not os.path.isfile(p):
                        violations.append(f'{key}: no such file: {p}')
        return violations

    def check(self, **kwargs):
        violations = self.validate(**kwargs)
        if violations:
            raise ConfigError(violations)
        return self

    @property
    def run_dir(self):
        return os.path.join(self.output_dir, self.name)

    def to_dict(self):
        """Resolved config, with the cycle schedule spelled out."""
        out = asdict(self)
        s1, s2 = self.training.cycles
        out['training'].update(stage1_cycles=s1, stage2_cycles=s2)
        return out

    def write_echo(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')


def _resolve(path, base_dir):
    if base_dir is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base_dir, path))


def apply_overrides(data, overrides):
    """Returns a copy of a config dict with dotted-key overrides applied.

    Parameters
    ----------
    data : dict
    overrides : dict
      e.g. {'training.batch_size': 4, 'seed': 3}; None values are skipped
    """
    data = copy.deepcopy(data)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        keys = dotted.split('.')
        for key in keys[:-1]:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides=None):
    """Reads a JSON config file (or starts from defaults when `path` is
    None), applies overrides and builds the RunConfig."""
    data = {}
    base_dir = None
    if path is not None:
        if not os.path.isfile(path):
            raise FileNotFoundError(2, 'No such file', path)
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError([f'{path}: not valid JSON ({exc})'])
        base_dir = os.path.dirname(os.path.abspath(path))
    if overrides:
        # flag values are relative to the working directory
        cwd = dict(overrides)
        for key in ('inputs', 'reference', 'rois'):
            if cwd.get(key) is not None:
                cwd[key] = [os.path.abspath(p) for p in cwd[key]]
        if cwd.get('output_dir') is not None:
            cwd['output_dir'] = os.path.abspath(cwd['output_dir'])
        data = apply_overrides(data, cwd)
    logger.debug('config sections: %s', sorted(data))
    return RunConfig.from_dict(data, base_dir)
