"""Experiment configuration files (TOML)."""

import dataclasses
import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass, field
from typing import List, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from sacforge.device_models import TEMPERATURE_RANGE, normalize_regime
from sacforge.errors import ConfigError, DomainError

EXPERIMENTS = (
    'proto-shape',
    'dac',
    'multiplier',
    'relu',
    'regression',
    'temperature',
    'invariance-report',
)

OUTPUT_ENV = 'SACFORGE_OUT'
DEFAULT_OUTPUT_DIR = 'sacforge-output'


@dataclass
class SweepSettings:
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    n_points: int = 201
    c: float = 0.2


@dataclass
class DacSettings:
    n_bits: int = 8
    n_splines: int = 4
    fit_bits: int = 0


@dataclass
class MultiplierSettings:
    x_points: int = 41
    w_points: int = 5
    x_range: float = 1.0
    w_range: float = 0.5
    bias_c: float = 1.0


@dataclass
class NetworkSettings:
    layer_sizes: List[int] = field(default_factory=lambda: [2, 6, 1])
    hyper_c: float = 0.2
    weight_bits: int = 8
    dac_splines: int = 4
    w_max: float = 1.5
    x_range: float = 2.0
    bias_c: float = 2.0
    train_regime: str = 'SI'
    eval_regimes: List[str] = field(default_factory=lambda: ['SI', 'MI', 'WI'])
    lr: float = 0.01
    epochs: int = 500
    batch_size: int = 32
    momentum: float = 0.9
    n_samples: int = 1024
    mismatch_sigma: float = 0.0
    reference: bool = True


@dataclass
class ExperimentConfig:
    experiment: str
    regimes: List[str] = field(default_factory=lambda: ['WI', 'MI', 'SI'])
    spline_counts: List[int] = field(default_factory=lambda: [1, 3])
    temperature_points: List[float] = field(default_factory=lambda: [250.0, 300.0, 350.0, 400.0])
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: Optional[str] = None
    jobs: int = 1
    check_instances: int = 10000
    sweep: SweepSettings = field(default_factory=SweepSettings)
    dac: DacSettings = field(default_factory=DacSettings)
    multiplier: MultiplierSettings = field(default_factory=MultiplierSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)

    def validate(self):
        """Normalize regime spellings and range-check every value; returns self."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENTS)}",
                'experiment')
        _require(self.regimes, "regimes must not be empty", 'regimes')
        self.regimes = _regimes(self.regimes, 'regimes')
        self.network.eval_regimes = _regimes(self.network.eval_regimes, 'network.eval_regimes')
        self.network.train_regime = _network_regime(self.network.train_regime)
        _require(self.spline_counts and min(self.spline_counts) >= 1,
                 "spline_counts must hold integers >= 1", 'spline_counts')
        lo, hi = TEMPERATURE_RANGE
        _require(self.temperature_points and all(lo <= t <= hi for t in self.temperature_points),
                 f"temperature_points must lie in [{lo:g}, {hi:g}] K", 'temperature_points')
        _require(self.seeds, "seeds must not be empty", 'seeds')
        _require(self.jobs >= 1, "jobs must be >= 1", 'jobs')
        _require(self.check_instances >= 1, "check_instances must be >= 1", 'check_instances')

        sweep = self.sweep
        _require(sweep.n_points >= 2, "sweep.n_points must be at least 2", 'sweep.n_points')
        _require((sweep.x_min is None) == (sweep.x_max is None),
                 "sweep.x_min and sweep.x_max must be given together", 'sweep.x_min')
        if sweep.x_min is not None:
            _require(sweep.x_min < sweep.x_max, "sweep.x_min must be below sweep.x_max", 'sweep.x_min')
        _require(sweep.c > 0, "sweep.c must be positive", 'sweep.c')

        _require(1 <= self.dac.n_bits <= 16, "dac.n_bits must lie in [1, 16]", 'dac.n_bits')
        _require(self.dac.n_splines >= 1, "dac.n_splines must be >= 1", 'dac.n_splines')
        _require(0 <= self.dac.fit_bits <= 24, "dac.fit_bits must lie in [0, 24]", 'dac.fit_bits')

        mult = self.multiplier
        _require(mult.x_points >= 2, "multiplier.x_points must be at least 2", 'multiplier.x_points')
        _require(mult.w_points >= 1, "multiplier.w_points must be >= 1", 'multiplier.w_points')
        _require(mult.x_range > 0 and mult.w_range > 0, "multiplier ranges must be positive",
                 'multiplier.x_range')
        _require(2 * mult.bias_c >= mult.x_range + mult.w_range,
                 "multiplier.bias_c must satisfy 2*bias_c >= x_range + w_range", 'multiplier.bias_c')

        net = self.network
        _require(len(net.layer_sizes) >= 3 and min(net.layer_sizes) >= 1,
                 "network.layer_sizes needs input, hidden and output sizes >= 1", 'network.layer_sizes')
        _require(net.layer_sizes[0] == 2 and net.layer_sizes[-1] == 1,
                 "network.layer_sizes must start with 2 inputs and end with 1 output",
                 'network.layer_sizes')
        _require(net.lr > 0, "network.lr must be positive", 'network.lr')
        _require(0 <= net.momentum < 1, "network.momentum must lie in [0, 1)", 'network.momentum')
        _require(net.w_max > 0 and net.x_range > 0, "network ranges must be positive", 'network.w_max')
        _require(2 * net.bias_c >= net.x_range + net.w_max,
                 "network.bias_c must satisfy 2*bias_c >= x_range + w_max", 'network.bias_c')
        _require(net.epochs >= 0, "network.epochs must be >= 0", 'network.epochs')
        _require(net.batch_size >= 1, "network.batch_size must be >= 1", 'network.batch_size')
        _require(net.n_samples >= 2, "network.n_samples must be at least 2", 'network.n_samples')
        _require(0 <= net.mismatch_sigma <= 0.2, "network.mismatch_sigma must lie in [0, 0.2]",
                 'network.mismatch_sigma')
        _require(1 <= net.weight_bits <= 16, "network.weight_bits must lie in [1, 16]",
                 'network.weight_bits')
        return self


def _require(condition, message, key):
    if not condition:
        raise ConfigError(message, key)


def _regimes(values, key):
    try:
        return [normalize_regime(r) for r in values]
    except DomainError as e:
        raise ConfigError(str(e), key) from None


def _network_regime(regime):
    if str(regime).upper() == 'IDEAL':
        return 'IDEAL'
    return _regimes([regime], 'network.train_regime')[0]


_SECTIONS = ('sweep', 'dac', 'multiplier', 'network')
_OPTIONAL_STRINGS = ('output_dir',)


def _line_of(text, key, section=None):
    """1-based line where ``key`` is assigned (inside ``section`` when given)."""
    in_section = section is None
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        header = re.match(r'^\[([^\]]+)\]', stripped)
        if header:
            in_section = section is not None and header.group(1).strip() == section
            continue
        if in_section and re.match(rf'^"?{re.escape(key)}"?\s*=', stripped):
            return number
    return None


def _where(text, key, section=None):
    line = _line_of(text, key, section)
    name = f"{section}.{key}" if section else key
    return f"{name} (line {line})" if line else name


def _coerce(value, default, where):
    """Check a TOML value against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, default[0], where) for v in value] if default else value
    return value


def _fill(target, table, text, section=None):
    names = {f.name for f in dataclasses.fields(target)}
    for key, value in table.items():
        where = _where(text, key, section)
        if key not in names:
            raise ConfigError(f"unknown key {where}", key)
        if section is None and key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a [{key}] table", key)
            _fill(getattr(target, key), value, text, key)
        elif section is None and key in _OPTIONAL_STRINGS:
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string, got {value!r}", key)
            setattr(target, key, value)
        else:
            setattr(target, key, _coerce(value, getattr(target, key), where))


def parse_config(text, experiment=None):
    """Build an ExperimentConfig from TOML text; ``experiment`` overrides the file."""
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config syntax error: {e}") from None
    if 'experiment' in table and not isinstance(table['experiment'], str):
        raise ConfigError(f"{_where(text, 'experiment')}: expected a string", 'experiment')
    name = experiment or table.get('experiment')
    if name is None:
        raise ConfigError("config does not name an experiment", 'experiment')
    config = ExperimentConfig(experiment=str(name))
    _fill(config, {k: v for k, v in table.items() if k != 'experiment'}, text)
    try:
        return config.validate()
    except ConfigError as e:
        if e.key is None:
            raise
        section, _, key = e.key.rpartition('.')
        line = _line_of(text, key, section or None)
        if line is None:
            raise
        raise ConfigError(f"{e} (line {line})", e.key) from None


def load_config(path, experiment=None):
    try:
        with open(path, 'rb') as f:
            text = f.read().decode('utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, experiment)


def resolve_output_dir(config, override=None):
    """--out, then the config file, then $SACFORGE_OUT, then the default."""
    return override or config.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_DIR


def config_dict(config):
    return dataclasses.asdict(config)


def config_hash(config):
    """Short SHA-256 over everything that changes results (not paths or job counts)."""
    data = config_dict(config)
    data.pop('output_dir', None)
    data.pop('jobs', None)
    blob = json.dumps(data, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return hashlib.sha256(blob).hexdigest()[:16]
