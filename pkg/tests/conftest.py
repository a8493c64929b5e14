import csv
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sacforge.config import ExperimentConfig
from sacforge.network import NetworkSpec

REGIMES = ('WI', 'MI', 'SI', 'RECT')


def tiny_spec(regime='RECT', n_splines=2, **overrides):
    """Smallest network that still builds every block (fast DAC fit, small tables)."""
    fields = dict(layer_sizes=(2, 2, 1), n_splines=n_splines, weight_bits=4, dac_splines=1,
                  train_regime=regime)
    fields.update(overrides)
    return NetworkSpec(**fields)


def small_config(experiment, out_dir=None, **overrides):
    """Config with small grids so an experiment finishes in seconds."""
    config = ExperimentConfig(experiment=experiment, output_dir=out_dir)
    config.regimes = ['RECT', 'SI']
    config.spline_counts = [1]
    config.sweep.n_points = 21
    config.multiplier.x_points = 5
    config.multiplier.w_points = 3
    config.dac.n_bits = 3
    config.dac.n_splines = 1
    config.network.layer_sizes = [2, 2, 1]
    config.network.weight_bits = 4
    config.network.dac_splines = 1
    config.network.train_regime = 'RECT'
    config.network.eval_regimes = ['RECT', 'SI']
    config.network.epochs = 2
    config.network.n_samples = 40
    config.check_instances = 64
    for key, value in overrides.items():
        setattr(config, key, value)
    return config.validate()


def read_curve_csv(path):
    """Return (header dict, rows as (x, y) string pairs) of an emitted curve."""
    header = {}
    rows = []
    with open(path, encoding='utf-8', newline='') as f:
        lines = f.read().splitlines()
    body = []
    for line in lines:
        if line.startswith('# '):
            key, _, value = line[2:].partition('=')
            header[key] = value
        else:
            body.append(line)
    reader = csv.reader(body)
    assert next(reader) == ['x', 'y']
    for row in reader:
        rows.append((row[0], row[1]))
    return header, rows
