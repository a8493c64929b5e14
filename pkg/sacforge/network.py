"""Feed-forward networks built from S-AC blocks.

Weights are stored as signed DAC codes. The analog weight a code produces is
``w_max * sign * level[|code|]`` where ``level`` is the measured sweep of the
compressive DAC in whatever regime the network is evaluated in. Training
keeps a continuous master copy on the same [-1, 1] scale and snaps it to the
nearest DAC level on every step (straight-through gradient).

``predict`` and training evaluate blocks through ``ShapeTable``s so a step is
a handful of vectorized spline evaluations; ``forward`` runs one sample
through the node solver block by block.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import pearsonr

from sacforge import __version__
from sacforge.blocks import (
    ShapeTable,
    dac_sweep,
    mac,
    make_dac,
    make_multiplier,
    make_relu_node,
    soft_relu,
    to_differential,
)
from sacforge.device_models import NOMINAL_TEMPERATURE, make_model, normalize_regime
from sacforge.errors import CalibrationError, DomainError, GradientError, TrainingDivergedError

IDEAL_REGIME = 'IDEAL'
DIVERGENCE_LOSS = 1e3
MISMATCH_SIGMA_MAX = 0.2
MISMATCH_CLIP = 3.5
TABLE_STEP = 0.005
MIN_MULTIPLIER_GAIN = 1e-3
FORMAT_NAME = 'sacforge-network'

ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
# the step size decays linearly to this fraction of lr over a run
LR_FLOOR = 0.1

DEFAULT_HYPER = {
    'lr': 0.01,
    'epochs': 500,
    'batch_size': 32,
    'momentum': 0.9,
    'seed': 0,
}


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: Tuple[int, ...] = (2, 6, 1)
    n_splines: int = 3
    hyper_c: float = 0.2
    train_regime: str = 'SI'
    eval_regime: Optional[str] = None
    weight_bits: int = 8
    dac_splines: int = 4
    w_max: float = 1.5
    x_range: float = 2.0
    bias_c: float = 2.0
    temperature: float = NOMINAL_TEMPERATURE
    target_scale: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, 'layer_sizes', sizes)
        if len(sizes) < 3:
            raise DomainError(f"a network needs at least one hidden layer, got sizes {sizes}")
        if min(sizes) < 1:
            raise DomainError(f"layer sizes must be >= 1, got {sizes}")
        if not self.w_max > 0 or not self.hyper_c > 0 or not self.x_range > 0:
            raise DomainError("w_max, x_range and hyper_c must be positive")
        if 2 * self.bias_c < self.x_range + self.w_max:
            raise DomainError(f"bias_c={self.bias_c} too small: 2*bias_c must cover x_range + w_max")
        if self.weight_bits < 1:
            raise DomainError(f"weight_bits must be >= 1, got {self.weight_bits}")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    seed: int
    n_train: int

    @property
    def samples(self):
        return [((float(a), float(b)), float(y)) for (a, b), y in zip(self.inputs, self.targets)]

    def split(self, name):
        if name == 'train':
            return self.inputs[:self.n_train], self.targets[:self.n_train]
        if name == 'test':
            return self.inputs[self.n_train:], self.targets[self.n_train:]
        if name == 'all':
            return self.inputs, self.targets
        raise DomainError(f"unknown split {name!r}")


@dataclass
class TrainedNetwork:
    spec: NetworkSpec
    master: List[np.ndarray]
    codes: List[np.ndarray]
    mismatch: List[np.ndarray]
    relu_mismatch: List[np.ndarray]
    mismatch_sigma: float = 0.0
    mismatch_seed: Optional[int] = None
    history: List[float] = field(default_factory=list)
    hyper: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    @property
    def weights(self):
        return self.codes

    @property
    def biases(self):
        """Codes of the always-on bias input, one per node."""
        return [c[:, -1] for c in self.codes]

    def copy(self):
        return TrainedNetwork(
            spec=self.spec,
            master=[m.copy() for m in self.master],
            codes=[c.copy() for c in self.codes],
            mismatch=[m.copy() for m in self.mismatch],
            relu_mismatch=[m.copy() for m in self.relu_mismatch],
            mismatch_sigma=self.mismatch_sigma,
            mismatch_seed=self.mismatch_seed,
            history=list(self.history),
            hyper=dict(self.hyper),
            metrics=dict(self.metrics),
        )


@dataclass
class Gradients:
    weights: List[np.ndarray]
    master: List[np.ndarray]
    loss: float


@dataclass
class Evaluation:
    mse: float
    predictions: np.ndarray


# -- dataset -----------------------------------------------------------------

def sine_target(x1, x2):
    return np.sin(2 * np.pi * np.asarray(x1)) * np.sin(2 * np.pi * np.asarray(x2))


def make_sine_dataset(n, seed=0, train_fraction=0.8):
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(0.0, 1.0, size=(int(n), 2))
    targets = sine_target(inputs[:, 0], inputs[:, 1])
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else 1
    return Dataset(inputs, targets, seed, n_train)


# -- hardware ----------------------------------------------------------------

class BlockHardware:
    """Tabulated multiplier, soft-ReLU and DAC levels for one regime."""

    def __init__(self, spec, regime):
        self.regime = regime
        self.ideal = regime == IDEAL_REGIME
        self.hyper_c = spec.hyper_c
        fan_in = max(spec.layer_sizes[:-1]) + 1
        bound = np.exp(MISMATCH_CLIP * MISMATCH_SIGMA_MAX)
        if self.ideal:
            self.gain = 1.0
            self.levels = None
            self.calibration = None
            self.dac = None
            self.signal_bias = max(spec.bias_c, fan_in * 2.0 * spec.w_max * bound * bound)
            return
        model = make_model(regime, spec.temperature)
        multiplier = make_multiplier(spec.n_splines, model, bias_c=spec.bias_c,
                                     x_range=spec.x_range, w_range=spec.w_max)
        self.calibration = multiplier.gain_map
        self.gain = multiplier.gain_map.gain
        if not self.gain > MIN_MULTIPLIER_GAIN:
            raise CalibrationError(f"{regime} S={spec.n_splines} multiplier gain {self.gain:.3g} "
                                   f"is below {MIN_MULTIPLIER_GAIN:g}")
        # |y| <= 2|w| for any input, so these windows hold every reachable argument
        pre_max = fan_in * 2.0 * spec.w_max / self.gain * bound
        act_max = max(1.0, (pre_max + 2.0 * spec.hyper_c) * bound)
        self.relu_node = make_relu_node(spec.n_splines, model, spec.hyper_c)
        self.relu = ShapeTable(self.relu_node, -pre_max, pre_max, TABLE_STEP)
        self.shape = ShapeTable(multiplier.node, -(spec.w_max + act_max), spec.w_max + act_max,
                                TABLE_STEP, shift=2.0 * spec.bias_c)
        self.multiplier = dataclasses.replace(multiplier, x_range=act_max)
        self.signal_bias = max(spec.bias_c, act_max)
        self.dac = make_dac(spec.weight_bits, spec.dac_splines, model)
        self.levels = dac_sweep(self.dac)

    def product(self, w, a):
        """Calibrated multiplier output and its partials w.r.t. w and a."""
        if self.ideal:
            return 2.0 * w * a, 2.0 * a, 2.0 * w
        p1, p2, p3, p4 = w + a, w - a, -w - a, -w + a
        h = self.shape
        y = (h(p1) - h(p2)) - (h(p4) - h(p3))
        d1, d2, d3, d4 = h.derivative(p1), h.derivative(p2), h.derivative(p3), h.derivative(p4)
        dw = (d1 - d2) + (d4 - d3)
        da = (d1 + d2) - (d4 + d3)
        return y / self.gain, dw / self.gain, da / self.gain

    def activation(self, pre):
        if self.ideal:
            return np.maximum(pre, 0.0), (pre > 0).astype(float)
        return self.relu(pre), self.relu.derivative(pre)

    def node_sum(self, signals, w_row, gains):
        """One node's pre-activation from differential inputs, solved block by block."""
        if self.ideal:
            return float(sum(g * 2.0 * w * s.value for s, w, g in zip(signals, w_row, gains)))
        return mac(signals, w_row, self.multiplier, calibrated=True, gains=gains)

    def node_activation(self, pre):
        if self.ideal:
            return max(pre, 0.0)
        return soft_relu(pre, self.hyper_c, self.relu_node)

    def codes_from_master(self, master):
        if self.levels is None:
            raise DomainError("the ideal regime has no DAC codes")
        out = []
        for m in master:
            idx = np.argmin(np.abs(np.abs(m)[..., None] - self.levels), axis=-1)
            out.append((np.sign(m) * idx).astype(np.int64))
        return out

    def weights_from_codes(self, codes, w_max):
        if self.levels is None:
            raise DomainError("the ideal regime cannot read DAC codes")
        return [w_max * np.sign(c) * self.levels[np.abs(c)] for c in codes]


@lru_cache(maxsize=None)
def hardware(spec, regime):
    key = IDEAL_REGIME if str(regime).upper() == IDEAL_REGIME else normalize_regime(regime)
    return BlockHardware(spec, key)


def _resolve_regime(net, regime, training=False):
    if regime is not None:
        return regime
    if not training and net.spec.eval_regime is not None:
        return net.spec.eval_regime
    return net.spec.train_regime


# -- forward / backward ------------------------------------------------------

def _forward(hw, weights, net, inputs):
    """Batched forward pass; returns prediction and the per-layer cache."""
    act = np.asarray(inputs, dtype=float)
    cache = []
    n_layers = len(weights)
    for layer, w in enumerate(weights):
        rows = act.shape[0]
        aug = np.concatenate([act, np.ones((rows, 1))], axis=1)
        y, dy_dw, dy_da = hw.product(w[None, :, :], aug[:, None, :])
        gain = net.mismatch[layer][None, :, :]
        pre = np.sum(gain * y, axis=2)
        entry = {'aug': aug, 'dy_dw': dy_dw, 'dy_da': dy_da, 'gain': gain}
        if layer < n_layers - 1:
            r, dr = hw.activation(pre)
            m = net.relu_mismatch[layer][None, :]
            act = m * r
            entry['dact'] = m * dr
        else:
            act = pre
        cache.append(entry)
    return act, cache


def _effective_weights(hw, net, weights, quantize):
    if weights is not None:
        return [np.asarray(w, dtype=float) for w in weights]
    if quantize and hw.levels is not None:
        return hw.weights_from_codes(net.codes, net.spec.w_max)
    return [net.spec.w_max * m for m in net.master]


def predict(net, inputs, regime=None, weights=None, quantize=True):
    hw = hardware(net.spec, _resolve_regime(net, regime))
    ws = _effective_weights(hw, net, weights, quantize)
    pred, _ = _forward(hw, ws, net, inputs)
    pred = pred[:, 0] if pred.shape[1] == 1 else pred
    return pred / net.spec.target_scale


def forward(net, input, regime=None):
    """Prediction for a single (x1, x2) input, evaluated with the node solver.

    Every layer sends its inputs (plus the always-on bias input) as
    differential signals into ``mac``; hidden nodes then apply the soft-ReLU
    node. Matches ``predict`` up to the table interpolation error.
    """
    values = [float(v) for v in input]
    if len(values) != net.spec.layer_sizes[0]:
        raise DomainError(f"expected {net.spec.layer_sizes[0]} inputs, got {len(values)}")
    hw = hardware(net.spec, _resolve_regime(net, regime))
    weights = _effective_weights(hw, net, None, True)
    last = len(weights) - 1
    for layer, w in enumerate(weights):
        signals = [to_differential(v, hw.signal_bias) for v in values + [1.0]]
        pre = [hw.node_sum(signals, w[i], net.mismatch[layer][i]) for i in range(w.shape[0])]
        if layer < last:
            gains = net.relu_mismatch[layer]
            values = [float(g * hw.node_activation(p)) for g, p in zip(gains, pre)]
        else:
            values = pre
    return float(values[0]) / net.spec.target_scale


def loss(net, batch, regime=None, weights=None, quantize=True):
    inputs, targets = batch
    pred = predict(net, inputs, regime, weights, quantize) * net.spec.target_scale
    diff = pred - np.asarray(targets) * net.spec.target_scale
    return float(np.mean(diff * diff))


def _backward(hw, weights, net, inputs, targets):
    pred, cache = _forward(hw, weights, net, inputs)
    rows = pred.shape[0]
    scaled = np.asarray(targets, dtype=float).reshape(rows, -1) * net.spec.target_scale
    residual = pred - scaled
    value = float(np.mean(residual * residual))
    delta = (2.0 / residual.size) * residual
    grads = [None] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        entry = cache[layer]
        local = delta[:, :, None] * entry['gain']
        grads[layer] = np.sum(local * entry['dy_dw'], axis=0)
        if not np.all(np.isfinite(grads[layer])):
            bad = np.argwhere(~np.isfinite(grads[layer]))[0]
            raise GradientError(f"non-finite gradient at layer {layer}, node {bad[0]}, input {bad[1]}",
                                block=(layer, int(bad[0]), int(bad[1])))
        if layer > 0:
            back = np.sum(local * entry['dy_da'], axis=1)[:, :-1]
            delta = back * cache[layer - 1]['dact']
    return grads, value


def backward(net, batch, regime=None, weights=None, quantize=True):
    """Gradients of the mean-squared error w.r.t. the analog weights.

    ``master`` carries the same gradients on the master scale (straight
    through the DAC quantization).
    """
    inputs, targets = batch
    if len(inputs) == 0:
        raise DomainError("backward needs a non-empty batch")
    hw = hardware(net.spec, _resolve_regime(net, regime, training=True))
    ws = _effective_weights(hw, net, weights, quantize)
    grads, value = _backward(hw, ws, net, inputs, targets)
    return Gradients(grads, [g * net.spec.w_max for g in grads], value)


# -- construction and training -----------------------------------------------

def init_network(spec, seed=0, regime=None):
    """Random master weights of scale 1/sqrt(fan-in); hidden biases start positive."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    master = []
    for layer, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = 1.0 / math.sqrt(n_in + 1)
        m = rng.uniform(-limit, limit, size=(n_out, n_in + 1))
        if layer < len(sizes) - 2:
            m[:, -1] = rng.uniform(0.0, limit, size=n_out)
        master.append(m)
    hw = hardware(spec, regime or spec.train_regime)
    codes = hw.codes_from_master(master) if hw.levels is not None else [np.zeros(m.shape, np.int64) for m in master]
    return TrainedNetwork(
        spec=spec,
        master=master,
        codes=codes,
        mismatch=[np.ones(m.shape) for m in master],
        relu_mismatch=[np.ones(n) for n in sizes[1:-1]],
    )


def train(net, dataset, lr=0.01, epochs=500, batch_size=32, seed=0, regime=None,
          momentum=0.9, quantize=True):
    """Minibatch Adam on the master weights with the hardware-in-the-loop loss.

    ``momentum`` is the first-moment decay. The step size falls linearly from
    ``lr`` to ``LR_FLOOR * lr`` over the run; steps are taken in master units
    so the same ``lr`` works for any ``w_max``.
    """
    if lr < 0 or epochs < 0 or batch_size < 1 or not 0 <= momentum < 1:
        raise DomainError(f"invalid hyper-parameters lr={lr}, epochs={epochs}, "
                          f"batch_size={batch_size}, momentum={momentum}")
    regime = regime or net.spec.train_regime
    hw = hardware(net.spec, regime)
    spec = net.spec
    out = net.copy()
    inputs, targets = dataset.split('train')
    rng = np.random.default_rng(seed)
    first = [np.zeros(m.shape) for m in out.master]
    second = [np.zeros(m.shape) for m in out.master]
    steps = 0
    history = []

    def current_weights():
        return _effective_weights(hw, out, None, quantize)

    for epoch in range(int(epochs)):
        rate = lr * (1.0 - (1.0 - LR_FLOOR) * epoch / max(int(epochs), 1))
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), batch_size):
            pick = order[start:start + batch_size]
            grads, _ = _backward(hw, current_weights(), out, inputs[pick], targets[pick])
            steps += 1
            for k, g in enumerate(grads):
                g = g * spec.w_max
                first[k] = momentum * first[k] + (1.0 - momentum) * g
                second[k] = ADAM_BETA2 * second[k] + (1.0 - ADAM_BETA2) * g * g
                m_hat = first[k] / (1.0 - momentum ** steps)
                v_hat = second[k] / (1.0 - ADAM_BETA2 ** steps)
                out.master[k] = np.clip(out.master[k] - rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS), -1.0, 1.0)
            if hw.levels is not None:
                out.codes = hw.codes_from_master(out.master)
        pred, _ = _forward(hw, current_weights(), out, inputs)
        diff = pred - targets.reshape(len(inputs), -1) * spec.target_scale
        epoch_loss = float(np.mean(diff * diff))
        history.append(epoch_loss)
        if not np.isfinite(epoch_loss) or epoch_loss > DIVERGENCE_LOSS:
            raise TrainingDivergedError(f"training diverged at epoch {len(history)} (loss={epoch_loss:.3g})",
                                        history)
    out.history = net.history + history
    out.hyper = {'lr': lr, 'epochs': int(epochs), 'batch_size': int(batch_size), 'seed': seed,
                 'momentum': momentum, 'regime': str(regime), 'quantize': bool(quantize)}
    return out


def inject_mismatch(net, sigma, seed=0):
    """Lognormal gain errors on every multiplier and activation mirror."""
    if not 0 <= sigma <= MISMATCH_SIGMA_MAX:
        raise DomainError(f"sigma must lie in [0, {MISMATCH_SIGMA_MAX}], got {sigma}")
    rng = np.random.default_rng(seed)

    def draw(shape):
        return np.exp(sigma * np.clip(rng.standard_normal(shape), -MISMATCH_CLIP, MISMATCH_CLIP))

    out = net.copy()
    out.mismatch = [draw(m.shape) for m in net.master]
    out.relu_mismatch = [draw(m.shape) for m in net.relu_mismatch]
    out.mismatch_sigma = float(sigma)
    out.mismatch_seed = seed
    return out


def evaluate(net, dataset, model_override=None, split='test'):
    """MSE on a split, optionally under another regime with the same codes."""
    inputs, targets = dataset.split(split)
    if len(inputs) == 0:
        return Evaluation(float('nan'), np.zeros(0))
    pred = predict(net, inputs, model_override)
    diff = pred - targets
    return Evaluation(float(np.mean(diff * diff)), pred)


def prediction_correlation(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float('nan')
    return float(pearsonr(a, b)[0])


# -- weight files ------------------------------------------------------------

def _to_list(arrays):
    return [a.tolist() for a in arrays]


def network_document(net):
    """JSON-ready description of a network and the hardware it was trained on."""
    hw = hardware(net.spec, net.hyper.get('regime', net.spec.train_regime))
    doc = {
        'format': FORMAT_NAME,
        'sacforge_version': __version__,
        'spec': dataclasses.asdict(net.spec),
        'weights': _to_list(net.codes),
        'master': _to_list(net.master),
        'mismatch': {
            'sigma': net.mismatch_sigma,
            'seed': net.mismatch_seed,
            'multiplier': _to_list(net.mismatch),
            'activation': _to_list(net.relu_mismatch),
        },
        'training': net.hyper,
        'history': list(net.history),
        'metrics': net.metrics,
        'target_scale': net.spec.target_scale,
    }
    doc['spec']['layer_sizes'] = list(net.spec.layer_sizes)
    if hw.dac is not None:
        doc['dac_offsets'] = {
            'n_bits': hw.dac.n_bits,
            'n_splines': hw.dac.n_splines,
            'offsets': hw.dac.offsets.tolist(),
            'reference_offsets': hw.dac.reference_offsets.tolist(),
            'c': hw.dac.c,
        }
        doc['calibration'] = {
            'w_grid': hw.calibration.w_grid.tolist(),
            'gains': hw.calibration.gains.tolist(),
            'gain': hw.calibration.gain,
        }
    return doc


def save_network(net, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(network_document(net), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def load_network(path):
    with open(path, encoding='utf-8') as f:
        doc = json.load(f)
    if doc.get('format') != FORMAT_NAME:
        raise DomainError(f"{path} is not a {FORMAT_NAME} weight file")
    spec_fields = dict(doc['spec'])
    spec_fields['layer_sizes'] = tuple(spec_fields['layer_sizes'])
    spec = NetworkSpec(**spec_fields)
    mismatch = doc['mismatch']
    return TrainedNetwork(
        spec=spec,
        master=[np.array(m, dtype=float) for m in doc['master']],
        codes=[np.array(c, dtype=np.int64) for c in doc['weights']],
        mismatch=[np.array(m, dtype=float) for m in mismatch['multiplier']],
        relu_mismatch=[np.array(m, dtype=float) for m in mismatch['activation']],
        mismatch_sigma=mismatch['sigma'],
        mismatch_seed=mismatch['seed'],
        history=list(doc['history']),
        hyper=dict(doc['training']),
        metrics=dict(doc['metrics']),
    )
