"""S-AC compute blocks built on the proto-shape.

Block-level signals are expressed in units of the node's bias current
(``SacNodeConfig.unit``); conversion to physical currents happens only at the
solver boundary, so the same numbers drive every regime.
"""

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import minimize

from sacforge.errors import CalibrationError, DomainError, FitError, SolverRangeError
from sacforge.gmp_core import (
    SacNodeConfig,
    ShapeTerm,
    compose_shape,
    make_node,
    proto_shape_batch,
    solve_batch,
    water_fill,
)

DAC_MAX_EXHAUSTIVE_BITS = 12
DAC_STRATIFIED_CODES = 4096
DAC_FIT_LIMIT = 0.2
DAC_GAMMA_STARTS = (1.5, 2.0, 3.0, 4.0, 6.0)
# gamma scalings the fitted DAC must stay monotone under; smooth laws act like
# the rectifier with c divided by a branch gain just below one
DAC_GAMMA_ROBUSTNESS = (1.0, 1.0025, 1.005, 1.0077, 1.01)
DAC_SWEEP_CHUNK = 4096
# allowed decrease between adjacent normalized DAC levels (solver rtol is 1e-9)
DAC_MONOTONE_TOL = 1e-8

MULTIPLIER_FIT_X_POINTS = 41
MULTIPLIER_FIT_W_POINTS = 9
# starting c as a fraction of x_range + w_range; c >= span puts every term in one linear piece
MULTIPLIER_C_STARTS = (0.1, 0.25, 0.5)
MIN_PRODUCT_GAIN = 1e-6
CALIBRATION_EPSILON = 1e-4
CALIBRATION_MONOTONE_TOL = 1e-2

TABLE_MAX_KNOTS = 2_000_000


# -- differential signalling -------------------------------------------------

@dataclass(frozen=True)
class DifferentialSignal:
    plus: float
    minus: float

    def __post_init__(self):
        for name in ('plus', 'minus'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise DomainError(f"{name} rail must be finite and nonnegative, got {value}")

    @property
    def value(self):
        return self.plus - self.minus


def to_differential(value, bias):
    if not bias > 0:
        raise DomainError(f"bias must be positive, got {bias}")
    if not (math.isfinite(value) and abs(value) <= 2 * bias):
        raise SolverRangeError(f"|value| = {abs(value)} exceeds 2*bias = {2 * bias}", term='value')
    return DifferentialSignal(bias + value / 2, bias - value / 2)


# -- tabulated shapes --------------------------------------------------------

class ShapeTable:
    """Proto-shape sampled on a uniform grid with its implicit derivative.

    Values and slopes come from one batched solve; between knots a cubic
    Hermite spline is used. Arguments are block-level (normalized) currents,
    offset by ``shift`` before they reach the node.
    """

    def __init__(self, node, lo, hi, step=0.005, shift=0.0):
        if not lo < hi:
            raise DomainError(f"table window must satisfy lo < hi, got [{lo}, {hi}]")
        n = int(math.ceil((hi - lo) / step)) + 1
        if n > TABLE_MAX_KNOTS:
            raise DomainError(f"table window [{lo:g}, {hi:g}] needs {n} knots at step {step:g}; "
                              f"limit is {TABLE_MAX_KNOTS}")
        self.node = node
        self.lo = float(lo)
        self.hi = float(hi)
        self.shift = float(shift)
        self.xs = np.linspace(lo, hi, n)
        values, slopes = proto_shape_batch((self.xs + shift) * node.unit, node)
        self.values = values / node.unit
        self.slopes = slopes
        self._spline = CubicHermiteSpline(self.xs, self.values, self.slopes)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lo - 1e-12) or np.any(x > self.hi + 1e-12) or not np.all(np.isfinite(x)):
            bad = x[(x < self.lo) | (x > self.hi) | ~np.isfinite(x)]
            raise SolverRangeError(
                f"argument {bad.ravel()[0]:.6g} outside table window [{self.lo:g}, {self.hi:g}]",
                term='table')
        return x

    def __call__(self, x):
        return self._spline(self._check(x))

    def derivative(self, x):
        return self._spline(self._check(x), 1)


# -- compressive DAC ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DacFit:
    offsets: np.ndarray
    reference_offsets: np.ndarray
    delta: np.ndarray
    c: float
    max_deviation: float
    n_codes: int


@dataclass(frozen=True, eq=False)
class DacConfig:
    n_bits: int
    n_splines: int
    offsets: np.ndarray
    reference_offsets: np.ndarray
    c: float
    node: SacNodeConfig
    base: float = 2.0
    max_deviation: float = float('nan')


class LogCurves(NamedTuple):
    codes: np.ndarray
    ideal: np.ndarray
    bfloat16: np.ndarray
    ieee754: np.ndarray


def ideal_dac_curve(codes, n_bits):
    """Normalized log2(1 + code) / n_bits."""
    return np.log2(1.0 + np.asarray(codes, dtype=float)) / n_bits


def code_to_bits(code, n_bits):
    """Bit vector of ``code`` with bits[i] weighing 2**i."""
    code = int(code)
    if not 0 <= code < 2 ** n_bits:
        raise DomainError(f"code {code} outside [0, {2 ** n_bits - 1}]")
    return np.array([(code >> i) & 1 for i in range(n_bits)], dtype=bool)


def _codes_to_bits(codes, n_bits):
    codes = np.asarray(codes, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n_bits)) & 1).astype(bool)


def dac_fit_codes(n_bits, seed=0):
    """Codes the fit is evaluated on: every code up to 12 bits, else a stratified sample."""
    full = 2 ** n_bits - 1
    if n_bits <= DAC_MAX_EXHAUSTIVE_BITS:
        return np.arange(full + 1)
    picked = {0, full}
    for m in range(n_bits):
        for k in (2 ** m - 1, 2 ** m, 2 ** m + 1):
            if 0 <= k <= full:
                picked.add(k)
    rng = np.random.default_rng(seed)
    while len(picked) < DAC_STRATIFIED_CODES:
        k = int(rng.integers(0, full))
        picked.update((k, k + 1))
    return np.array(sorted(picked), dtype=np.int64)


def _delta_from_params(raw):
    raw = np.concatenate([[0.0], np.asarray(raw, dtype=float)])
    return raw - np.log2(np.sum(np.exp2(raw)))


def _dac_closed_form(delta, ref_shift, gamma, bits):
    """Rectifier-limit DAC levels for a batch of bit vectors."""
    n_bits = bits.shape[1]
    s = delta.size
    row = (np.arange(n_bits)[:, None] + delta[None, :]).ravel()
    x = np.concatenate([row, ref_shift + delta])
    mask = np.concatenate([np.repeat(bits, s, axis=1), np.ones((bits.shape[0], s), dtype=bool)], axis=1)
    return water_fill(np.broadcast_to(x, mask.shape), gamma, mask)


def _normalize_levels(z, z0, zfull):
    span = zfull - z0
    if not span > 0:
        return None
    return (z - z0) / span


def _dac_objective(params, n_splines, bits, ideal, extremes):
    gamma = math.exp(params[0])
    ref_shift = params[1]
    delta = _delta_from_params(params[2:2 + n_splines - 1])
    deviation = None
    penalty = 0.0
    for scale in DAC_GAMMA_ROBUSTNESS:
        z = _dac_closed_form(delta, ref_shift, gamma * scale, bits)
        ends = _dac_closed_form(delta, ref_shift, gamma * scale, extremes)
        levels = _normalize_levels(z, ends[0], ends[1])
        if levels is None:
            return 10.0
        if deviation is None:
            deviation = float(np.max(np.abs(levels - ideal)))
        penalty += float(np.sum(np.maximum(-np.diff(levels), 0.0)))
    return deviation + 10.0 * penalty


@lru_cache(maxsize=None)
def _fit_dac(n_bits, n_splines, seed):
    codes = dac_fit_codes(n_bits, seed)
    bits = _codes_to_bits(codes, n_bits)
    extremes = _codes_to_bits([0, 2 ** n_bits - 1], n_bits)
    ideal = ideal_dac_curve(codes, n_bits)
    init_raw = -np.arange(1, n_splines) / n_splines
    best = None
    for gamma in DAC_GAMMA_STARTS:
        start = np.concatenate([[math.log(gamma), 0.0], init_raw])
        res = minimize(
            _dac_objective, start,
            args=(n_splines, bits, ideal, extremes),
            method='Nelder-Mead',
            options={'maxiter': 400 * start.size, 'xatol': 1e-7, 'fatol': 1e-9},
        )
        if best is None or res.fun < best.fun:
            best = res
    params = best.x
    delta = _delta_from_params(params[2:])
    gamma = math.exp(params[0])
    z = _dac_closed_form(delta, params[1], gamma, bits)
    ends = _dac_closed_form(delta, params[1], gamma, extremes)
    levels = _normalize_levels(z, ends[0], ends[1])
    deviation = float('inf') if levels is None else float(np.max(np.abs(levels - ideal)))
    offsets = np.arange(n_bits)[:, None] + delta[None, :]
    return DacFit(
        offsets=offsets,
        reference_offsets=params[1] + delta,
        delta=delta,
        c=gamma,
        max_deviation=deviation,
        n_codes=int(codes.size),
    )


def dac_fit_offsets(n_bits, n_splines, node=None, seed=0):
    """Fit spline offsets C[i, j] = (i - 1) + delta_j and the constraint current.

    The fit runs on the rectifier closed form over all codes (or a stratified
    sample above 12 bits) and keeps sum_j 2**delta_j = 1 exactly. When a
    ``node`` is given its model is used to re-measure the deviation.
    """
    if n_bits < 1 or n_splines < 1:
        raise DomainError(f"n_bits and n_splines must be >= 1, got {n_bits}, {n_splines}")
    fit = _fit_dac(int(n_bits), int(n_splines), int(seed))
    if node is not None:
        dac = _assemble_dac(fit, n_bits, n_splines, node.model, 2.0)
        codes = dac_fit_codes(n_bits, seed)
        measured = float(np.max(np.abs(dac_sweep(dac, codes) - ideal_dac_curve(codes, n_bits))))
        fit = dataclasses.replace(fit, max_deviation=measured)
    if not fit.max_deviation < DAC_FIT_LIMIT:
        raise FitError(f"DAC fit for {n_bits} bits, S={n_splines} stayed above {DAC_FIT_LIMIT:.0%}",
                       fit.max_deviation, fit.offsets)
    return fit


def _assemble_dac(fit, n_bits, n_splines, model, base):
    node = make_node(
        n_bits, n_splines, fit.c, model,
        offsets=fit.offsets,
        reference_offsets=fit.reference_offsets,
    )
    return DacConfig(
        n_bits=n_bits,
        n_splines=n_splines,
        offsets=fit.offsets,
        reference_offsets=fit.reference_offsets,
        c=fit.c,
        node=node,
        base=base,
        max_deviation=fit.max_deviation,
    )


def make_dac(n_bits, n_splines, model, seed=0, base=2.0):
    if not base > 1:
        raise DomainError(f"base must exceed 1, got {base}")
    fit = dac_fit_offsets(n_bits, n_splines, seed=seed)
    return _assemble_dac(fit, n_bits, n_splines, model, base)


def _dac_levels(config, bits):
    n = config.n_bits
    extremes = np.array([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)])
    ends = solve_batch(config.node, np.zeros((2, n)), extremes).z
    out = []
    for start in range(0, bits.shape[0], DAC_SWEEP_CHUNK):
        chunk = bits[start:start + DAC_SWEEP_CHUNK]
        out.append(solve_batch(config.node, np.zeros(chunk.shape), chunk).z)
    z = np.concatenate(out) if out else np.zeros(0)
    return (z - ends[0]) / (ends[1] - ends[0])


def dac_convert(bits, config):
    """Normalized node output for one bit vector (bits[i] weighs 2**i).

    The all-zeros code reads 0 (the floor) and the all-ones code reads 1.
    """
    vec = np.asarray(bits).astype(int).ravel()
    if vec.size != config.n_bits:
        raise DomainError(f"expected {config.n_bits} bits, got {vec.size}")
    if np.any((vec != 0) & (vec != 1)):
        raise DomainError("bits must be 0 or 1")
    value = _dac_levels(config, vec.astype(bool)[None, :])[0]
    return float(dac_rebase(value, config.base))


def dac_sweep(config, codes=None):
    """Normalized levels for many codes at once (all codes by default)."""
    if codes is None:
        codes = np.arange(2 ** config.n_bits)
    levels = _dac_levels(config, _codes_to_bits(codes, config.n_bits))
    return dac_rebase(levels, config.base)


def dac_rebase(value, theta):
    """Re-express a log2 value in base ``theta``: value / log_theta(2)."""
    if not (math.isfinite(theta) and theta > 1):
        raise DomainError(f"theta must be a finite base > 1, got {theta}")
    if theta == 2:
        return value
    return value / math.log(2, theta)


def reference_log_curves(n_points, n_bits=16):
    """Ideal log2 curve and exponent/mantissa segmentations over [0, 1].

    A code v maps to x = 1 + v (2**n_bits - 1); the float-style curves read
    x as exponent e plus a floor-quantized mantissa fraction.
    """
    if n_points < 2:
        raise DomainError(f"n_points must be at least 2, got {n_points}")
    codes = np.linspace(0.0, 1.0, int(n_points))
    x = 1.0 + codes * (2.0 ** n_bits - 1.0)
    mantissa, exponent = np.frexp(x)
    e = exponent - 1.0
    frac = 2.0 * mantissa - 1.0

    def segmented(mantissa_bits):
        q = 2.0 ** mantissa_bits
        return (e + np.floor(frac * q) / q) / n_bits

    return LogCurves(codes, np.log2(x) / n_bits, segmented(7), segmented(23))


# -- four-quadrant multiplier ------------------------------------------------

@dataclass(frozen=True, eq=False)
class GainMap:
    w_grid: np.ndarray
    gains: np.ndarray
    gain: float

    def __call__(self, w):
        return np.interp(w, self.w_grid, self.gains)

    def inverse(self, g):
        """Stored weight producing small-signal gain ``g`` (monotone branch only)."""
        keep = np.concatenate([[True], np.diff(self.gains) > 0])
        return np.interp(g, self.gains[keep], self.w_grid[keep])


@dataclass(frozen=True, eq=False)
class MultiplierConfig:
    node: SacNodeConfig
    bias_c: float = 1.0
    x_range: float = 1.0
    w_range: float = 0.5
    gain_map: Optional[GainMap] = None
    delta: Optional[np.ndarray] = None


def _centered_shape(delta, c, s):
    """Rectifier proto-shape H(s) with equal offsets in both banks."""
    s = np.asarray(s, dtype=float).ravel()
    x = np.concatenate([s[:, None] + delta[None, :], np.broadcast_to(delta, (s.size, delta.size))], axis=1)
    floor = water_fill(delta[None, :], c)[0]
    return water_fill(x, c) - floor


def _four_terms(shape, x, w):
    a = shape(w + x)
    b = shape(w - x)
    cc = shape(-w - x)
    d = shape(-w + x)
    return (a - b) - (d - cc)


def _product_gain(y, ideal):
    """Least-squares gain of raw products ``y`` against the ideal 2xw."""
    y = np.ravel(y)
    ideal = np.ravel(ideal)
    denom = float(np.dot(ideal, ideal))
    return float(np.dot(y, ideal)) / denom if denom else 0.0


def _multiplier_error(params, n_splines, xs, ws):
    c = math.exp(params[0])
    delta = np.concatenate([[0.0], params[1:n_splines]])
    shape = lambda s: _centered_shape(delta, c, s)
    gx, gw = np.meshgrid(xs, ws, indexing='ij')
    y = _four_terms(shape, gx.ravel(), gw.ravel())
    ideal = 2.0 * gx.ravel() * gw.ravel()
    gain = _product_gain(y, ideal)
    if not gain > MIN_PRODUCT_GAIN:
        return 10.0
    return float(np.mean(np.abs(y / gain - ideal)) / np.max(np.abs(ideal)))


@lru_cache(maxsize=None)
def design_multiplier_offsets(n_splines, x_range=1.0, w_range=0.5):
    """Spline offsets and c that make the four-term multiplier closest to 2xw.

    Designed on the rectifier closed form. Each S starts from the S-1 optimum
    with the extra spline parked out of reach, so the error never grows with S.
    Returns (delta, c) in normalized units.
    """
    if n_splines < 1:
        raise DomainError(f"n_splines must be >= 1, got {n_splines}")
    xs = np.linspace(-x_range, x_range, MULTIPLIER_FIT_X_POINTS)
    ws = np.linspace(-w_range, w_range, MULTIPLIER_FIT_W_POINTS)
    span = x_range + w_range
    starts = []
    if n_splines > 1:
        prev_delta, prev_c = design_multiplier_offsets(n_splines - 1, x_range, w_range)
        rel = prev_delta[1:] - prev_delta[0]
        parked = -(prev_delta.max() - prev_delta.min()) - 4.0 * span - 10.0 * prev_c
        starts.append(np.concatenate([[math.log(prev_c)], rel, [parked]]))
    for fraction in MULTIPLIER_C_STARTS:
        c0 = fraction * span
        rel = np.linspace(0.0, -c0, n_splines)[1:]
        starts.append(np.concatenate([[math.log(c0)], rel]))
    best = None
    for start in starts:
        res = minimize(
            _multiplier_error, start, args=(n_splines, xs, ws),
            method='Nelder-Mead',
            options={'maxiter': 600 * start.size, 'xatol': 1e-6, 'fatol': 1e-8},
        )
        if best is None or res.fun < best.fun:
            best = res
    if not best.fun < 1.0:
        raise FitError(f"multiplier design for S={n_splines} found no offsets with a usable gain", best.fun)
    delta = np.concatenate([[0.0], best.x[1:n_splines]])
    return delta - delta.mean(), math.exp(best.x[0])


def make_multiplier(n_splines, model, bias_c=1.0, x_range=1.0, w_range=0.5, calibrate=True):
    if 2 * bias_c < x_range + w_range:
        raise DomainError(
            f"bias_c={bias_c} too small: 2C must cover x_range + w_range = {x_range + w_range}")
    delta, c = design_multiplier_offsets(int(n_splines), float(x_range), float(w_range))
    node = make_node(1, n_splines, c, model, offsets=(delta - 2 * bias_c)[None, :], reference_offsets=delta)
    config = MultiplierConfig(node=node, bias_c=bias_c, x_range=x_range, w_range=w_range, delta=delta)
    if calibrate:
        grid = np.linspace(-w_range, w_range, 21)
        config = dataclasses.replace(config, gain_map=multiply_calibrate(config, grid))
    return config


_TERM_NAMES = ('h(2C+w+x)', 'h(2C+w-x)', 'h(2C-w-x)', 'h(2C-w+x)')


def multiply(x, w, config, calibrated=False):
    """Four-term S-AC product, exactly odd in x and in w.

    y = [h(2C+w+x) - h(2C+w-x)] - [h(2C-w+x) - h(2C-w-x)]
    """
    xa = np.asarray(x, dtype=float)
    wa = np.asarray(w, dtype=float)
    tol = 1e-9
    if np.any(np.abs(xa) > config.x_range * (1 + tol)) or not np.all(np.isfinite(xa)):
        raise SolverRangeError(f"x outside declared range +/-{config.x_range}", term='x')
    if np.any(np.abs(wa) > config.w_range * (1 + tol)) or not np.all(np.isfinite(wa)):
        raise SolverRangeError(f"w outside declared range +/-{config.w_range}", term='w')
    xa, wa = np.broadcast_arrays(xa, wa)
    two_c = 2.0 * config.bias_c
    p = two_c + wa
    m = two_c - wa
    args = np.stack([p + xa, p - xa, m - xa, m + xa])
    reach = config.x_range + config.w_range
    lo, hi = two_c - reach * (1 + tol), two_c + reach * (1 + tol)
    for name, arg in zip(_TERM_NAMES, args):
        if np.any(arg < lo) or np.any(arg > hi):
            raise SolverRangeError(f"{name} leaves the solver window [{lo:g}, {hi:g}]", term=name)
    unit = config.node.unit
    values, _ = proto_shape_batch(args * unit, config.node)
    a, b, c, d = values / unit
    y = (a - b) - (d - c)
    if calibrated:
        if config.gain_map is None:
            raise CalibrationError("multiplier has no gain map; run multiply_calibrate first")
        y = y / config.gain_map.gain
    return float(y) if y.ndim == 0 else y


def multiply_calibrate(config, w_grid):
    """Small-signal gain map g(w) = y(eps, w) / (2 eps) on ``w_grid``.

    The map is checked for monotonicity up to solver noise (relative to its
    largest entry) and then stored as its running maximum so ``inverse`` is
    well defined. The scalar ``gain`` that ``calibrated=True`` divides by is
    the least-squares fit of the full product surface (x in +/-x_range, the
    grid weights) against 2xw. The map itself may be flat around w = 0.
    """
    ws = np.sort(np.asarray(w_grid, dtype=float).ravel())
    if ws.size == 0:
        raise CalibrationError("calibration grid is empty")
    if np.any(np.abs(ws) > config.w_range * (1 + 1e-9)):
        raise CalibrationError(f"calibration grid leaves +/-{config.w_range}")
    eps = CALIBRATION_EPSILON * config.x_range
    measured = np.atleast_1d(multiply(np.full(ws.shape, eps), ws, config)) / (2 * eps)
    scale = float(np.max(np.abs(measured)))
    if np.any(np.diff(measured) < -CALIBRATION_MONOTONE_TOL * scale):
        worst = float(np.min(np.diff(measured)))
        raise CalibrationError(f"measured gain map is not monotone (step {worst:.3g}, max |g| {scale:.3g})")

    xs = np.linspace(-config.x_range, config.x_range, MULTIPLIER_FIT_X_POINTS)
    gx, gw = np.meshgrid(xs, ws, indexing='ij')
    gain = _product_gain(multiply(gx, gw, config), 2.0 * gx * gw)
    if not gain > MIN_PRODUCT_GAIN:
        raise CalibrationError(f"calibrated gain {gain:.3g} is not usable")
    return GainMap(ws, np.maximum.accumulate(measured), gain)


def mac(xs, ws, config, calibrated=False, gains=None):
    """KCL sum of multiplier outputs, reduced left to right.

    ``gains`` optionally scales each product (output mirror gain).
    """
    if len(xs) != len(ws):
        raise DomainError(f"mac needs equal lengths, got {len(xs)} and {len(ws)}")
    if gains is not None and len(gains) != len(ws):
        raise DomainError(f"mac needs one gain per product, got {len(gains)} for {len(ws)}")
    if not len(xs):
        return 0.0
    values = np.array([sig.value for sig in xs], dtype=float)
    products = np.atleast_1d(multiply(values, np.asarray(ws, dtype=float), config, calibrated))
    if gains is not None:
        products = products * np.asarray(gains, dtype=float)
    total = 0.0
    for p in products:
        total += float(p)
    return total


# -- activation --------------------------------------------------------------

def make_relu_node(n_splines, model, c=0.2):
    return make_node(1, n_splines, c, model)


def soft_relu(x, c, node):
    """Proto-shape over inputs {x, 0} with constraint current c (block units)."""
    if not c > 0:
        raise DomainError(f"c must be positive, got {c}")
    tuned = dataclasses.replace(node, c=c * node.unit)
    values, _ = proto_shape_batch(np.asarray(x, dtype=float) * node.unit, tuned)
    values = values / node.unit
    return float(values) if np.ndim(x) == 0 else values


def soft_sigmoid(node):
    """Odd composite h(x) - h(-x) of a single proto-shape."""
    shape = compose_shape([
        ShapeTerm(node),
        ShapeTerm(node, weight=-1.0, mirror=True),
    ])
    return lambda x: shape(np.asarray(x, dtype=float) * node.unit) / node.unit
