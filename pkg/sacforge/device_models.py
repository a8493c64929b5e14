"""Transistor and diode current laws used by the GMP solver.

All laws are vectorized over numpy arrays. Voltages are in volts; currents are
in the same (arbitrary) unit as ``spec_current``. The rectifier law has no
thermal voltage and reads its argument directly as a current.
"""

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from sacforge.errors import DomainError

BOLTZMANN_OVER_Q = 8.617e-5  # V/K
NOMINAL_TEMPERATURE = 300.0
TEMPERATURE_RANGE = (200.0, 450.0)
DEFAULT_SLOPE_FACTOR = 1.3
DIODE_SATURATION_RATIO = 100.0
MOBILITY_EXPONENT = -1.5

WEAK_INVERSION_LIMIT = 0.1
STRONG_INVERSION_LIMIT = 10.0

# Inversion coefficient each regime is biased at.
REGIME_BIAS = {
    'WI': 0.01,
    'MI': 1.0,
    'SI': 100.0,
    'RECT': 1.0,
}


class TransistorLaw(Enum):
    WEAK_INVERSION = 'WeakInversionExponential'
    STRONG_INVERSION = 'StrongInversionSquareLaw'
    EKV = 'EkvInterpolated'
    IDEAL_RECTIFIER = 'IdealRectifier'


class DiodeLaw(Enum):
    IDEAL_RECTIFIER = 'IdealRectifier'
    EXPONENTIAL = 'ExponentialDiode'


REGIME_LAWS = {
    'WI': TransistorLaw.WEAK_INVERSION,
    'MI': TransistorLaw.EKV,
    'SI': TransistorLaw.STRONG_INVERSION,
    'RECT': TransistorLaw.IDEAL_RECTIFIER,
}


def thermal_voltage(temperature):
    return BOLTZMANN_OVER_Q * temperature


def _check_finite(value, name='v'):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {value!r}")
    return arr


def _result(arr, like):
    """Return a Python float for scalar inputs, an array otherwise."""
    if np.ndim(like) == 0:
        return float(arr)
    return arr


@dataclass(frozen=True)
class RegimeLabel:
    label: str
    inversion_coefficient: float


@dataclass(frozen=True)
class TransistorModel:
    law: TransistorLaw
    spec_current: float = 1.0
    slope_factor: float = DEFAULT_SLOPE_FACTOR
    temperature: float = NOMINAL_TEMPERATURE
    bias_current: float = 1.0

    def __post_init__(self):
        if not isinstance(self.law, TransistorLaw):
            object.__setattr__(self, 'law', TransistorLaw(self.law))
        if not (self.spec_current > 0 and math.isfinite(self.spec_current)):
            raise DomainError(f"spec_current must be positive, got {self.spec_current}")
        if not self.slope_factor >= 1.0:
            raise DomainError(f"slope_factor must be >= 1, got {self.slope_factor}")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if not self.bias_current > 0:
            raise DomainError(f"bias_current must be positive, got {self.bias_current}")

    @property
    def thermal_voltage(self):
        return thermal_voltage(self.temperature)

    @property
    def voltage_scale(self):
        """Natural voltage unit of the law (volts per normalized unit)."""
        if self.law is TransistorLaw.IDEAL_RECTIFIER:
            return 1.0
        return self.thermal_voltage

    @property
    def inversion_coefficient(self):
        return self.bias_current / self.spec_current

    @property
    def regime(self):
        if self.law is TransistorLaw.IDEAL_RECTIFIER:
            return RegimeLabel('RECT', self.inversion_coefficient)
        return classify_regime(self.bias_current, self.spec_current)

    def forward(self, v):
        """Forward current F(v)."""
        v = np.asarray(v, dtype=float)
        if self.law is TransistorLaw.IDEAL_RECTIFIER:
            return np.maximum(v, 0.0)
        n, ut, i_s = self.slope_factor, self.thermal_voltage, self.spec_current
        if self.law is TransistorLaw.WEAK_INVERSION:
            with np.errstate(over='ignore'):
                return i_s * np.exp(v / (n * ut))
        if self.law is TransistorLaw.STRONG_INVERSION:
            a = np.maximum(v, 0.0) / (2.0 * n * ut)
            return i_s * a * a
        root = np.logaddexp(0.0, v / (2.0 * n * ut))
        return i_s * root * root

    def forward_slope(self, v):
        """dF/dv in current per volt."""
        v = np.asarray(v, dtype=float)
        if self.law is TransistorLaw.IDEAL_RECTIFIER:
            return np.where(v > 0, 1.0, 0.0)
        n, ut, i_s = self.slope_factor, self.thermal_voltage, self.spec_current
        if self.law is TransistorLaw.WEAK_INVERSION:
            with np.errstate(over='ignore'):
                return i_s / (n * ut) * np.exp(v / (n * ut))
        if self.law is TransistorLaw.STRONG_INVERSION:
            a = np.maximum(v, 0.0) / (2.0 * n * ut)
            return i_s * a / (n * ut)
        a = v / (2.0 * n * ut)
        return i_s * np.logaddexp(0.0, a) * expit(a) / (n * ut)

    def inverse_forward(self, i):
        """Voltage v with F(v) = i, for i > 0 (rectifier: i >= 0)."""
        i = np.asarray(i, dtype=float)
        if self.law is TransistorLaw.IDEAL_RECTIFIER:
            return i.copy() if i.ndim else i
        n, ut, i_s = self.slope_factor, self.thermal_voltage, self.spec_current
        with np.errstate(divide='ignore', invalid='ignore'):
            if self.law is TransistorLaw.WEAK_INVERSION:
                return n * ut * np.log(i / i_s)
            root = np.sqrt(np.maximum(i, 0.0) / i_s)
            if self.law is TransistorLaw.STRONG_INVERSION:
                return 2.0 * n * ut * root
            # ln(exp(s) - 1) written to stay finite for large s
            return 2.0 * n * ut * (root + np.log(-np.expm1(-root)))

    @property
    def zero_current(self):
        return float(self.forward(0.0))


@dataclass(frozen=True)
class DiodeModel:
    law: DiodeLaw
    saturation_current: float = DIODE_SATURATION_RATIO
    temperature: float = NOMINAL_TEMPERATURE

    def __post_init__(self):
        if not isinstance(self.law, DiodeLaw):
            object.__setattr__(self, 'law', DiodeLaw(self.law))
        if not self.saturation_current > 0:
            raise DomainError(f"saturation_current must be positive, got {self.saturation_current}")

    @property
    def thermal_voltage(self):
        return thermal_voltage(self.temperature)

    def current(self, v):
        v = np.asarray(v, dtype=float)
        if self.law is DiodeLaw.IDEAL_RECTIFIER:
            return np.maximum(v, 0.0)
        with np.errstate(over='ignore'):
            return self.saturation_current * np.expm1(np.maximum(v, 0.0) / self.thermal_voltage)

    def slope(self, v):
        v = np.asarray(v, dtype=float)
        if self.law is DiodeLaw.IDEAL_RECTIFIER:
            return np.where(v > 0, 1.0, 0.0)
        ut = self.thermal_voltage
        with np.errstate(over='ignore'):
            return np.where(v > 0, self.saturation_current / ut * np.exp(np.maximum(v, 0.0) / ut), 0.0)

    def inverse(self, i):
        """Smallest voltage conducting current i >= 0."""
        i = np.maximum(np.asarray(i, dtype=float), 0.0)
        if self.law is DiodeLaw.IDEAL_RECTIFIER:
            return i
        return self.thermal_voltage * np.log1p(i / self.saturation_current)


def forward_current(model, v):
    arr = _check_finite(v)
    return _result(model.forward(arr), v)


def channel_current(model, vg, vs, vd):
    """Drain current as forward minus reverse component."""
    vg_, vs_, vd_ = (_check_finite(a, name) for a, name in ((vg, 'vg'), (vs, 'vs'), (vd, 'vd')))
    out = model.forward(vg_ - vs_) - model.forward(vg_ - vd_)
    return float(out) if out.ndim == 0 else out


def diode_current(model, v):
    arr = _check_finite(v)
    return _result(model.current(arr), v)


def default_diode(model):
    if model.law is TransistorLaw.IDEAL_RECTIFIER:
        return DiodeModel(DiodeLaw.IDEAL_RECTIFIER, 1.0, model.temperature)
    return DiodeModel(
        DiodeLaw.EXPONENTIAL,
        DIODE_SATURATION_RATIO * model.spec_current,
        model.temperature,
    )


def classify_regime(bias_current, spec_current):
    if not (bias_current > 0 and spec_current > 0):
        raise DomainError(
            f"currents must be positive, got bias={bias_current}, spec={spec_current}")
    ic = bias_current / spec_current
    if ic < WEAK_INVERSION_LIMIT:
        label = 'WI'
    elif ic > STRONG_INVERSION_LIMIT:
        label = 'SI'
    else:
        label = 'MI'
    return RegimeLabel(label, ic)


def normalize_regime(regime):
    """Map user spellings ('wi', 'rect', 'rectifier', RegimeLabel) to a key of REGIME_LAWS."""
    if isinstance(regime, RegimeLabel):
        regime = regime.label
    key = str(regime).strip().upper()
    if key == 'RECTIFIER':
        key = 'RECT'
    if key not in REGIME_LAWS:
        raise DomainError(f"unknown regime {regime!r}; expected one of wi, mi, si, rect")
    return key


def make_model(regime, temperature=NOMINAL_TEMPERATURE, slope_factor=DEFAULT_SLOPE_FACTOR,
               spec_current=1.0, scale_spec_current=False):
    """Build the transistor model a node uses when biased in ``regime``.

    The bias current is fixed by the regime at the nominal spec current; with
    ``scale_spec_current`` the spec current itself follows temperature, which
    moves the inversion coefficient the way a real bias point drifts.
    """
    lo, hi = TEMPERATURE_RANGE
    if not lo <= temperature <= hi:
        raise DomainError(f"temperature {temperature} K outside [{lo:g}, {hi:g}] K")
    key = normalize_regime(regime)
    bias = REGIME_BIAS[key] * spec_current
    if scale_spec_current:
        spec_current = spec_current * (temperature / NOMINAL_TEMPERATURE) ** (2.0 + MOBILITY_EXPONENT)
    return TransistorModel(
        law=REGIME_LAWS[key],
        spec_current=spec_current,
        slope_factor=slope_factor,
        temperature=float(temperature),
        bias_current=bias,
    )


def with_temperature(model, temperature):
    return dataclasses.replace(model, temperature=float(temperature))
