"""Generalized margin-propagation (GMP) node solver.

A node sees M branch inputs ``x_b`` (inputs plus spline offsets, optionally a
reference bank pinned at zero) and settles to the output level ``z`` that
satisfies, for every branch,

    z + D(u_b) - F(-u_b) = x_b        (u_b = V_b - V_B)
    sum_b D(u_b) = c

where F is the transistor forward law and D the diode law. The branch
relation is strictly increasing in ``u_b`` and the constraint strictly
decreasing in ``z``, so both loops are monotone root finds with closed-form
brackets. Everything below is batched over rows of a 2-D array.
"""

import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from sacforge.device_models import (
    DiodeModel,
    TransistorLaw,
    TransistorModel,
    default_diode,
)
from sacforge.errors import BracketError, ConvergenceError, DomainError

DEFAULT_RTOL = 1e-9
MAX_ITERATIONS = 200
FD_STEP = 1e-6
_EPS = np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class SacNodeConfig:
    """One S-AC node: N inputs, S splines, offsets C[i, j], constraint current c."""

    offsets: np.ndarray
    c: float
    model: TransistorModel
    diode: Optional[DiodeModel] = None
    include_zero_bank: bool = True
    reference_offsets: Optional[np.ndarray] = None
    unit: float = 1.0

    def __post_init__(self):
        offsets = np.array(self.offsets, dtype=float, ndmin=2)
        if offsets.ndim != 2 or offsets.shape[0] < 1 or offsets.shape[1] < 1:
            raise DomainError(f"offsets must be an N x S matrix with N, S >= 1, got shape {offsets.shape}")
        if not np.all(np.isfinite(offsets)):
            raise DomainError("offsets must be finite")
        if not (np.isfinite(self.c) and self.c > 0):
            raise DomainError(f"c must be a positive finite current, got {self.c}")
        if not self.unit > 0:
            raise DomainError(f"unit must be positive, got {self.unit}")
        ref = offsets[0] if self.reference_offsets is None else np.array(self.reference_offsets, dtype=float).ravel()
        if ref.shape != (offsets.shape[1],) or not np.all(np.isfinite(ref)):
            raise DomainError(f"reference_offsets must hold {offsets.shape[1]} finite values")
        offsets.setflags(write=False)
        ref = ref.copy()
        ref.setflags(write=False)
        object.__setattr__(self, 'offsets', offsets)
        object.__setattr__(self, 'reference_offsets', ref)
        object.__setattr__(self, 'c', float(self.c))
        if self.diode is None:
            object.__setattr__(self, 'diode', default_diode(self.model))

    @property
    def n_inputs(self):
        return self.offsets.shape[0]

    @property
    def n_splines(self):
        return self.offsets.shape[1]

    @property
    def n_branches(self):
        return self.offsets.size + (self.n_splines if self.include_zero_bank else 0)


@dataclass
class BatchSolution:
    z: np.ndarray          # (B,) output level
    u: np.ndarray          # (B, M) branch voltage relative to V_B, nan where disabled
    psi: np.ndarray        # (B, M) diode currents
    dpsi: np.ndarray       # (B, M) d(psi)/d(x_b)
    residual: np.ndarray   # (B,) |sum psi - c|
    iterations: int


@dataclass
class SolveResult:
    h: float
    v_b: float
    v_internal: np.ndarray
    v_branch: np.ndarray
    v_reference: Optional[np.ndarray]
    diode_currents: np.ndarray
    residual: float
    iterations: int
    inputs: np.ndarray
    enabled: np.ndarray


@dataclass
class Sensitivity:
    values: np.ndarray
    finite_difference: bool = False


@dataclass
class ShapeTerm:
    base: SacNodeConfig
    weight: float = 1.0
    x_shift: float = 0.0
    y_shift: float = 0.0
    mirror: bool = False


def default_offsets(n_inputs, n_splines, c):
    """Equally spaced spline offsets over [-c, c] (zero for a single spline)."""
    if n_splines == 1:
        row = np.zeros(1)
    else:
        row = np.linspace(-c, c, n_splines)
    return np.tile(row, (n_inputs, 1))


def make_node(n_inputs, n_splines, c, model, diode=None, offsets=None,
              include_zero_bank=True, reference_offsets=None):
    """Build a node from offsets and c given in units of ``model.bias_current``."""
    unit = model.bias_current
    if offsets is None:
        offsets = default_offsets(n_inputs, n_splines, c)
    offsets = np.array(offsets, dtype=float, ndmin=2)
    if offsets.shape != (n_inputs, n_splines):
        raise DomainError(f"offsets shape {offsets.shape} does not match ({n_inputs}, {n_splines})")
    ref = None if reference_offsets is None else np.asarray(reference_offsets, dtype=float) * unit
    return SacNodeConfig(
        offsets=offsets * unit,
        c=c * unit,
        model=model,
        diode=diode,
        include_zero_bank=include_zero_bank,
        reference_offsets=ref,
        unit=unit,
    )


def default_window(config):
    """Sweep window that reaches both asymptotes of the proto-shape."""
    values = np.concatenate([config.offsets.ravel(), config.reference_offsets])
    reach = (values.max() - values.min()) + 10.0 * config.c
    return -reach, reach


# -- branch and node solvers -------------------------------------------------

def _branch_response(model, diode, t):
    """Solve D(u) - F(-u) = t elementwise for a flat array t.

    Returns (u, psi, dpsi) with psi = D(u) and dpsi = d(psi)/dt.
    """
    f0 = model.zero_current
    u = np.empty_like(t)
    psi = np.zeros_like(t)
    dpsi = np.zeros_like(t)

    blocked = t <= -f0
    if np.any(blocked):
        u[blocked] = -model.inverse_forward(-t[blocked])

    idx = np.flatnonzero(~blocked)
    if idx.size == 0:
        return u, psi, dpsi

    target = t[idx]
    hi = diode.inverse(target + f0)
    lo = np.zeros_like(hi)
    cur = hi.copy()
    xtol = 1e-14 * model.voltage_scale
    todo = np.arange(idx.size)
    for _ in range(MAX_ITERATIONS):
        uu = cur[todo]
        r = diode.current(uu) - model.forward(-uu) - target[todo]
        dg = diode.slope(uu) + model.forward_slope(-uu)
        lo_t = np.where(r < 0, uu, lo[todo])
        hi_t = np.where(r > 0, uu, hi[todo])
        with np.errstate(divide='ignore', invalid='ignore'):
            newton = uu - r / dg
        inside = (newton > lo_t) & (newton < hi_t)
        nxt = np.where(inside, newton, 0.5 * (lo_t + hi_t))
        nxt = np.where(r == 0, uu, nxt)
        done = (np.abs(nxt - uu) <= np.maximum(xtol, 4 * _EPS * np.abs(uu))) | (hi_t - lo_t <= xtol)
        cur[todo] = nxt
        lo[todo] = lo_t
        hi[todo] = hi_t
        todo = todo[~done]
        if todo.size == 0:
            break
    else:
        raise ConvergenceError("branch relation did not converge", float(np.max(np.abs(r))), MAX_ITERATIONS)

    u[idx] = cur
    d_slope = diode.slope(cur)
    psi[idx] = diode.current(cur)
    with np.errstate(invalid='ignore'):
        dpsi[idx] = np.where(d_slope > 0, d_slope / (d_slope + model.forward_slope(-cur)), 0.0)
    return u, psi, dpsi


def _constraint(config, x, mask, z):
    """Sum of diode currents minus c at levels z, plus the per-branch pieces."""
    t = x - z[:, None]
    u = np.full(t.shape, np.nan)
    psi = np.zeros(t.shape)
    dpsi = np.zeros(t.shape)
    if np.any(mask):
        bu, bpsi, bdpsi = _branch_response(config.model, config.diode, t[mask])
        u[mask] = bu
        psi[mask] = bpsi
        dpsi[mask] = bdpsi
    return psi.sum(axis=1) - config.c, u, psi, dpsi


def _branch_inputs(config, inputs, enabled):
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    n, s = config.offsets.shape
    if inputs.shape[1] != n:
        raise DomainError(f"expected {n} inputs per row, got {inputs.shape[1]}")
    if not np.all(np.isfinite(inputs)):
        raise DomainError("inputs must be finite")
    rows = inputs.shape[0]
    x = (inputs[:, :, None] + config.offsets[None, :, :]).reshape(rows, n * s)
    if enabled is None:
        mask = np.ones((rows, n * s), dtype=bool)
    else:
        enabled = np.broadcast_to(np.asarray(enabled, dtype=bool), (rows, n))
        mask = np.repeat(enabled, s, axis=1)
    if config.include_zero_bank:
        x = np.concatenate([x, np.broadcast_to(config.reference_offsets, (rows, s))], axis=1)
        mask = np.concatenate([mask, np.ones((rows, s), dtype=bool)], axis=1)
    return x, mask


def solve_batch(config, inputs, enabled=None, rtol=DEFAULT_RTOL, initial=None):
    """Solve one node for every row of ``inputs`` (B x N).

    ``enabled`` (B x N booleans) switches whole input rows off, the way a DAC
    bit gates its spline copies. ``initial`` optionally seeds z inside the
    bracket; the solution does not depend on it.
    """
    x, mask = _branch_inputs(config, inputs, enabled)
    rows = x.shape[0]
    if not np.all(mask.any(axis=1)):
        raise BracketError("a row has no enabled branch", np.flatnonzero(~mask.any(axis=1)))
    c = config.c
    f0 = config.model.zero_current
    top = np.where(mask, x, -np.inf).max(axis=1)
    lo = top - c
    hi = top + f0

    all_rows = np.arange(rows)
    phi_lo = _constraint(config, x, mask, lo)[0]
    phi_hi = _constraint(config, x, mask, hi)[0]
    bad = (phi_lo < 0) | (phi_hi > 0)
    if np.any(bad):
        widen = c + 1e-9 * np.abs(top)
        lo = np.where(phi_lo < 0, lo - widen, lo)
        hi = np.where(phi_hi > 0, hi + widen, hi)
        phi_lo = _constraint(config, x, mask, lo)[0]
        phi_hi = _constraint(config, x, mask, hi)[0]
        bad = (phi_lo < 0) | (phi_hi > 0)
        if np.any(bad):
            raise BracketError("no sign change in the output-level bracket", all_rows[bad])

    if initial is None:
        z = lo.copy()
    else:
        z = np.clip(np.broadcast_to(np.asarray(initial, dtype=float), (rows,)), lo, hi).astype(float)

    scale = np.maximum(np.maximum(np.abs(top), c), f0)
    ztol = 8 * _EPS * scale
    # rounding floor of sum(psi) - c; F(0) dominates it when c is tiny
    phi_tol = np.maximum(rtol * c, 4 * x.shape[1] * _EPS * scale)
    out_z = np.empty(rows)
    out_u = np.full(x.shape, np.nan)
    out_psi = np.zeros(x.shape)
    out_dpsi = np.zeros(x.shape)
    out_res = np.empty(rows)
    polish = np.zeros(rows, dtype=int)
    todo = all_rows
    iterations = 0
    for iterations in range(1, MAX_ITERATIONS + 1):
        zz = z[todo]
        phi, u, psi, dpsi = _constraint(config, x[todo], mask[todo], zz)
        lo_t = np.where(phi > 0, zz, lo[todo])
        hi_t = np.where(phi < 0, zz, hi[todo])
        slope = dpsi.sum(axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            newton = zz + phi / slope
        inside = (newton > lo_t) & (newton < hi_t)
        nxt = np.where(inside, newton, 0.5 * (lo_t + hi_t))
        small = np.abs(phi) <= phi_tol[todo]
        polish[todo] += small
        tol = ztol[todo]
        collapsed = hi_t - lo_t <= 4 * tol
        done = (phi == 0) | collapsed | (small & ((np.abs(nxt - zz) <= tol) | (polish[todo] >= 3)))
        fin = todo[done]
        out_z[fin] = zz[done]
        out_u[fin] = u[done]
        out_psi[fin] = psi[done]
        out_dpsi[fin] = dpsi[done]
        out_res[fin] = np.abs(phi[done])
        z[todo] = nxt
        lo[todo] = lo_t
        hi[todo] = hi_t
        todo = todo[~done]
        if todo.size == 0:
            break
    else:
        raise ConvergenceError("output level did not converge", float(np.max(np.abs(phi))), MAX_ITERATIONS)

    return BatchSolution(out_z, out_u, out_psi, out_dpsi, out_res, iterations)


def _output_voltage(model, z):
    if model.law is TransistorLaw.IDEAL_RECTIFIER:
        return float(z)
    if z <= 0:
        return float('-inf')
    return float(model.inverse_forward(z))


def solve_node(config, inputs, rtol=DEFAULT_RTOL, initial=None, enabled=None):
    """Solve a single node for one input vector of length N."""
    vec = np.asarray(inputs, dtype=float).ravel()
    if vec.size != config.n_inputs:
        raise DomainError(f"expected {config.n_inputs} inputs, got {vec.size}")
    on = np.ones(config.n_inputs, dtype=bool) if enabled is None else np.asarray(enabled, dtype=bool).ravel()
    batch = solve_batch(config, vec[None, :], on[None, :], rtol=rtol, initial=initial)
    n, s = config.offsets.shape
    z = float(batch.z[0])
    v_b = _output_voltage(config.model, z)
    v_branch = batch.u[0, :n * s].reshape(n, s)
    v_reference = batch.u[0, n * s:] if config.include_zero_bank else None
    return SolveResult(
        h=z,
        v_b=v_b,
        v_internal=v_b + v_branch,
        v_branch=v_branch,
        v_reference=v_reference,
        diode_currents=batch.psi[0, :n * s].reshape(n, s),
        residual=float(batch.residual[0]),
        iterations=batch.iterations,
        inputs=vec,
        enabled=on,
    )


def _conductance_ratio(config, u):
    d = config.diode.slope(np.nan_to_num(u, nan=-np.inf))
    f = config.model.forward_slope(-np.nan_to_num(u, nan=-np.inf))
    with np.errstate(invalid='ignore'):
        return np.where(d > 0, d / (d + f), 0.0)


def jacobian(config, solution):
    """dh/dx_i at a converged solution, by implicit differentiation.

    Each branch contributes d(psi)/dt = D'/(D' + F'(-u)); the constraint then
    gives dz/dx_i = sum_j d(psi_ij)/dt / sum_all d(psi)/dt.
    """
    slopes = _conductance_ratio(config, solution.v_branch) * solution.enabled[:, None]
    total = slopes.sum()
    if solution.v_reference is not None:
        total += _conductance_ratio(config, solution.v_reference).sum()
    if total > 1e-12:
        return Sensitivity(slopes.sum(axis=1) / total, False)

    warnings.warn("singular linearization, falling back to central finite differences")
    x = solution.inputs
    values = np.empty(x.size)
    for i in range(x.size):
        step = FD_STEP * max(1.0, abs(x[i]))
        rows = np.repeat(x[None, :], 2, axis=0)
        rows[0, i] += step
        rows[1, i] -= step
        z = solve_batch(config, rows, np.repeat(solution.enabled[None, :], 2, axis=0)).z
        values[i] = (z[0] - z[1]) / (2 * step)
    return Sensitivity(values, True)


# -- closed form -------------------------------------------------------------

def water_fill(x, c, mask=None):
    """Batched rectifier-limit solve: z with sum(max(x - z, 0)) = c per row.

    Masked-out entries do not participate. Sorting is stable so equal inputs
    keep their index order.
    """
    x = np.array(x, dtype=float, ndmin=2)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    rows, m = x.shape
    c = np.broadcast_to(np.asarray(c, dtype=float), (rows,))
    ordered = -np.sort(-x, axis=1, kind='stable')
    finite = np.isfinite(ordered)
    if not np.all(finite[:, 0]):
        raise DomainError("water_fill needs at least one active entry per row")
    csum = np.cumsum(np.where(finite, ordered, 0.0), axis=1)
    levels = (csum - c[:, None]) / np.arange(1, m + 1)
    active = finite & (ordered > levels)
    count = np.where(active.all(axis=1), m, np.argmin(active, axis=1))
    return levels[np.arange(rows), count - 1]


def solve_rectifier_closed_form(inputs, c):
    x = np.asarray(inputs, dtype=float).ravel()
    if x.size == 0:
        raise DomainError("solve_rectifier_closed_form needs at least one input")
    if not c > 0:
        raise DomainError(f"c must be positive, got {c}")
    if not np.all(np.isfinite(x)):
        raise DomainError("inputs must be finite")
    return float(water_fill(x[None, :], c)[0])


# -- proto-shape -------------------------------------------------------------

def _require_proto(config):
    if config.n_inputs != 1 or not config.include_zero_bank:
        raise DomainError("proto-shape needs a single-input node with the zero bank enabled")


def floor_level(config):
    """Output level with the input bank switched off (the left asymptote)."""
    _require_proto(config)
    return float(solve_batch(config, np.zeros((1, 1)), np.zeros((1, 1), dtype=bool)).z[0])


def proto_shape_batch(xs, config, x_ref=None):
    """Return (h_hat, dh_hat/dx) for every x in ``xs``.

    h_hat is the output relative to the left asymptote, or relative to the
    output at ``x_ref`` when given.
    """
    _require_proto(config)
    xs = np.asarray(xs, dtype=float)
    flat = xs.ravel()
    if flat.size == 0:
        return np.zeros(xs.shape), np.zeros(xs.shape)
    sol = solve_batch(config, flat[:, None])
    if x_ref is None:
        base = floor_level(config)
    else:
        base = float(solve_batch(config, np.array([[x_ref]], dtype=float)).z[0])
    s = config.n_splines
    total = sol.dpsi.sum(axis=1)
    slopes = sol.dpsi[:, :s].sum(axis=1) / total
    return (sol.z - base).reshape(xs.shape), slopes.reshape(xs.shape)


def proto_shape(x, config, x_ref=None):
    values, _ = proto_shape_batch(x, config, x_ref)
    return float(values) if np.ndim(x) == 0 else values


def sweep(config, x_min, x_max, n_points):
    if not x_min < x_max:
        raise DomainError(f"x_min must be below x_max, got [{x_min}, {x_max}]")
    if n_points < 2:
        raise DomainError(f"n_points must be at least 2, got {n_points}")
    xs = np.linspace(x_min, x_max, int(n_points))
    values, _ = proto_shape_batch(xs, config)
    return list(zip(xs.tolist(), values.tolist()))


def compose_shape(spec: Sequence) -> Callable:
    """Sum of shifted, scaled (and optionally mirrored) proto-shapes as a callable of x."""
    terms: List[ShapeTerm] = [t if isinstance(t, ShapeTerm) else ShapeTerm(**t) for t in spec]
    if not terms:
        raise DomainError("compose_shape needs at least one term")
    for term in terms:
        _require_proto(term.base)

    def shape(x):
        xs = np.asarray(x, dtype=float)
        total = np.zeros(xs.shape)
        for term in terms:
            arg = xs - term.x_shift
            values, _ = proto_shape_batch(-arg if term.mirror else arg, term.base)
            total = total + term.weight * values + term.y_shift
        return float(total) if xs.ndim == 0 else total

    return shape
