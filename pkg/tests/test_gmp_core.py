"""Tests for the GMP node solver, the closed form and the proto-shape."""

import os
import sys
import unittest
import warnings

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from sacforge.device_models import make_model
from sacforge.errors import DomainError, SacForgeError
from sacforge.gmp_core import (
    ShapeTerm,
    compose_shape,
    default_offsets,
    default_window,
    floor_level,
    jacobian,
    make_node,
    proto_shape,
    proto_shape_batch,
    solve_batch,
    solve_node,
    solve_rectifier_closed_form,
    sweep,
    water_fill,
)
from tests.conftest import REGIMES


def _random_node(rng, regime, n, s):
    model = make_model(regime)
    return make_node(n, s, rng.uniform(0.05, 1.0), model,
                     offsets=rng.uniform(-1.0, 1.0, size=(n, s)),
                     reference_offsets=rng.uniform(-1.0, 1.0, size=s))


class TestWaterFill(unittest.TestCase):
    """Closed-form rectifier solve."""

    def test_single_input(self):
        """A lone input sits c below its value."""
        self.assertAlmostEqual(solve_rectifier_closed_form([0.7], 0.2), 0.5)

    def test_equal_inputs_share_the_budget(self):
        """Equal inputs split the constraint current evenly."""
        self.assertAlmostEqual(solve_rectifier_closed_form([1.0, 1.0, 1.0, 1.0], 0.4), 0.9)

    def test_far_input_does_not_participate(self):
        """An input far below the level carries no current."""
        self.assertAlmostEqual(solve_rectifier_closed_form([1.0, -5.0], 0.2), 0.8)

    def test_constraint_holds(self):
        """Branch currents sum to c on random instances."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(50, 7))
        c = rng.uniform(0.1, 2.0, size=50)
        z = water_fill(x, c)
        np.testing.assert_allclose(np.maximum(x - z[:, None], 0).sum(axis=1), c, rtol=1e-12)

    def test_mask_removes_entries(self):
        """Masked entries are ignored by the fill."""
        x = np.array([[2.0, 1.0, 0.5]])
        mask = np.array([[False, True, True]])
        self.assertAlmostEqual(float(water_fill(x, 0.2, mask)[0]), 0.8)

    def test_errors(self):
        """Empty, non-positive c and NaN inputs are rejected."""
        with self.assertRaises(DomainError):
            solve_rectifier_closed_form([], 1.0)
        with self.assertRaises(DomainError):
            solve_rectifier_closed_form([1.0], 0.0)
        with self.assertRaises(DomainError):
            solve_rectifier_closed_form([np.nan], 1.0)


class TestNodeConfig(unittest.TestCase):
    """Node construction and validation."""

    def test_default_offsets(self):
        """Default offsets are evenly spaced around zero."""
        np.testing.assert_allclose(default_offsets(2, 3, 0.5), [[-0.5, 0.0, 0.5]] * 2)
        np.testing.assert_array_equal(default_offsets(1, 1, 0.5), [[0.0]])

    def test_make_node_scales_by_bias_current(self):
        """Offsets and c are scaled by the regime bias current."""
        node = make_node(1, 2, 0.2, make_model('wi'))
        self.assertAlmostEqual(node.unit, 0.01)
        self.assertAlmostEqual(node.c, 0.002)
        np.testing.assert_allclose(node.offsets, [[-0.002, 0.002]])
        np.testing.assert_allclose(node.reference_offsets, [-0.002, 0.002])
        self.assertEqual(node.n_branches, 4)

    def test_offsets_are_read_only(self):
        """Offset arrays cannot be mutated after construction."""
        node = make_node(1, 2, 0.2, make_model('si'))
        with self.assertRaises(ValueError):
            node.offsets[0, 0] = 1.0

    def test_invalid_configs(self):
        """Bad offset shapes, c and non-finite offsets raise DomainError."""
        model = make_model('si')
        with self.assertRaises(DomainError):
            make_node(1, 2, 0.2, model, offsets=np.zeros((2, 2)))
        with self.assertRaises(DomainError):
            make_node(1, 2, 0.0, model)
        with self.assertRaises(DomainError):
            make_node(1, 2, 0.2, model, offsets=[[0.0, np.inf]])


class TestSolver(unittest.TestCase):
    """Residual and agreement properties of the node solver."""

    def test_residual_on_random_instances(self):
        """Residual stays below rtol times c in every regime."""
        rng = np.random.default_rng(0)
        for regime in REGIMES:
            for n in (1, 2, 4):
                for s in (1, 3):
                    node = _random_node(rng, regime, n, s)
                    inputs = rng.uniform(-2.0, 2.0, size=(40, n)) * node.unit
                    sol = solve_batch(node, inputs)
                    self.assertLessEqual(float(sol.residual.max()), 1e-9 * node.c, (regime, n, s))
                    np.testing.assert_allclose(sol.psi.sum(axis=1), node.c, rtol=1e-8)

    def test_rectifier_equals_water_filling(self):
        """The rectifier solve matches the closed form."""
        rng = np.random.default_rng(1)
        node = _random_node(rng, 'rect', 3, 2)
        inputs = rng.uniform(-2.0, 2.0, size=(30, 3))
        sol = solve_batch(node, inputs)
        branches = np.concatenate([
            (inputs[:, :, None] + node.offsets[None]).reshape(30, -1),
            np.broadcast_to(node.reference_offsets, (30, 2)),
        ], axis=1)
        np.testing.assert_allclose(sol.z, water_fill(branches, node.c), rtol=1e-6, atol=1e-12)

    def test_rows_are_independent_of_the_batch(self):
        """A row solves identically alone or in a batch."""
        rng = np.random.default_rng(2)
        node = _random_node(rng, 'mi', 2, 2)
        inputs = rng.uniform(-1.0, 1.0, size=(12, 2))
        together = solve_batch(node, inputs).z
        alone = np.array([solve_batch(node, row[None, :]).z[0] for row in inputs])
        np.testing.assert_array_equal(together, alone)

    def test_initial_guess_does_not_change_answer(self):
        """A seeded start converges to the same level."""
        node = make_node(2, 2, 0.3, make_model('si'))
        x = np.array([[0.4 * node.unit, -0.1 * node.unit]])
        a = solve_batch(node, x).z[0]
        b = solve_batch(node, x, initial=a + 0.01 * node.unit).z[0]
        self.assertAlmostEqual(a, b, delta=1e-8 * node.unit)

    def test_solve_node_fields(self):
        """solve_node fills every per-branch field."""
        node = make_node(2, 3, 0.2, make_model('wi'))
        result = solve_node(node, [0.1 * node.unit, -0.2 * node.unit])
        self.assertEqual(result.v_branch.shape, (2, 3))
        self.assertEqual(result.v_reference.shape, (3,))
        self.assertEqual(result.diode_currents.shape, (2, 3))
        self.assertTrue(np.all(result.diode_currents >= 0))
        self.assertLessEqual(result.residual, 1e-9 * node.c)
        self.assertTrue(np.isfinite(result.v_b))

    def test_disabled_input_contributes_nothing(self):
        """A disabled input does not move the output."""
        node = make_node(2, 1, 0.2, make_model('rect'))
        on = solve_node(node, [5.0, 0.0], enabled=[False, True])
        off = solve_node(node, [-5.0, 0.0], enabled=[False, True])
        self.assertEqual(on.h, off.h)

    def test_errors(self):
        """Wrong input count, NaN and empty rows are rejected."""
        node = make_node(2, 1, 0.2, make_model('si'))
        with self.assertRaises(DomainError):
            solve_node(node, [0.1])
        with self.assertRaises(DomainError):
            solve_node(node, [np.nan, 0.0])
        closed = make_node(1, 1, 0.2, make_model('si'), include_zero_bank=False)
        with self.assertRaises(SacForgeError):
            solve_batch(closed, np.zeros((1, 1)), np.zeros((1, 1), dtype=bool))

    def test_tiny_constraint_current_converges(self):
        """A constraint current of 1e-6 still converges on smooth laws."""
        for regime in ('WI', 'MI', 'SI'):
            node = make_node(1, 1, 1e-6, make_model(regime))
            inputs = np.linspace(-1.0, 1.0, 21)[:, None] * node.unit
            sol = solve_batch(node, inputs)
            self.assertTrue(np.all(np.isfinite(sol.z)), regime)
            np.testing.assert_allclose(sol.psi.sum(axis=1), node.c, rtol=1e-5, err_msg=regime)


class TestJacobian(unittest.TestCase):
    """Implicit sensitivities of the output level."""

    def test_matches_central_differences(self):
        """Implicit Jacobian agrees with central differences."""
        rng = np.random.default_rng(4)
        for regime in ('WI', 'MI', 'SI'):
            for _ in range(3):
                node = _random_node(rng, regime, 3, 2)
                x = rng.uniform(-1.0, 1.0, size=3) * node.unit
                sens = jacobian(node, solve_node(node, x))
                self.assertFalse(sens.finite_difference)
                step = 1e-5 * node.c
                fd = np.empty(3)
                for i in range(3):
                    e = np.zeros(3)
                    e[i] = step
                    z = solve_batch(node, np.array([x + e, x - e])).z
                    fd[i] = (z[0] - z[1]) / (2 * step)
                # rounding in z scales with F(0), so compare against the largest component
                np.testing.assert_allclose(sens.values, fd, rtol=0, atol=1e-5 * np.max(np.abs(fd)))

    def test_gradient_sums_to_at_most_one(self):
        """Sensitivities are nonnegative and sum to at most one."""
        rng = np.random.default_rng(5)
        node = _random_node(rng, 'mi', 4, 3)
        x = rng.uniform(-1.0, 1.0, size=4) * node.unit
        values = jacobian(node, solve_node(node, x)).values
        self.assertTrue(np.all(values >= 0))
        self.assertLessEqual(values.sum(), 1.0 + 1e-12)

    def test_singular_point_falls_back_to_finite_differences(self):
        """A singular system warns and falls back to differences."""
        node = make_node(1, 1, 0.2, make_model('rect'), include_zero_bank=False)
        result = solve_node(node, [0.5])
        result.v_branch[:] = -1.0
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            sens = jacobian(node, result)
        self.assertTrue(sens.finite_difference)
        self.assertTrue(caught)
        self.assertAlmostEqual(float(sens.values[0]), 1.0, places=6)


class TestProtoShape(unittest.TestCase):
    """Shape, slope and composition of the proto-shape."""

    def test_rectifier_proto_shape_is_a_soft_ramp(self):
        """Rectifier proto-shape is zero, then a half-slope knee, then identity."""
        node = make_node(1, 1, 0.2, make_model('rect'))
        xs = np.array([-5.0, -0.3, 0.0, 0.1, 5.0])
        values, slopes = proto_shape_batch(xs, node)
        np.testing.assert_allclose(values, [0.0, 0.0, 0.1, 0.15, 5.0], atol=1e-9)
        np.testing.assert_allclose(slopes, [0.0, 0.0, 0.5, 0.5, 1.0], atol=1e-9)

    def test_slopes_bounded_in_every_regime(self):
        """Slopes stay in [0, 1] with flat and unit asymptotes."""
        for regime in REGIMES:
            for s in (1, 3):
                node = make_node(1, s, 0.2, make_model(regime))
                lo, hi = default_window(node)
                values, slopes = proto_shape_batch(np.linspace(lo, hi, 201), node)
                self.assertGreaterEqual(float(slopes.min()), -1e-6, regime)
                self.assertLessEqual(float(slopes.max()), 1 + 1e-6, regime)
                self.assertLess(abs(float(slopes[0])), 1e-3, regime)
                self.assertLess(abs(1.0 - float(slopes[-1])), 1e-3, regime)
                floor = max(node.unit, node.model.zero_current)
                self.assertTrue(np.all(np.diff(values) >= -1e-12 * floor), regime)

    def test_left_asymptote_is_zero(self):
        """Proto-shape reads zero far to the left."""
        node = make_node(1, 2, 0.2, make_model('si'))
        lo, _ = default_window(node)
        self.assertAlmostEqual(proto_shape(lo, node), 0.0, delta=1e-9 * node.unit)

    def test_reference_point(self):
        """Proto-shape is zero at its reference point."""
        node = make_node(1, 2, 0.2, make_model('mi'))
        self.assertAlmostEqual(proto_shape(0.3, node, x_ref=0.3), 0.0, delta=1e-12)

    def test_floor_level_needs_single_input(self):
        """floor_level rejects multi-input nodes."""
        with self.assertRaises(DomainError):
            floor_level(make_node(2, 1, 0.2, make_model('si')))

    def test_sweep(self):
        """sweep returns n points and validates its window."""
        node = make_node(1, 1, 0.2, make_model('rect'))
        points = sweep(node, -1.0, 1.0, 5)
        self.assertEqual(len(points), 5)
        self.assertEqual(points[0][0], -1.0)
        self.assertAlmostEqual(points[-1][1], 1.0)
        with self.assertRaises(DomainError):
            sweep(node, 1.0, -1.0, 5)
        with self.assertRaises(DomainError):
            sweep(node, -1.0, 1.0, 1)

    def test_compose_shape(self):
        """Composed shapes honour weight, mirror and shifts."""
        node = make_node(1, 1, 0.2, make_model('rect'))
        odd = compose_shape([ShapeTerm(node), {'base': node, 'weight': -1.0, 'mirror': True}])
        xs = np.linspace(-1.0, 1.0, 9)
        np.testing.assert_allclose(odd(xs), -odd(-xs), atol=1e-12)
        shifted = compose_shape([ShapeTerm(node, x_shift=0.5, y_shift=1.0)])
        self.assertAlmostEqual(shifted(0.5), proto_shape(0.0, node) + 1.0)
        with self.assertRaises(DomainError):
            compose_shape([])


if __name__ == '__main__':
    unittest.main()
