import unittest

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tape, Tensor, backward, grad_check
from ..exceptions import NonFiniteError, ShapeError, TapeError


def _param(shape, seed, scale=1.0, name=None):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)


class TestPrimitiveGradients(unittest.TestCase):
    """Finite-difference checks of each primitive in double precision."""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.target = self.rng.normal(size=(3, 4))

    def check(self, f, params, tol=1e-5):
        self.assertLess(grad_check(f, params), tol)

    def test_add_with_broadcast(self):
        """Test that add sums gradients over broadcast axes."""
        a, b = _param((3, 4), 1, name='a'), _param((4,), 2, name='b')
        self.check(lambda: dc.mse(dc.add(a, b), self.target), [a, b])

    def test_sub_and_mul(self):
        """Test sub and mul against finite differences."""
        a, b = _param((3, 4), 3, name='a'), _param((3, 4), 4, name='b')
        self.check(lambda: dc.mse(dc.mul(dc.sub(a, b), a), self.target), [a, b])

    def test_matmul(self):
        """Test batched matmul gradients for both operands."""
        a, b = _param((2, 3, 5), 5, name='a'), _param((5, 4), 6, name='b')
        target = self.rng.normal(size=(2, 3, 4))
        self.check(lambda: dc.mse(dc.matmul(a, b), target), [a, b])

    def test_gelu_relu_tanh(self):
        """Test the activations; relu inputs are kept away from the kink."""
        x = _param((3, 4), 7, name='x')
        self.check(lambda: dc.mse(dc.gelu(x), self.target), [x])
        self.check(lambda: dc.mse(dc.tanh(x), self.target), [x])
        y = Tensor(np.sign(x.data) * (np.abs(x.data) + 0.1), requires_grad=True, name='y')
        self.check(lambda: dc.mse(dc.relu(y), self.target), [y])

    def test_layernorm(self):
        """Test layernorm gradients for input, scale and shift."""
        x = _param((3, 4), 8, name='x')
        gamma, beta = _param((4,), 9, name='gamma'), _param((4,), 10, name='beta')
        self.check(lambda: dc.mse(dc.layernorm(x, gamma, beta), self.target), [x, gamma, beta])

    def test_softmax(self):
        """Test softmax along the last axis."""
        x = _param((3, 4), 11, name='x')
        self.check(lambda: dc.mse(dc.softmax(x), self.target), [x])

    def test_gather_with_repeats(self):
        """Test gather accumulates gradient for repeated rows."""
        x = _param((5, 4), 12, name='x')
        index = np.array([0, 2, 2])
        self.check(lambda: dc.mse(dc.gather(x, index), self.target), [x])

    def test_concat_slice_reshape_transpose(self):
        """Test the shape primitives chained together."""
        a, b = _param((3, 2), 13, name='a'), _param((3, 2), 14, name='b')

        def f():
            joined = dc.concat([a, b], axis=1)
            flipped = dc.transpose(dc.reshape(joined, (4, 3)), (1, 0))
            return dc.mse(dc.slice_(flipped, (slice(None), slice(0, 4))), self.target)
        self.check(f, [a, b])

    def test_where_and_mean(self):
        """Test where routes gradient only to the selected branch."""
        a, b = _param((3, 4), 15, name='a'), _param((3, 4), 16, name='b')
        cond = self.rng.random((3, 4)) < 0.5
        self.check(lambda: dc.mean(dc.mul(dc.where(cond, a, b), dc.where(cond, a, b))), [a, b])

    def test_weighted_mse_zero_weight_has_zero_gradient(self):
        """Test that zero-weight elements get exactly zero gradient."""
        x = _param((3, 4), 17, name='x')
        weight = np.ones((3, 4))
        weight[:, 0] = 0.0
        with Tape() as tape:
            loss = dc.mse(x, self.target, weight)
        backward(tape, loss)
        self.assertTrue(np.all(x.grad[:, 0] == 0.0))
        self.assertTrue(np.all(x.grad[:, 1:] != 0.0))

    def test_square_gradient(self):
        """Test that x*x at 3 has gradient 6 and mse(x, x) has gradient 0."""
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = dc.sum_(dc.mul(x, x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [6.0])
        y = _param((2, 3), 18)
        with Tape() as tape:
            loss = dc.mse(y, y.data.copy())
        backward(tape, loss)
        np.testing.assert_array_equal(y.grad, np.zeros((2, 3)))

    def test_fixed_points(self):
        """Test gelu at the origin, softmax of equal logits and layernorm of a constant row."""
        np.testing.assert_array_equal(dc.gelu(Tensor(np.zeros(3))).data, np.zeros(3))
        np.testing.assert_allclose(dc.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5], rtol=0, atol=1e-15)
        row = Tensor(np.full((2, 3), 0.7))
        out = dc.layernorm(row, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros((2, 3)), rtol=0, atol=1e-9)
        shifted = dc.layernorm(row, Tensor(np.full(3, 2.0)), Tensor(np.array([1.0, -1.0, 0.5])))
        np.testing.assert_allclose(shifted.data, np.tile([1.0, -1.0, 0.5], (2, 1)), rtol=0, atol=1e-9)

    def test_softmax_rows_sum_to_one(self):
        """Test that softmax outputs are nonnegative and sum to 1 along the reduced axis."""
        x = Tensor(self.rng.normal(scale=10.0, size=(4, 5, 6)))
        for axis in (-1, 1):
            y = dc.softmax(x, axis=axis).data
            self.assertTrue(np.all(y >= 0.0))
            np.testing.assert_allclose(y.sum(axis=axis), 1.0, rtol=0, atol=1e-9)

    def test_random_jacobian_products(self):
        """Test random projections of every differentiable primitive over 100 random shapes."""
        rng = np.random.default_rng(42)
        unary = {
            'gelu': dc.gelu, 'tanh': dc.tanh, 'softmax': dc.softmax,
            'scale': lambda x: dc.scale(x, -1.7), 'mean_rows': lambda x: dc.mean(x, axis=0),
            'relu': lambda x: dc.relu(dc.add(dc.mul(x, x), 0.1)),
        }
        kinds = sorted(unary) + ['add', 'sub', 'mul', 'matmul', 'layernorm']
        for trial in range(100):
            kind = kinds[trial % len(kinds)]
            n, m, k = (int(v) for v in rng.integers(3, 6, size=3))
            x = Tensor(rng.normal(size=(n, m)), requires_grad=True, name='x')
            if kind in unary:
                params, fn = [x], (lambda op=unary[kind]: op(x))
            elif kind == 'matmul':
                w = Tensor(rng.normal(size=(m, k)), requires_grad=True, name='w')
                params, fn = [x, w], (lambda: dc.matmul(x, w))
            elif kind == 'layernorm':
                gamma = Tensor(rng.normal(size=(m,)), requires_grad=True, name='gamma')
                beta = Tensor(rng.normal(size=(m,)), requires_grad=True, name='beta')
                params, fn = [x, gamma, beta], (lambda: dc.layernorm(x, gamma, beta))
            else:
                y = Tensor(rng.normal(size=(m,)), requires_grad=True, name='y')
                params, fn = [x, y], (lambda op=getattr(dc, kind): op(x, y))
            projection = rng.normal(size=fn().shape)
            error = grad_check(lambda: dc.sum_(dc.mul(fn(), projection)), params)
            self.assertLess(error, 1e-4, '{0} with shape {1}'.format(kind, (n, m, k)))

    def test_quadratic_is_exact(self):
        """Test that central differences are exact for a quadratic in three parameters."""
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, name='x')
        weight = np.array([1.0, 2.0, 3.0])
        quadratic = lambda: dc.add(dc.sum_(dc.mul(dc.mul(x, x), weight)), dc.sum_(x))
        self.assertLess(grad_check(quadratic, [x]), 1e-8)

    def test_constant_function(self):
        """Test that a function that ignores its parameters has zero gradients and zero error."""
        p = _param((3,), 19, name='p')
        self.assertEqual(grad_check(lambda: dc.sum_(Tensor(np.ones(3))), [p]), 0.0)
        self.assertIsNone(p.grad)


class TestTapeBehaviour(unittest.TestCase):

    def test_fan_out_accumulates(self):
        """Test that a tensor used twice receives the sum of both gradients."""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = dc.sum_(dc.add(x, x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_tape_records_nothing(self):
        """Test that primitives outside a tape do not track gradients."""
        x = Tensor(np.ones(3), requires_grad=True)
        y = dc.scale(x, 2.0)
        self.assertFalse(y.requires_grad)

    def test_backward_rejects_non_scalar(self):
        """Test that backward refuses a non-scalar loss."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = dc.scale(x, 2.0)
        with self.assertRaises(TapeError):
            backward(tape, y)

    def test_backward_rejects_foreign_loss(self):
        """Test that backward refuses a loss recorded on another tape."""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            loss = dc.sum_(x)
        with self.assertRaises(TapeError):
            backward(Tape(), loss)

    def test_shape_mismatch(self):
        """Test that incompatible shapes raise ShapeError."""
        with self.assertRaises(ShapeError):
            dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        with self.assertRaises(ShapeError):
            dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_primitive_dispatch_by_name(self):
        """Test that every listed primitive is reachable by name."""
        x = Tensor(np.array([[1.0, -2.0]]))
        np.testing.assert_allclose(dc.primitive_ops('relu', x).data, [[1.0, 0.0]])
        for kind in ('matmul', 'add', 'scale', 'gelu', 'layernorm', 'softmax', 'dropout', 'gather',
                     'concat', 'slice', 'mse'):
            self.assertIn(kind, dc.PRIMITIVES)
        with self.assertRaises(ValueError):
            dc.primitive_ops('conv', x)

    def test_same_seed_is_bitwise_identical(self):
        """Test that a fixed seed reproduces outputs and gradients bit for bit."""
        def run():
            rng = np.random.default_rng(7)
            w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            gamma, beta = Tensor(np.ones(5), requires_grad=True), Tensor(np.zeros(5), requires_grad=True)
            x = rng.normal(size=(3, 4))
            with Tape() as tape:
                h = dc.layernorm(dc.gelu(dc.matmul(x, w)), gamma, beta)
                h = dc.dropout(dc.softmax(h), 0.9, np.random.default_rng(3))
                loss = dc.mse(h, np.zeros((3, 5)))
            backward(tape, loss)
            return h.data, w.grad, gamma.grad
        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestDropout(unittest.TestCase):

    def test_identity_outside_training(self):
        """Test that dropout is the identity in eval mode."""
        x = Tensor(np.arange(6.0))
        self.assertIs(dc.dropout(x, 0.5, np.random.default_rng(0), training=False), x)

    def test_inverted_scaling(self):
        """Test that kept activations are scaled by 1/keep_prob."""
        x = Tensor(np.ones(1000))
        y = dc.dropout(x, 0.8, np.random.default_rng(0)).data
        kept = y[y != 0]
        np.testing.assert_allclose(kept, 1.25)
        self.assertGreater(kept.size, 700)


class TestDebugMode(unittest.TestCase):

    def tearDown(self):
        dc.set_debug_mode(False)

    def test_non_finite_input_raises(self):
        """Test that debug mode rejects NaN inputs."""
        dc.set_debug_mode(True)
        with self.assertRaises(NonFiniteError):
            dc.add(Tensor(np.array([np.nan])), 1.0)

    def test_disabled_passes_nan_through(self):
        """Test that without debug mode NaNs propagate silently."""
        dc.set_debug_mode(False)
        self.assertTrue(np.isnan(dc.add(Tensor(np.array([np.nan])), 1.0).data[0]))


if __name__ == '__main__':
    unittest.main()
