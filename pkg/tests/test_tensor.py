import numpy as np
import pytest

from lccal import tensor as T
from lccal.errors import FormatError, ShapeError
from lccal.gradcheck import gradcheck
from lccal.tensor import Adam, OptimizerState, Tape, Tensor, optimizer_step
from oracles import loop_conv2d


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


class TestForward:
    def test_leaky_relu(self):
        assert T.leaky_relu(Tensor(-1.0), 0.1).item() == pytest.approx(-0.1)
        assert T.leaky_relu(Tensor(2.0)).item() == 2.0

    def test_conv_all_ones(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1) and out.item() == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_conv_matches_loop_oracle(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(T.conv2d(x, w, b, stride, padding).data, loop_conv2d(x, w, b, stride, padding),
                                   atol=1e-10)

    def test_linear(self, rng):
        x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
        np.testing.assert_allclose(T.linear(x, w, b).data, x @ w.T + b, atol=1e-14)

    def test_shape_errors_name_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            T.add(np.zeros((2, 3)), np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            T.linear(np.zeros((1, 2)), np.zeros((3, 4)))
        with pytest.raises(ShapeError):
            T.reshape(np.zeros(5), (2, 3))
        with pytest.raises(ShapeError):
            T.expand(np.zeros((2, 1)), (3, 4))

    def test_recording_does_not_change_values(self, rng):
        x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        plain = T.leaky_relu(T.conv2d(x, w, stride=2, padding=1)).data
        with Tape():
            xs = Tensor(x, requires_grad=True)
            taped = T.leaky_relu(T.conv2d(xs, Tensor(w, requires_grad=True), stride=2, padding=1)).data
        np.testing.assert_array_equal(plain, taped)

    def test_no_tape_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        assert y.node is None


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))

    def test_half_mean_square(self, rng):
        x0 = rng.standard_normal((4, 5))
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            loss = T.mean(x * x) * 0.5
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, x0 / x0.size, atol=1e-15)

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_untouched_leaf_gets_zero(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            _ = b * 3.0
            loss = (a * 2.0).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])
        np.testing.assert_array_equal(b.grad, np.zeros(3))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            y = x * x
            loss = (y + y * x).sum()
        tape.backward(loss)
        # d/dx (x^2 + x^3) = 2x + 3x^2
        np.testing.assert_allclose(x.grad, [6.0 + 27.0])

    def test_module_level_backward(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape():
            loss = T.sum_(T.square(x))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])


class TestFiniteDifferences:
    """Central differences, h = 1e-4, on >= 100 coordinates per op."""

    TOL = 1e-4

    def check(self, fn, inputs, seed=0):
        err = gradcheck(fn, inputs, n_coords=100, h=1e-4, seed=seed)
        assert err < self.TOL, err

    def test_conv2d(self, rng):
        for stride, pad in [(1, 1), (2, 1), (2, 0)]:
            self.check(lambda x, w, b: T.conv2d(x, w, b, stride, pad),
                       [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)])

    def test_linear(self, rng):
        self.check(T.linear, [rng.standard_normal((6, 10)), rng.standard_normal((8, 10)), rng.standard_normal(8)])

    def test_activations(self, rng):
        x = _away_from_zero(rng, (150,))
        self.check(T.relu, [x])
        self.check(lambda a: T.leaky_relu(a, 0.1), [x])
        self.check(lambda a: T.huber(a, 1.0), [np.where(np.abs(np.abs(x) - 1) < 0.05, 1.2, x) * 2])
        self.check(T.abs_, [x])

    def test_elementwise(self, rng):
        a, b = rng.standard_normal(120), rng.uniform(0.5, 2.0, 120)
        self.check(T.mul, [a, b])
        self.check(T.div, [a, b])
        self.check(T.sub, [a, b])
        self.check(lambda x: T.rdiv(2.0, x), [b])
        self.check(T.sqrt, [b])
        self.check(T.arccos, [rng.uniform(-0.9, 0.9, 120)])
        self.check(lambda x: T.clip(x, -0.5, 0.5), [np.where(np.abs(np.abs(a) - 0.5) < 0.01, 0.3, a)])

    def test_reductions_and_shapes(self, rng):
        x = rng.standard_normal((4, 5, 6))
        self.check(lambda a: T.mean(a, axis=1), [x])
        self.check(lambda a: T.sum_(a, axis=(0, 2), keepdims=True), [x])
        self.check(lambda a: T.norm(a, axis=2), [x])
        self.check(lambda a: T.transpose(a, (2, 0, 1)), [x])
        self.check(lambda a: T.reshape(a, (20, 6)), [x])
        self.check(lambda a: a[1:3, ::2], [x])
        self.check(lambda a: T.expand(T.mean(a, axis=1, keepdims=True), (4, 5, 6)), [x])

    def test_concat_stack_matmul(self, rng):
        a, b = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
        self.check(lambda x, y: T.concat([x, y], axis=1), [a, b])
        self.check(lambda x, y: T.stack([x, y], axis=1), [a, b])
        self.check(T.matmul, [a, rng.standard_normal((8, 5))])

    def test_composite_graph(self, rng):
        def net(x, w1, w2):
            h = T.leaky_relu(T.conv2d(x, w1, stride=2, padding=1))
            flat = T.reshape(h, (2, -1))
            return T.mean(T.huber(T.linear(flat, w2), 1.0))

        self.check(net, [rng.standard_normal((2, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)),
                         rng.standard_normal((4, 27))])


class TestAdam:
    def test_zero_gradient(self, rng):
        p = Tensor(rng.standard_normal(5))
        before = p.data.copy()
        state = optimizer_step([p], [np.zeros(5)], OptimizerState(lr=0.1))
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1
        optimizer_step([p], [None], state)
        assert state.step == 2

    def test_first_step_is_sign(self, rng):
        p = Tensor(np.zeros(6))
        g = rng.standard_normal(6)
        optimizer_step([p], [g], OptimizerState(lr=1e-3))
        np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), atol=1e-6 * 1e-3 + 1e-9)

    def test_quadratic_bowl(self):
        w = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        opt = Adam([w], lr=0.05)
        for _ in range(200):
            with Tape() as tape:
                loss = T.sum_(T.square(w))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
        assert np.linalg.norm(w.data) < 1e-2

    def test_matches_reference_formula(self, rng):
        p0 = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(5)]
        p = Tensor(p0.copy())
        state = OptimizerState(lr=0.01)
        m = v = np.zeros(4)
        ref = p0.copy()
        for k, g in enumerate(grads, 1):
            optimizer_step([p], [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            optimizer_step([Tensor(np.zeros(3))], [np.zeros(4)], OptimizerState())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        params = {"a": rng.standard_normal((3, 4)), "b.w": rng.standard_normal(7), "scalar": np.array(2.5),
                  "tiny": np.array([np.finfo(float).tiny, -0.0, np.inf])}
        T.save_checkpoint(tmp_path / "c.ckpt", params)
        back = T.load_checkpoint(tmp_path / "c.ckpt")
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes()
            assert back[k].shape == np.shape(params[k])

    def test_corruption(self, tmp_path):
        T.save_checkpoint(tmp_path / "c.ckpt", {"a": np.ones(4)})
        raw = (tmp_path / "c.ckpt").read_bytes()
        for name, data in [("magic", b"XXXXXXXX" + raw[8:]), ("trunc", raw[:-3]), ("trail", raw + b"\0"),
                           ("head", raw[:12]), ("version", raw[:8] + b"\x02" + raw[9:])]:
            (tmp_path / name).write_bytes(data)
            with pytest.raises(FormatError):
                T.load_checkpoint(tmp_path / name)
