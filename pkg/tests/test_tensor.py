import numpy as np
import pytest

import pairglow.tensor as T
from pairglow import precision
from pairglow.errors import ConfigError, NumericalError, UsageError
from oracles import conv2d_reference, fd_gradient, rel_err


def run_backward(build):
    """Record build() on a fresh tape and differentiate its scalar output."""
    tape = T.Tape()
    with T.record_on(tape):
        loss = build()
    return tape.backward(loss)


class TestConv2d:
    def test_identity_kernel(self, f64):
        x = T.constant([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = T.constant(np.ones((1, 1, 1, 1)))
        b = T.constant(np.zeros(1))
        y = T.conv2d(x, k, b)
        assert np.array_equal(y.data, x.data)

    def test_all_ones_padded(self, f64):
        # 3x3 ones input, 3x3 ones kernel, padding 1: center sees 9 cells,
        # edge-centers 6, corners 4
        x = T.constant(np.ones((1, 1, 3, 3)))
        k = T.constant(np.ones((1, 1, 3, 3)))
        b = T.constant(np.zeros(1))
        y = T.conv2d(x, k, b, stride=1, padding=1)
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float64)
        assert np.allclose(y.data[0, 0], expected)

    def test_output_shape(self, f64, rng):
        x = T.constant(rng.normal(size=(1, 3, 8, 8)))
        k = T.constant(rng.normal(size=(16, 3, 3, 3)))
        b = T.constant(np.zeros(16))
        assert T.conv2d(x, k, b, 1, 1).shape == (1, 16, 8, 8)

    def test_matches_sliding_window_oracle(self, f64, rng):
        for stride, padding in [(1, 0), (1, 1), (2, 1), (1, 2)]:
            x = rng.normal(size=(2, 3, 7, 6))
            k = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            got = T.conv2d(T.constant(x), T.constant(k), T.constant(b),
                           stride, padding)
            want = conv2d_reference(x, k, b, stride, padding)
            assert rel_err(got.data, want) < 1e-12

    def test_shape_preserving_for_odd_kernels(self, f64, rng):
        for k in (1, 3, 5):
            x = T.constant(rng.normal(size=(1, 2, 8, 8)))
            w = T.constant(rng.normal(size=(2, 2, k, k)))
            b = T.constant(np.zeros(2))
            y = T.conv2d(x, w, b, stride=1, padding=(k - 1) // 2)
            assert y.shape == x.shape

    def test_rejects_even_kernel_and_bad_channels(self, f64, rng):
        x = T.constant(rng.normal(size=(1, 3, 8, 8)))
        with pytest.raises(ConfigError):
            T.conv2d(x, T.constant(rng.normal(size=(4, 3, 2, 2))), T.constant(np.zeros(4)))
        with pytest.raises(ConfigError):
            T.conv2d(x, T.constant(rng.normal(size=(4, 2, 3, 3))), T.constant(np.zeros(4)))


class TestDense:
    def test_identity(self, f64):
        x = T.constant([1.0, 2.0, 3.0])
        y = T.dense(x, T.constant(np.eye(3)), T.constant(np.zeros(3)))
        assert np.array_equal(y.data, x.data)

    def test_hand_computed(self, f64):
        y = T.dense(T.constant([1.0, 2.0]),
                    T.constant([[1.0, 1.0], [1.0, -1.0]]),
                    T.constant([0.5, 0.0]))
        assert np.allclose(y.data, [3.5, -1.0])

    def test_output_length(self, f64, rng):
        x = T.constant(rng.normal(size=48))
        y = T.dense(x, T.constant(rng.normal(size=(24, 48))), T.constant(np.zeros(24)))
        assert y.shape == (24,)

    def test_dimension_mismatch(self, f64, rng):
        with pytest.raises(ConfigError):
            T.dense(T.constant(np.zeros(5)), T.constant(np.zeros((3, 4))),
                    T.constant(np.zeros(3)))


class TestBackward:
    def test_square_gradient(self, f64):
        x = T.Parameter(np.array(3.0))
        grads = run_backward(lambda: T.mul(x, x))
        assert np.allclose(grads[x.node_id], 6.0)

    def test_non_scalar_loss_rejected(self, f64):
        x = T.Parameter(np.ones(3))
        tape = T.Tape()
        with T.record_on(tape):
            y = T.mul(x, x)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_double_backward_rejected(self, f64):
        x = T.Parameter(np.array(2.0))
        tape = T.Tape()
        with T.record_on(tape):
            y = T.mul(x, x)
        tape.backward(y)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_untouched_parameter_absent_from_map(self, f64):
        x = T.Parameter(np.array(2.0))
        unused = T.Parameter(np.array(5.0))
        grads = run_backward(lambda: T.mul(x, x))
        assert unused.node_id not in grads

    def test_fanout_accumulates(self, f64):
        x = T.Parameter(np.array(1.5))
        # f = x*x + x -> f' = 2x + 1
        grads = run_backward(lambda: T.add(T.mul(x, x), x))
        assert np.allclose(grads[x.node_id], 4.0)

    def test_non_finite_loss_rejected(self, f64):
        x = T.Parameter(np.array(0.0))
        tape = T.Tape()
        with T.record_on(tape):
            with np.errstate(divide="ignore"):
                y = T.log(x)  # -inf
        with pytest.raises(NumericalError):
            tape.backward(y)

    def test_strict_mode_names_offending_op(self, f64):
        with precision.strict():
            with np.errstate(invalid="ignore"):
                with pytest.raises(NumericalError) as err:
                    T.log(T.constant([-1.0]))
        assert err.value.operation == "log"

    def test_dense_sigmoid_matches_finite_differences(self, f64, rng):
        x = T.Parameter(rng.normal(size=4))
        w = T.Parameter(rng.normal(size=(4, 4)))
        b = T.Parameter(rng.normal(size=4))

        grads = run_backward(lambda: T.tsum(T.sigmoid(T.dense(x, w, b))))

        def value():
            z = w.data @ x.data + b.data
            return float(np.sum(1.0 / (1.0 + np.exp(-z))))

        for p in (x, w, b):
            (fd,) = fd_gradient(value, [p.data])
            assert rel_err(grads[p.node_id], fd) < 1e-5

    def test_conv_relu_dense_chain_matches_finite_differences(self, f64, rng):
        x = T.Parameter(rng.normal(size=(1, 2, 4, 4)))
        k = T.Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5)
        kb = T.Parameter(rng.normal(size=3))
        w = T.Parameter(rng.normal(size=(2, 3 * 4 * 4)) * 0.3)
        wb = T.Parameter(rng.normal(size=2))

        def build():
            h = T.relu(T.conv2d(x, k, kb, 1, 1))
            h = T.reshape(h, (1, 3 * 4 * 4))
            return T.tsum(T.dense(h, w, wb))

        grads = run_backward(build)

        def value():
            h = np.maximum(conv2d_reference(x.data, k.data, kb.data, 1, 1), 0.0)
            return float(np.sum(h.reshape(1, -1) @ w.data.T + wb.data))

        for p in (x, k, kb, w, wb):
            (fd,) = fd_gradient(value, [p.data])
            assert rel_err(grads[p.node_id], fd) < 1e-4


class TestCompositeOps:
    @pytest.mark.parametrize("op,dfn", [
        ("exp", lambda a: np.exp(a)),
        ("log", lambda a: np.log(a)),
        ("sigmoid", lambda a: 1 / (1 + np.exp(-a))),
    ])
    def test_unary_against_finite_differences(self, f64, rng, op, dfn):
        a = T.Parameter(rng.uniform(0.5, 2.0, size=(3, 3)))
        grads = run_backward(lambda: T.tsum(getattr(T, op)(a)))
        (fd,) = fd_gradient(lambda: float(np.sum(dfn(a.data))), [a.data])
        assert rel_err(grads[a.node_id], fd) < 1e-6

    def test_channel_ops_roundtrip_and_grads(self, f64, rng):
        x = T.Parameter(rng.normal(size=(1, 4, 2, 2)))

        def build():
            a = T.narrow_channels(x, 0, 2)
            b = T.narrow_channels(x, 2, 4)
            y = T.concat_channels([T.mul(a, a), b])
            return T.tsum(y)

        grads = run_backward(build)

        def value():
            a = x.data[:, :2]
            b = x.data[:, 2:]
            return float(np.sum(a * a) + np.sum(b))

        (fd,) = fd_gradient(value, [x.data])
        assert rel_err(grads[x.node_id], fd) < 1e-6

    def test_channel_affine_grads(self, f64, rng):
        x = T.Parameter(rng.normal(size=(2, 3, 4, 4)))
        ls = T.Parameter(rng.normal(size=3) * 0.3)
        sh = T.Parameter(rng.normal(size=3))
        grads = run_backward(lambda: T.tsum(T.mul(y := T.channel_affine(x, ls, sh), y)))

        def value():
            y = x.data * np.exp(ls.data).reshape(1, 3, 1, 1) + sh.data.reshape(1, 3, 1, 1)
            return float(np.sum(y * y))

        for p in (x, ls, sh):
            (fd,) = fd_gradient(value, [p.data])
            assert rel_err(grads[p.node_id], fd) < 1e-5

    def test_triangular_fill_and_diag_grads(self, f64, rng):
        c = 4
        lo = T.Parameter(rng.normal(size=c * (c - 1) // 2))
        up = T.Parameter(rng.normal(size=c * (c - 1) // 2))
        dv = T.Parameter(rng.uniform(0.5, 1.5, size=c))
        m = T.constant(rng.normal(size=(c, c)))

        def build():
            w = T.matmul(T.fill_lower_unit(lo, c),
                         T.add(T.fill_strict_upper(up, c), T.make_diag(dv)))
            return T.tsum(T.mul(T.matmul(w, m), T.matmul(w, m)))

        grads = run_backward(build)

        def value():
            lower = np.eye(c)
            lower[np.tril_indices(c, -1)] = lo.data
            upper = np.zeros((c, c))
            upper[np.triu_indices(c, 1)] = up.data
            w = lower @ (upper + np.diag(dv.data))
            y = w @ m.data
            return float(np.sum(y * y))

        for p in (lo, up, dv):
            (fd,) = fd_gradient(value, [p.data])
            assert rel_err(grads[p.node_id], fd) < 1e-5


class TestSqueeze:
    def test_stated_ordering(self, f64):
        x = T.constant(np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4))
        y = T.squeeze2x2(x)
        assert y.shape == (1, 4, 2, 2)
        assert np.array_equal(y.data[0, 0], [[1, 3], [9, 11]])   # top-left
        assert np.array_equal(y.data[0, 1], [[2, 4], [10, 12]])  # top-right
        assert np.array_equal(y.data[0, 2], [[5, 7], [13, 15]])  # bottom-left
        assert np.array_equal(y.data[0, 3], [[6, 8], [14, 16]])  # bottom-right

    def test_roundtrip_exact(self, f64, rng):
        x = T.constant(rng.normal(size=(2, 3, 8, 6)))
        assert np.array_equal(T.unsqueeze2x2(T.squeeze2x2(x)).data, x.data)

    def test_shape_arithmetic(self, f64):
        x = T.constant(np.zeros((1, 3, 32, 32)))
        assert T.squeeze2x2(x).shape == (1, 12, 16, 16)

    def test_odd_dims_rejected(self, f64):
        with pytest.raises(ConfigError):
            T.squeeze2x2(T.constant(np.zeros((1, 1, 3, 4))))


class TestPrecisionAndThreads:
    def test_f32_gradients_against_f64_finite_differences(self, rng):
        from pairglow import precision

        xd = rng.normal(size=(1, 2, 4, 4))
        kd = rng.normal(size=(2, 2, 3, 3)) * 0.5
        bd = rng.normal(size=2)

        with precision.use(np.float32):
            x = T.Parameter(xd)
            k = T.Parameter(kd)
            b = T.Parameter(bd)
            grads = run_backward(
                lambda: T.tsum(T.sigmoid(T.conv2d(x, k, b, 1, 1))))

        def value():
            h = conv2d_reference(xd, kd, bd, 1, 1)
            return float(np.sum(1 / (1 + np.exp(-h))))

        for p, arr in ((x, xd), (k, kd), (b, bd)):
            (fd,) = fd_gradient(value, [arr])
            assert rel_err(grads[p.node_id], fd) < 1e-4

    def test_distinct_tapes_on_distinct_threads(self, f64, rng):
        from concurrent.futures import ThreadPoolExecutor

        def job(seed):
            local = np.random.default_rng(seed)
            x = T.Parameter(local.normal(size=(4, 4)))
            tape = T.Tape()
            with T.record_on(tape):
                loss = T.tsum(T.sigmoid(T.mul(x, x)))
            return x.node_id, tape.backward(loss), x

        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(job, range(8)))
        for node_id, grads, x in results:
            xd = x.data
            s = 1 / (1 + np.exp(-xd * xd))
            want = s * (1 - s) * 2 * xd
            assert rel_err(grads[node_id], want) < 1e-12


class TestCheckpoint:
    def test_matches_plain_backward(self, f64, rng):
        w = T.Parameter(rng.normal(size=(3, 3)))
        x = T.Parameter(rng.normal(size=(1, 3, 4, 4)))

        def segment(inp):
            return (T.channel_linear(T.sigmoid(inp), w),)

        def run(with_ckpt):
            tape = T.Tape()
            with T.record_on(tape):
                if with_ckpt:
                    (y,) = T.checkpoint(segment, (x,))
                else:
                    (y,) = segment(x)
                loss = T.tsum(T.mul(y, y))
            return tape.backward(loss), len(tape)

        plain, n_plain = run(False)
        ckpt, n_ckpt = run(True)
        for p in (w, x):
            assert rel_err(ckpt[p.node_id], plain[p.node_id]) < 1e-14
        assert n_ckpt < n_plain

    def test_no_tape_is_plain_call(self, f64, rng):
        x = T.constant(rng.normal(size=(1, 2, 2, 2)))
        (y,) = T.checkpoint(lambda t: (T.exp(t),), (x,))
        assert np.allclose(y.data, np.exp(x.data))
