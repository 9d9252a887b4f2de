import math

import numpy as np

import pairglow.conditioning as C
import pairglow.layers as L
import pairglow.tensor as T


def make_trunk(c, h, w, out_dim, seed=7):
    return C.TrunkCN(c, h, w, out_dim, np.random.default_rng(seed))


class TestTrunk:
    def test_zero_output_weights_emit_bias(self, f64, rng):
        net = make_trunk(3, 4, 4, 6)
        net.out.bias.data = rng.normal(size=6)
        for _ in range(3):
            x = T.constant(rng.normal(size=(1, 3, 4, 4)))
            assert np.allclose(net(x).data, net.out.bias.data)

    def test_actnorm_out_length(self, f64, rng):
        net = make_trunk(12, 4, 4, 24)
        params = C.cn_actnorm(net, T.constant(rng.normal(size=(1, 12, 4, 4))))
        assert params.log_scale.shape == (12,)
        assert params.shift.shape == (12,)

    def test_hidden_weights_seed_reproducible(self, f64):
        a = make_trunk(3, 4, 4, 6, seed=11)
        b = make_trunk(3, 4, 4, 6, seed=11)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_outputs_finite_for_finite_inputs(self, f64, rng):
        net = make_trunk(4, 8, 8, 16)
        net.out.weight.data = rng.normal(size=net.out.weight.data.shape) * 0.1
        y = net(T.constant(rng.normal(size=(1, 4, 8, 8)) * 100))
        assert np.all(np.isfinite(y.data))

    def test_sensitivity_once_weights_nonzero(self, f64, rng):
        net = make_trunk(3, 4, 4, 6)
        net.out.weight.data = rng.normal(size=net.out.weight.data.shape) * 0.1
        y1 = net(T.constant(rng.normal(size=(1, 3, 4, 4))))
        y2 = net(T.constant(rng.normal(size=(1, 3, 4, 4))))
        assert not np.allclose(y1.data, y2.data)


class TestActnormCN:
    def test_init_standardizes_target_batch(self, f64, rng):
        c, h, w = 4, 8, 8
        net = make_trunk(c, h, w, 2 * c)
        target = T.constant(rng.normal(3.0, 2.5, size=(1, c, h, w)))
        C.init_conditional_actnorm(net, target)
        params = C.cn_actnorm(net, T.constant(rng.normal(size=(1, c, h, w))))
        y, _ = L.actnorm_apply(target, params)
        means = y.data.mean(axis=(0, 2, 3))
        stds = y.data.std(axis=(0, 2, 3))
        assert np.max(np.abs(means)) < 1e-6
        assert np.max(np.abs(stds - 1.0)) < 1e-6

    def test_init_output_constant_across_sources(self, f64, rng):
        c = 4
        net = make_trunk(c, 4, 4, 2 * c)
        C.init_conditional_actnorm(net, T.constant(rng.normal(size=(1, c, 4, 4))))
        p1 = C.cn_actnorm(net, T.constant(rng.normal(size=(1, c, 4, 4))))
        p2 = C.cn_actnorm(net, T.constant(rng.normal(size=(1, c, 4, 4))))
        assert np.array_equal(p1.log_scale.data, p2.log_scale.data)
        assert np.array_equal(p1.shift.data, p2.shift.data)


class TestInvConvCN:
    def test_output_length_c2(self, f64):
        c = 2
        net = make_trunk(c, 2, 2, c * c)
        assert net.out_dim == 4  # 1 lower + 1 upper + 2 log-magnitudes

    def test_init_reassembles_rotation(self, f64, rng):
        c = 5
        net = make_trunk(c, 4, 4, c * c)
        net, perm, sign = C.init_conditional_invconv(net, c, rng)
        params = C.cn_invconv(net, T.constant(rng.normal(size=(1, c, 4, 4))), perm, sign)
        w = L.assemble_mixing_matrix(params).data
        assert np.max(np.abs(w.T @ w - np.eye(c))) < 1e-10
        # a rotation has |det| = 1, so the initial logdet contribution vanishes
        assert abs(np.sum(params.log_scale.data)) < 1e-8

    def test_pack_unpack_roundtrip(self, f64, rng):
        c = 4
        tri = c * (c - 1) // 2
        lo, up, ls = rng.normal(size=tri), rng.normal(size=tri), rng.normal(size=c)
        vec = C.pack_mixing_vector(lo, up, ls)
        lo2, up2, ls2 = C.unpack_mixing_vector(T.constant(vec), c)
        assert np.allclose(lo2.data, lo) and np.allclose(up2.data, up)
        assert np.allclose(ls2.data, ls)


class TestCouplingCN:
    def test_fresh_net_outputs_zero(self, f64, rng):
        net = C.CouplingCN(6, 4, rng)
        x = T.constant(rng.normal(size=(1, 6, 4, 4)))
        assert np.array_equal(net(x).data, np.zeros((1, 4, 4, 4)))

    def test_initial_coupling_logdet(self, f64, rng):
        c, h, w = 4, 4, 4
        net = C.CouplingCN(c // 2 + c, c, rng)
        x = T.constant(rng.normal(size=(1, c, h, w)))
        x2 = T.narrow_channels(x, c // 2, c)
        src = T.constant(rng.normal(size=(1, c, h, w)))
        cp = C.cn_coupling(net, x2, src)
        _, ld = L.coupling_apply(x, cp)
        want = (c // 2 * h * w) * math.log(1.0 / (1.0 + math.exp(-2.0)))
        assert abs(ld.item() - want) < 1e-10

    def test_input_channel_arithmetic(self, f64, rng):
        c = 4
        net = C.CouplingCN(c // 2 + c + 1, c, rng)
        x2 = T.constant(rng.normal(size=(1, c // 2, 4, 4)))
        src = T.constant(rng.normal(size=(1, c, 4, 4)))
        bmap = T.constant(rng.uniform(size=(1, 1, 4, 4)))
        cp = C.cn_coupling(net, x2, src, bmap)
        assert cp.o1.shape == (1, c // 2, 4, 4)
        assert cp.o2.shape == (1, c // 2, 4, 4)

    def test_seed_reproducible(self, f64):
        a = C.CouplingCN(4, 4, np.random.default_rng(3))
        b = C.CouplingCN(4, 4, np.random.default_rng(3))
        assert np.array_equal(a.conv1.weight.data, b.conv1.weight.data)
