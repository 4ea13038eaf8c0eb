import math

import numpy as np
import pytest

from backdoorlab.model import (
    FeatureCache,
    FormatError,
    LabelError,
    Network,
    SpecError,
    StalenessError,
    backbone_features,
    conv2d,
    dense,
    flatten,
    forward,
    init_network,
    load_checkpoint,
    loss_and_grad,
    maxpool,
    per_sample_head_grads,
    predict,
    relu,
    save_checkpoint,
)
from backdoorlab.numerics import DimensionError, RngState


def fd_grad(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        g[i] = (f(tp) - f(tm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-4, floor=1e-8):
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    assert np.all(err <= rel * denom + floor), (
        f"worst coordinate err {err.max():.3e} vs bound"
    )


def scalar_mlp_forward(net, x):
    """Scalar-by-scalar MLP evaluator: plain loops, no vectorized ops."""
    out = []
    for row in x:
        act = list(row)
        for i, sp in enumerate(net.layers):
            off, n = net.layout[i]
            if sp.kind == "dense":
                d_in = len(act)
                nxt = []
                for o in range(sp.out):
                    s = net.params[off + sp.out * d_in + o]  # bias
                    for j in range(d_in):
                        s += net.params[off + o * d_in + j] * act[j]
                    nxt.append(s)
                act = nxt
            elif sp.kind == "relu":
                act = [max(v, 0.0) for v in act]
        out.append(act)
    return np.array(out)


class TestInit:
    def test_param_count_mlp(self):
        net = init_network([dense(8), relu(), dense(3)], 4, 3, RngState(0))
        assert net.params.size == 4 * 8 + 8 + 8 * 3 + 3  # 67

    def test_same_seed_bit_identical(self):
        a = init_network([dense(8), relu(), dense(3)], 4, 3, RngState(9))
        b = init_network([dense(8), relu(), dense(3)], 4, 3, RngState(9))
        assert np.array_equal(a.params, b.params)

    def test_zero_image_logits_equal_head_biases(self):
        spec = [conv2d(4, 3), relu(), maxpool(2), flatten(), dense(3)]
        net = init_network(spec, (1, 8, 8), 3, RngState(5))
        logits = forward(net, np.zeros((2, 1, 8, 8)))
        off, n = net.layout[-1]
        head_bias = net.params[off + n - 3 : off + n]
        assert np.array_equal(logits, np.tile(head_bias, (2, 1)))

    def test_bad_chain_rejected(self):
        with pytest.raises(SpecError):
            init_network([dense(4), relu()], 3, 4, RngState(0))
        with pytest.raises(SpecError, match="layer 0"):
            init_network([conv2d(2, 9), flatten(), dense(2)], (1, 4, 4), 2, RngState(0))

    def test_layout_tiles_params(self):
        spec = [conv2d(4, 3), relu(), maxpool(2), flatten(), dense(5)]
        net = init_network(spec, (2, 10, 10), 5, RngState(1))
        covered = 0
        for off, n in net.layout:
            assert off == covered or n == 0
            covered += n
        assert covered == net.params.size


class TestForward:
    def test_zero_network_zero_logits(self):
        net = init_network([dense(3)], 4, 3, RngState(0))
        net.params[:] = 0.0
        assert np.array_equal(forward(net, np.ones((2, 4))), np.zeros((2, 3)))

    def test_identity_dense(self):
        net = init_network([dense(3)], 3, 3, RngState(0))
        net.params[:9] = np.eye(3).ravel()
        net.params[9:] = 0.0
        out = forward(net, np.array([[1.0, 2.0, 3.0]]))
        assert np.allclose(out, [[1.0, 2.0, 3.0]], atol=1e-15)

    def test_matches_scalar_reference(self):
        net = init_network([dense(6), relu(), dense(4)], 5, 4, RngState(13))
        x = RngState(14).generator().normal(size=(7, 5))
        assert np.max(np.abs(forward(net, x) - scalar_mlp_forward(net, x))) <= 1e-12

    def test_shape_mismatch(self):
        net = init_network([dense(2)], 4, 2, RngState(0))
        with pytest.raises(DimensionError):
            forward(net, np.ones((3, 5)))


class TestLoss:
    def test_uniform_logits(self):
        net = init_network([dense(4)], 3, 4, RngState(0))
        net.params[:] = 0.0
        loss, _ = loss_and_grad(net, np.ones((5, 3)), np.array([0, 1, 2, 3, 0]))
        assert loss == pytest.approx(math.log(4.0), abs=1e-12)

    def test_margin_drives_loss_to_zero_monotonically(self):
        net = init_network([dense(3)], 3, 3, RngState(0))
        losses = []
        for margin in (1.0, 5.0, 10.0, 20.0):
            net.params[:9] = margin * np.eye(3).ravel()
            net.params[9:] = 0.0
            loss, _ = loss_and_grad(net, np.eye(3), np.array([0, 1, 2]))
            losses.append(loss)
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-8

    def test_label_out_of_range(self):
        net = init_network([dense(3)], 2, 3, RngState(0))
        with pytest.raises(LabelError, match="index 1"):
            loss_and_grad(net, np.ones((2, 2)), np.array([0, 3]))

    @pytest.mark.parametrize("seed", range(4))
    def test_mlp_grad_vs_finite_differences(self, seed):
        net = init_network([dense(6), relu(), dense(3)], 4, 3, RngState(100 + seed))
        gen = RngState(200 + seed).generator()
        x = gen.normal(size=(5, 4))
        y = gen.integers(0, 3, size=5)

        def f(theta):
            trial = Network(net.layers, net.input_shape, net.class_count, theta, net.layout)
            return loss_and_grad(trial, x, y)[0]

        loss, grad = loss_and_grad(net, x, y)
        assert_grad_close(grad, fd_grad(f, net.params.copy()))

    @pytest.mark.parametrize("seed", range(3))
    def test_cnn_grad_vs_finite_differences(self, seed):
        spec = [conv2d(2, 3), relu(), maxpool(2), flatten(), dense(3)]
        net = init_network(spec, (1, 6, 6), 3, RngState(300 + seed))
        gen = RngState(400 + seed).generator()
        x = gen.uniform(0, 1, size=(4, 1, 6, 6))
        y = gen.integers(0, 3, size=4)

        def f(theta):
            trial = Network(net.layers, net.input_shape, net.class_count, theta, net.layout)
            return loss_and_grad(trial, x, y)[0]

        loss, grad = loss_and_grad(net, x, y)
        assert_grad_close(grad, fd_grad(f, net.params.copy()))

    def test_strided_conv_grad(self):
        spec = [conv2d(2, 3, stride=2), relu(), flatten(), dense(2)]
        net = init_network(spec, (1, 7, 7), 2, RngState(77))
        gen = RngState(78).generator()
        x = gen.uniform(0, 1, size=(3, 1, 7, 7))
        y = gen.integers(0, 2, size=3)

        def f(theta):
            trial = Network(net.layers, net.input_shape, net.class_count, theta, net.layout)
            return loss_and_grad(trial, x, y)[0]

        _, grad = loss_and_grad(net, x, y)
        assert_grad_close(grad, fd_grad(f, net.params.copy()))

    def test_head_only_equals_full_head_slice(self):
        spec = [conv2d(2, 3), relu(), maxpool(2), flatten(), dense(3)]
        net = init_network(spec, (1, 6, 6), 3, RngState(21))
        gen = RngState(22).generator()
        x = gen.uniform(0, 1, size=(6, 1, 6, 6))
        y = gen.integers(0, 3, size=6)
        loss_full, grad_full = loss_and_grad(net, x, y, scope="full")
        loss_head, grad_head = loss_and_grad(net, x, y, scope="head_only")
        assert loss_head == pytest.approx(loss_full, abs=1e-12)
        assert np.max(np.abs(grad_head - grad_full[net.head_slice])) <= 1e-12

    def test_cache_equivalence(self):
        net = init_network([dense(5), relu(), dense(3)], 4, 3, RngState(31))
        gen = RngState(32).generator()
        x = gen.normal(size=(8, 4))
        y = gen.integers(0, 3, size=8)
        cache = backbone_features(net, x)
        loss_direct, grad_direct = loss_and_grad(net, x, y, scope="head_only")
        loss_cached, grad_cached = loss_and_grad(net, None, y, scope="head_only", cache=cache)
        assert loss_cached == pytest.approx(loss_direct, abs=1e-12)
        assert np.max(np.abs(grad_cached - grad_direct)) <= 1e-12

    def test_softmax_shift_invariance(self):
        net = init_network([dense(4)], 3, 4, RngState(41))
        gen = RngState(42).generator()
        x = gen.normal(size=(6, 3))
        y = gen.integers(0, 4, size=6)
        loss0, _ = loss_and_grad(net, x, y)
        pred0 = predict(net, x)
        net.params[-4:] += 7.5  # constant shift of every logit via head biases
        loss1, _ = loss_and_grad(net, x, y)
        assert abs(loss1 - loss0) <= 1e-12
        assert np.array_equal(predict(net, x), pred0)


class TestPerSampleHeadGrads:
    def _setup(self, n=5, seed=51):
        net = init_network([dense(6), relu(), dense(3)], 4, 3, RngState(seed))
        gen = RngState(seed + 1).generator()
        x = gen.normal(size=(n, 4))
        y = gen.integers(0, 3, size=n)
        return net, x, y, backbone_features(net, x)

    def test_single_row_is_negated_loss_grad(self):
        net, x, y, cache = self._setup(n=1)
        rows = per_sample_head_grads(net, cache, y)
        _, g = loss_and_grad(net, x, y, scope="head_only")
        assert np.max(np.abs(rows[0] + g)) <= 1e-12

    def test_mean_rows_negated_equals_head_grad(self):
        net, x, y, cache = self._setup(n=7)
        rows = per_sample_head_grads(net, cache, y)
        _, g = loss_and_grad(net, x, y, scope="head_only")
        assert np.max(np.abs(-rows.mean(axis=0) - g)) <= 1e-12

    def test_saturated_likelihood_zero_row(self):
        net = init_network([dense(2)], 2, 2, RngState(0))
        net.params[:4] = 400.0 * np.eye(2).ravel()  # p(y|x) saturates to 1
        cache = backbone_features(net, np.array([[1.0, 0.0]]))
        rows = per_sample_head_grads(net, cache, np.array([0]))
        assert np.max(np.abs(rows)) <= 1e-12

    def test_stale_cache_rejected(self):
        net, x, y, cache = self._setup()
        net.params[0] += 1.0  # backbone change invalidates the cache
        with pytest.raises(StalenessError, match="stale"):
            per_sample_head_grads(net, cache, y)


class TestPredictAndFeatures:
    def test_tie_breaks_low_index(self):
        net = init_network([dense(3)], 3, 3, RngState(0))
        net.params[:9] = np.eye(3).ravel()
        net.params[9:] = 0.0
        assert predict(net, np.array([[0.2, 0.9, 0.9]]))[0] == 1
        assert predict(net, np.array([[0.5, 0.5, 0.5]]))[0] == 0

    def test_identity_backbone_features_are_input(self):
        net = init_network([dense(3)], 4, 3, RngState(1))
        x = RngState(2).generator().normal(size=(5, 4))
        cache = backbone_features(net, x)
        assert np.array_equal(cache.features, x)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = [conv2d(3, 3), relu(), maxpool(2), flatten(), dense(4)]
        net = init_network(spec, (1, 8, 8), 4, RngState(61))
        path = tmp_path / "model.ckpt"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        assert back.layers == net.layers
        assert back.input_shape == net.input_shape
        assert back.class_count == net.class_count
        assert np.array_equal(back.params, net.params)
        save_checkpoint(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)
