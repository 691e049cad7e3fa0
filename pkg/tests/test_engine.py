"""Layer engine tests: hand oracles, finite differences, optimiser recursion,
and checkpoint round-trips."""

import numpy as np
import pytest

from lgseg import engine
from lgseg.rng import SplitMix64


def conv2d_reference(x, w, b, stride=1, pad=0):
    """Independent nested-loop convolution oracle (zero padding)."""
    c, h, wid = x.shape
    oc, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    out = np.zeros((oc, ho, wo))
    for o in range(oc):
        for y in range(ho):
            for xx in range(wo):
                acc = b[o]
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            yy = y * stride + i - pad
                            xj = xx * stride + j - pad
                            if 0 <= yy < h and 0 <= xj < wid:
                                acc += w[o, ci, i, j] * x[ci, yy, xj]
                out[o, y, xx] = acc
    return out


class TestRng:
    def test_deterministic_streams(self):
        a = SplitMix64(42).floats(100)
        b = SplitMix64(42).floats(100)
        assert np.array_equal(a, b)

    def test_block_matches_scalar_path(self):
        r1, r2 = SplitMix64(7), SplitMix64(7)
        block = r1.u64_block(5)
        singles = [r2.next_u64() for _ in range(5)]
        assert block.tolist() == singles

    def test_split_children_differ(self):
        parent = SplitMix64(0)
        a, b = parent.split(), parent.split()
        assert not np.array_equal(a.floats(10), b.floats(10))

    def test_floats_in_unit_interval(self):
        u = SplitMix64(3).floats(10000)
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_shuffle_is_permutation(self):
        items = list(range(50))
        SplitMix64(9).shuffle(items)
        assert sorted(items) == list(range(50))
        assert items != list(range(50))


class TestXavierInit:
    def test_bound_for_equal_fans(self):
        # fan_in = fan_out = 3 -> a = sqrt(6/6) = 1
        t = engine.xavier_init((3, 3), 3, 3, SplitMix64(0))
        assert np.all(t >= -1.0) and np.all(t <= 1.0)
        assert np.abs(t).max() > 0.5  # actually spans the range

    def test_variance_matches_theory(self):
        # Var(U(-a,a)) = a^2/3 = 2/(fan_in+fan_out)
        t = engine.xavier_init((10000,), 100, 100, SplitMix64(1))
        assert t.var() == pytest.approx(0.01, rel=0.2)

    def test_deterministic_for_seed(self):
        a = engine.xavier_init((4, 5), 5, 4, SplitMix64(77))
        b = engine.xavier_init((4, 5), 5, 4, SplitMix64(77))
        assert np.array_equal(a, b)

    def test_zero_fan_rejected(self):
        with pytest.raises(ValueError):
            engine.xavier_init((2, 2), 0, 4, SplitMix64(0))


class TestConv2d:
    def test_identity_kernel(self):
        x = SplitMix64(0).uniform(-1, 1, (3, 5, 5))
        w = np.zeros((3, 3, 1, 1))
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        y = engine.conv2d_forward(x, w, np.zeros(3))
        assert np.array_equal(y, x)

    def test_hand_window_sums(self):
        x = np.arange(1.0, 10.0).reshape(1, 3, 3)
        w = np.ones((1, 1, 2, 2))
        y = engine.conv2d_forward(x, w, np.zeros(1))
        assert np.array_equal(y[0], [[12, 16], [24, 28]])

    def test_zero_weights_give_bias(self):
        x = SplitMix64(1).uniform(-1, 1, (2, 4, 4))
        y = engine.conv2d_forward(x, np.zeros((3, 2, 3, 3)), np.array([1.5, -2.0, 0.25]), pad=1)
        for o, b in enumerate([1.5, -2.0, 0.25]):
            assert np.all(y[o] == b)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_matches_reference(self, stride, pad):
        rng = SplitMix64(stride * 10 + pad)
        x = rng.uniform(-1, 1, (2, 7, 6))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, (3,))
        got = engine.conv2d_forward(x, w, b, stride, pad)
        want = conv2d_reference(x, w, b, stride, pad)
        assert np.allclose(got, want, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            engine.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))

    def test_nonpositive_output_rejected(self):
        with pytest.raises(ValueError):
            engine.conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))

    def test_zero_upstream_zero_grads(self):
        rng = SplitMix64(5)
        x = rng.uniform(-1, 1, (2, 4, 4))
        w = rng.uniform(-1, 1, (2, 2, 3, 3))
        gx, gw, gb = engine.conv2d_backward(x, w, np.zeros((2, 2, 2)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_backward(self):
        w = np.ones((1, 1, 1, 1))
        up = SplitMix64(2).uniform(-1, 1, (1, 4, 4))
        gx, _, _ = engine.conv2d_backward(np.zeros((1, 4, 4)), w, up)
        assert np.array_equal(gx, up)

    def test_boundedness(self):
        # sum|out| <= sum|w| * sum|in| + H*W*sum|b| for stride 1, pad 0
        rng = SplitMix64(8)
        x = rng.uniform(-2, 2, (2, 6, 6))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        b = rng.uniform(-1, 1, (3,))
        y = engine.conv2d_forward(x, w, b)
        bound = np.abs(w).sum() * np.abs(x).sum() + 6 * 6 * np.abs(b).sum()
        assert np.abs(y).sum() <= bound

    def test_forward_is_pure(self):
        rng = SplitMix64(11)
        x = rng.uniform(-1, 1, (2, 5, 5))
        w = rng.uniform(-1, 1, (2, 2, 3, 3))
        b = rng.uniform(-1, 1, (2,))
        y1 = engine.conv2d_forward(x, w, b, pad=1)
        y2 = engine.conv2d_forward(x, w, b, pad=1)
        assert np.array_equal(y1, y2)


class TestMaxPool:
    def test_hand_example(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        y, idx = engine.maxpool2d(x, 2, 2)
        assert np.array_equal(y, [[[4.0]]])
        gx = engine.maxpool2d_backward(idx, np.array([[[1.0]]]))
        assert np.array_equal(gx, [[[0, 0], [0, 1]]])

    def test_constant_input_ties_to_first_cell(self):
        x = np.ones((1, 4, 4))
        y, idx = engine.maxpool2d(x, 2, 2)
        assert np.all(y == 1.0)
        gx = engine.maxpool2d_backward(idx, np.full((1, 2, 2), 5.0))
        want = np.zeros((1, 4, 4))
        want[0, ::2, ::2] = 5.0
        assert np.array_equal(gx, want)

    def test_output_values_are_window_members(self):
        rng = SplitMix64(4)
        x = rng.uniform(-3, 3, (2, 7, 7))
        y, _ = engine.maxpool2d(x, 3, 2)
        for c in range(2):
            for oy in range(y.shape[1]):
                for ox in range(y.shape[2]):
                    window = x[c, oy * 2:oy * 2 + 3, ox * 2:ox * 2 + 3]
                    assert y[c, oy, ox] in window

    def test_partial_windows_truncated(self):
        y, _ = engine.maxpool2d(np.zeros((1, 5, 5)), 2, 2)
        assert y.shape == (1, 2, 2)

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError):
            engine.maxpool2d(np.zeros((1, 4, 4)), 0)
        with pytest.raises(ValueError):
            engine.maxpool2d(np.zeros((1, 4, 4)), 2, 0)


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        y = engine.dense_forward(x, np.eye(3), np.zeros(3))
        assert np.array_equal(y, x)

    def test_hand_example(self):
        y = engine.dense_forward(np.array([3.0, 4.0]), np.array([[1.0, 2.0]]), np.array([0.5]))
        assert y == pytest.approx([11.5])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            engine.dense_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert engine.sigmoid(np.array([0.0]))[0] == 0.5

    def test_relu_definition(self):
        assert np.array_equal(engine.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_sigmoid_open_interval(self):
        y = engine.sigmoid(np.array([-50.0, 50.0, -700.0, 700.0]))
        assert np.all(y > 0.0) and np.all(y < 1.0)

    def test_sigmoid_grad_at_zero(self):
        x = np.array([0.0])
        y = engine.sigmoid(x)
        g = engine.sigmoid_backward(y, np.ones(1))
        assert g[0] == pytest.approx(0.25)
        eps = 1e-6
        fd = (engine.sigmoid(x + eps) - engine.sigmoid(x - eps)) / (2 * eps)
        assert g[0] == pytest.approx(fd[0], abs=1e-9)


class TestSgd:
    def test_zero_grad_zero_velocity_fixed_point(self):
        params = {"a.weight": np.ones((2, 2))}
        state = engine.SgdState(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        engine.sgd_momentum_step(params, {"a.weight": np.zeros((2, 2))}, state)
        assert np.array_equal(params["a.weight"], np.ones((2, 2)))

    def test_plain_step(self):
        params = {"a.weight": np.array([1.0])}
        state = engine.SgdState(learning_rate=0.1)
        engine.sgd_momentum_step(params, {"a.weight": np.array([1.0])}, state)
        assert params["a.weight"][0] == pytest.approx(0.9)

    def test_momentum_recursion(self):
        # v1 = -0.1, w1 = -0.1; v2 = 0.9*(-0.1) - 0.1 = -0.19, w2 = -0.29
        params = {"a.weight": np.array([0.0])}
        state = engine.SgdState(learning_rate=0.1, momentum=0.9)
        g = {"a.weight": np.array([1.0])}
        engine.sgd_momentum_step(params, g, state)
        assert params["a.weight"][0] == pytest.approx(-0.1)
        engine.sgd_momentum_step(params, g, state)
        assert params["a.weight"][0] == pytest.approx(-0.29)

    def test_weight_decay_shrinks_weights_not_biases(self):
        params = {"a.weight": np.array([2.0]), "a.bias": np.array([2.0])}
        grads = {"a.weight": np.array([0.0]), "a.bias": np.array([0.0])}
        state = engine.SgdState(learning_rate=0.1, weight_decay=0.5)
        engine.sgd_momentum_step(params, grads, state)
        assert abs(params["a.weight"][0]) < 2.0
        assert params["a.bias"][0] == 2.0

    def test_shape_mismatch_rejected(self):
        state = engine.SgdState(learning_rate=0.1)
        with pytest.raises(ValueError):
            engine.sgd_momentum_step({"a.weight": np.zeros(2)}, {"a.weight": np.zeros(3)}, state)


class TestGradCheck:
    def test_dense_quadratic_is_exact(self):
        rng = SplitMix64(0)
        w = rng.uniform(-1, 1, (4, 8))
        b = rng.uniform(-1, 1, (4,))
        x = rng.uniform(-1, 1, (8,))

        def loss():
            y = engine.dense_forward(x, w, b)
            return 0.5 * float(y @ y)

        y = engine.dense_forward(x, w, b)
        gx, gw, gb = engine.dense_backward(x, w, y)
        err = engine.grad_check(loss, {"w": w, "b": b, "x": x}, {"w": gw, "b": gb, "x": gx}, eps=1e-5)
        assert err < 1e-7

    @pytest.mark.parametrize("seed", range(20))
    def test_conv_layer_fd(self, seed):
        rng = SplitMix64(seed)
        x = rng.uniform(-1, 1, (1, 4, 4))
        w = rng.uniform(-1, 1, (2, 1, 3, 3))
        b = rng.uniform(-1, 1, (2,))
        target = rng.uniform(-1, 1, (2, 2, 2))

        def loss():
            y = engine.conv2d_forward(x, w, b)
            return 0.5 * float(((y - target) ** 2).sum())

        y = engine.conv2d_forward(x, w, b)
        gx, gw, gb = engine.conv2d_backward(x, w, y - target)
        err = engine.grad_check(loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, eps=1e-5)
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_pool_relu_sigmoid_chain_fd(self, seed):
        rng = SplitMix64(1000 + seed)
        x = rng.uniform(-1, 1, (2, 4, 4))
        target = rng.uniform(0.2, 0.8, (2, 2, 2))

        def forward():
            h = engine.relu(x)
            p, idx = engine.maxpool2d(h, 2, 2)
            s = engine.sigmoid(p)
            return h, idx, s

        def loss():
            return 0.5 * float(((forward()[2] - target) ** 2).sum())

        h, idx, s = forward()
        gs = s - target
        gp = engine.sigmoid_backward(s, gs)
        gh = engine.maxpool2d_backward(idx, gp)
        gx = engine.relu_backward(x, gh)
        err = engine.grad_check(loss, {"x": x}, {"x": gx}, eps=1e-5)
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_dense_layer_fd(self, seed):
        rng = SplitMix64(2000 + seed)
        w = rng.uniform(-1, 1, (4, 8))
        b = rng.uniform(-1, 1, (4,))
        x = rng.uniform(-1, 1, (8,))
        target = rng.uniform(-1, 1, (4,))

        def loss():
            y = engine.dense_forward(x, w, b)
            return 0.5 * float(((y - target) ** 2).sum())

        y = engine.dense_forward(x, w, b)
        gx, gw, gb = engine.dense_backward(x, w, y - target)
        err = engine.grad_check(loss, {"w": w, "b": b, "x": x}, {"w": gw, "b": gb, "x": gx}, eps=1e-5)
        assert err < 1e-5

    def test_conv_fd_tighter_eps(self):
        # 1x4x4 input into a 2-channel 3x3 conv at eps=1e-6
        rng = SplitMix64(14)
        x = rng.uniform(-1, 1, (1, 4, 4))
        w = rng.uniform(-1, 1, (2, 1, 3, 3))
        b = rng.uniform(-1, 1, (2,))
        target = rng.uniform(-1, 1, (2, 2, 2))

        def loss():
            y = engine.conv2d_forward(x, w, b)
            return 0.5 * float(((y - target) ** 2).sum())

        y = engine.conv2d_forward(x, w, b)
        gx, gw, gb = engine.conv2d_backward(x, w, y - target)
        err = engine.grad_check(loss, {"x": x, "w": w, "b": b}, {"x": gx, "w": gw, "b": gb}, eps=1e-6)
        assert err < 1e-5

    def test_corrupted_gradient_detected(self):
        rng = SplitMix64(3)
        w = rng.uniform(0.5, 1.5, (3, 3))
        x = rng.uniform(0.5, 1.5, (3,))

        def loss():
            return float((w @ x).sum())

        _, gw, _ = engine.dense_backward(x, w, np.ones(3))
        err = engine.grad_check(loss, {"w": w}, {"w": 2.0 * gw}, eps=1e-5)
        assert err == pytest.approx(0.5, abs=0.05)

    def test_sampled_coordinates(self):
        rng = SplitMix64(6)
        w = rng.uniform(-1, 1, (10, 10))
        x = rng.uniform(-1, 1, (10,))

        def loss():
            return float((w @ x).sum())

        _, gw, _ = engine.dense_backward(x, w, np.ones(10))
        err = engine.grad_check(loss, {"w": w}, {"w": gw}, eps=1e-5, sample=7)
        assert err < 1e-7

    def test_bad_eps_rejected(self):
        with pytest.raises(ValueError):
            engine.grad_check(lambda: 0.0, {}, {}, eps=0.0)

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(ValueError):
            engine.grad_check(lambda: np.zeros(2), {}, {})


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = SplitMix64(0)
        tensors = {
            "local.0.weight": rng.uniform(-1, 1, (4, 3, 3, 3)),
            "local.0.bias": rng.uniform(-1, 1, (4,)),
            "fusion.2.weight": rng.uniform(-1e300, 1e300, (2, 2)),
        }
        path = tmp_path / "model.ckpt"
        engine.save_checkpoint(path, tensors)
        loaded = engine.load_checkpoint(path)
        assert list(loaded) == list(tensors)
        for name in tensors:
            assert tensors[name].shape == loaded[name].shape
            assert np.array_equal(tensors[name], loaded[name])
            assert tensors[name].tobytes() == loaded[name].tobytes()

    def test_same_tensors_same_bytes(self, tmp_path):
        tensors = {"a.weight": SplitMix64(5).uniform(-1, 1, (6, 6))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        engine.save_checkpoint(p1, tensors)
        engine.save_checkpoint(p2, tensors)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOTLGSEG")
        with pytest.raises(ValueError):
            engine.load_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "model.ckpt"
        engine.save_checkpoint(p, {"a.weight": np.ones((3, 3))})
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ValueError):
            engine.load_checkpoint(p)
