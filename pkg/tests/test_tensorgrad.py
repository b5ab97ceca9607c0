import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jigen.tensorgrad import (
    CheckpointError,
    Parameter,
    Tape,
    Tensor,
    add,
    affine,
    backward,
    conv2d,
    entropy,
    global_avg_pool,
    grad_check,
    load_checkpoint,
    maxpool2d,
    precision,
    relu,
    save_checkpoint,
    scale,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    tsum,
)
from jigen.tensorgrad import ops


def naive_conv(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                s += xp[ni, ci, i * stride + di, j * stride + dj] * w[oi, ci, di, dj]
                    out[ni, oi, i, j] = s + (b[oi] if b is not None else 0.0)
    return out


def naive_pool(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, oh, ow))
    for a in range(n):
        for b in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[a, b, i, j] = max(x[a, b, i * s + di, j * s + dj] for di in range(k) for dj in range(k))
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).random((2, 1, 5, 5)).astype(np.float32)
        out = conv2d(Tensor(x), Parameter(np.ones((1, 1, 1, 1), np.float32), "w"))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 2, 2))), Parameter(np.ones((1, 1, 2, 2)), "w"))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 4.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 2, 3))
        b = rng.normal(size=4)
        with precision(np.float64):
            out = conv2d(Tensor(x), Parameter(w, "w"), Parameter(b, "b"), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, padding), atol=1e-6)

    def test_random_3x3_by_2x2(self):
        rng = np.random.default_rng(1)
        x = rng.random((1, 1, 3, 3)).astype(np.float32)
        w = rng.random((1, 1, 2, 2)).astype(np.float32)
        out = conv2d(Tensor(x), Parameter(w, "w"))
        np.testing.assert_allclose(out.data, naive_conv(x.astype(np.float64), w.astype(np.float64), None, 1, 0), atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Parameter(np.zeros((1, 3, 2, 2)), "w"))

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Parameter(np.zeros((1, 1, 3, 3)), "w"))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
    def test_gradients(self, stride, padding):
        rng = np.random.default_rng(3)
        x = Parameter(rng.normal(size=(2, 2, 5, 5)), "x")
        w = Parameter(rng.normal(size=(3, 2, 3, 3)), "w")
        b = Parameter(rng.normal(size=3), "b")
        r = Tensor(rng.normal(size=(2, 3, 3, 3) if stride == 2 else (2, 3, 3, 3)))

        def build():
            out = conv2d(x, w, b, stride=stride, padding=padding)
            return tsum(Tensor(out.data * 0) if False else _dot(out, r))

        report = grad_check(build, [x, w, b])
        assert report.passed, report.summary()


def _dot(t, r):
    # sum(t * r) for a fixed r, built from differentiable pieces
    b = t.shape[0]
    flat = Tensor(t.data.reshape(b, -1), (t,), lambda g: (g.reshape(t.shape),), op="reshape")
    return affine(flat, Tensor(r.data.reshape(b, -1).T), Tensor(np.zeros(b)))


class TestMaxPool:
    def test_constant(self):
        out = maxpool2d(Tensor(np.full((1, 2, 4, 4), 0.5)), 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 0.5, np.float32))

    def test_small(self):
        out = maxpool2d(Tensor(np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)), 2)
        assert out.item() == 4.0

    @pytest.mark.parametrize("k,s", [(2, 2), (3, 2), (2, 1)])
    def test_matches_loop_oracle(self, k, s):
        x = np.random.default_rng(k + s).random((2, 3, 7, 6)).astype(np.float32)
        np.testing.assert_array_equal(maxpool2d(Tensor(x), k, s).data, naive_pool(x, k, s).astype(np.float32))

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)

    def test_tie_gradient_goes_to_first(self):
        x = Parameter(np.ones((1, 1, 2, 2), np.float32), "x")
        backward(tsum(maxpool2d(x, 2)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_overlapping_windows_accumulate(self):
        x = Parameter(np.array([[[[0, 0, 0], [0, 9, 0], [0, 0, 0]]]], dtype=np.float32), "x")
        backward(tsum(maxpool2d(x, 2, 1)))
        assert x.grad[0, 0, 1, 1] == 4.0
        assert x.grad.sum() == 4.0


class TestAffineReluGap:
    def test_identity_weights(self):
        x = np.random.default_rng(0).random((3, 4)).astype(np.float32)
        out = affine(Tensor(x), Parameter(np.eye(4), "w"), Parameter(np.zeros(4), "b"))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights_give_bias(self):
        b = np.array([1.0, -2.0, 3.0], np.float32)
        out = affine(Tensor(np.ones((2, 5))), Parameter(np.zeros((5, 3)), "w"), Parameter(b, "b"))
        np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))

    def test_random_dot_oracle(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        with precision(np.float64):
            out = affine(Tensor(x), Parameter(w, "w"), Parameter(b, "b"))
        expected = [[sum(x[i, k] * w[k, j] for k in range(4)) + b[j] for j in range(2)] for i in range(3)]
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            affine(Tensor(np.ones((2, 3))), Parameter(np.ones((4, 2)), "w"), Parameter(np.zeros(2), "b"))

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])

    def test_gap_constant(self):
        assert global_avg_pool(Tensor(np.full((1, 1, 3, 3), 0.25))).item() == pytest.approx(0.25)

    def test_gap_values(self):
        assert global_avg_pool(Tensor(np.array([[[[1, 2], [3, 4]]]], dtype=np.float32))).item() == 2.5


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
        assert loss.item() == pytest.approx(math.log(7), abs=1e-6)

    def test_confident_margin(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 100
        assert softmax_cross_entropy(Tensor(logits), [2]).item() < 1e-8

    def test_zero_mask(self):
        z = Parameter(np.random.default_rng(0).normal(size=(4, 3)), "z")
        loss = softmax_cross_entropy(z, [0, 1, 2, 0], mask=[0, 0, 0, 0])
        backward(loss)
        assert loss.item() == 0.0
        assert not z.grad.any()

    def test_masked_rows_get_no_gradient(self):
        z = Parameter(np.random.default_rng(1).normal(size=(4, 3)), "z")
        backward(softmax_cross_entropy(z, [0, 1, 2, 0], mask=[1, 0, 1, 0]))
        assert not z.grad[[1, 3]].any()
        assert z.grad[[0, 2]].any()

    def test_mask_scaling_is_exact(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(6, 4))
        m = np.array([1, 0, 1, 1, 0, 1], float)
        grads, values = [], []
        for c in (1.0, 4.0):
            z = Parameter(data, "z")
            loss = softmax_cross_entropy(z, [0, 1, 2, 3, 0, 1], mask=c * m)
            backward(loss)
            grads.append(z.grad)
            values.append(loss.item())
        assert values[1] == 4.0 * values[0]
        np.testing.assert_array_equal(grads[1], 4.0 * grads[0])

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient(self):
        z = Parameter(np.random.default_rng(5).normal(size=(5, 4)), "z")
        report = grad_check(lambda: softmax_cross_entropy(z, [0, 1, 2, 3, 1], mask=[1, 0.5, 0, 2, 1]), [z])
        assert report.passed, report.summary()


class TestEntropy:
    def test_uniform(self):
        assert entropy(Tensor(np.zeros((2, 4)))).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_dominant(self):
        z = np.zeros((1, 3))
        z[0, 1] = 100
        assert entropy(Tensor(z)).item() == pytest.approx(0.0, abs=1e-10)

    def test_two_class(self):
        assert entropy(Tensor(np.zeros((1, 2)))).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_gradient(self):
        z = Parameter(np.random.default_rng(6).normal(size=(4, 5)), "z")
        report = grad_check(lambda: entropy(z, mask=[True, False, True, True]), [z])
        assert report.passed, report.summary()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 9), st.integers(0, 10_000), st.floats(0.01, 50))
    def test_bounds_and_softmax_rows(self, b, k, seed, spread):
        z = np.random.default_rng(seed).normal(scale=spread, size=(b, k))
        h = entropy(Tensor(z)).item()
        assert -1e-6 <= h <= math.log(k) + 1e-6
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)


class TestBackward:
    def test_linear_hand_derivative(self):
        x = np.array([[1.0, 2.0, 3.0]], np.float32)
        W = Parameter(np.random.default_rng(0).normal(size=(3, 2)).astype(np.float32), "W")
        backward(tsum(affine(Tensor(x), W, Tensor(np.zeros(2)))))
        # d/dW sum(x W) = x^T 1
        np.testing.assert_allclose(W.grad, np.outer(x[0], np.ones(2)))

    def test_constant_loss(self):
        W = Parameter(np.ones((2, 2)), "W")
        backward(Tensor(np.array(3.0)))
        assert not W.grad.any()

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            backward(Tensor(np.ones(3)))

    def test_linearity(self):
        rng = np.random.default_rng(7)
        W = Parameter(rng.normal(size=(4, 3)), "W")
        x = Tensor(rng.normal(size=(5, 4)))
        b = Tensor(np.zeros(3))

        def losses():
            z = affine(x, W, b)
            return softmax_cross_entropy(z, [0, 1, 2, 0, 1]), entropy(z)

        with precision(np.float64):
            W.data = W.data.astype(np.float64)
            W.zero_grad()
            l1, l2 = losses()
            backward(l1)
            g1 = W.grad.copy()
            W.zero_grad()
            backward(l2)
            g2 = W.grad.copy()
            W.zero_grad()
            backward(add(*losses()))
            np.testing.assert_allclose(W.grad, g1 + g2, rtol=1e-12, atol=1e-15)

    def test_tape_visits_each_node_once(self):
        W = Parameter(np.ones((2, 2)), "W")
        x = Tensor(np.ones((1, 2)))
        h = affine(x, W, Tensor(np.zeros(2)))
        loss = tsum(add(h, h))  # h reached twice
        tape = Tape.record(loss)
        assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
        backward(loss, tape)
        np.testing.assert_allclose(W.grad, 2 * np.ones((2, 2)))

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.random((2, 3, 6, 6)).astype(np.float32))
        w = Parameter(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), "w")
        grads = []
        for _ in range(2):
            w.zero_grad()
            backward(tsum(global_avg_pool(relu(conv2d(x, w)))))
            grads.append(w.grad.tobytes())
        assert grads[0] == grads[1]


class TestSGD:
    def test_zero_gradient(self):
        p = Parameter(np.array([1.0, 2.0], np.float32), "p")
        sgd_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_plain_step(self):
        p = Parameter(np.array([1.0], np.float32), "p")
        p.grad = np.ones(1, np.float32)
        sgd_step([p], lr=0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-7)
        assert not p.grad.any()

    def test_momentum_recurrence(self):
        p = Parameter(np.array([0.0], np.float32), "p")
        vel = {}
        for _ in range(2):
            p.grad = np.ones(1, np.float32)
            sgd_step([p], lr=1.0, momentum=0.9, velocity=vel)
        # v1 = 1, v2 = 0.9 + 1 -> total 2.9
        assert p.data[0] == pytest.approx(-2.9, abs=1e-6)


class TestGradCheck:
    def test_affine_ce(self):
        rng = np.random.default_rng(9)
        W = Parameter(rng.normal(size=(6, 4)), "W")
        b = Parameter(rng.normal(size=4), "b")
        x = Tensor(rng.normal(size=(5, 6)))
        report = grad_check(lambda: softmax_cross_entropy(affine(x, W, b), [0, 1, 2, 3, 0]), [W, b], tolerance=1e-4)
        assert report.passed, report.summary()
        assert report.checked == W.size + b.size

    def test_conv_pool_ce(self):
        rng = np.random.default_rng(10)
        w = Parameter(rng.normal(size=(3, 2, 3, 3)) * 0.5, "w")
        cb = Parameter(rng.normal(size=3) * 0.1, "cb")
        W = Parameter(rng.normal(size=(3, 4)), "W")
        b = Parameter(np.zeros(4), "b")
        x = Tensor(rng.random((3, 2, 8, 8)))

        def build():
            h = maxpool2d(relu(conv2d(x, w, cb)), 2)
            return softmax_cross_entropy(affine(global_avg_pool(h), W, b), [0, 1, 3])

        report = grad_check(build, [w, cb, W, b], tolerance=1e-4)
        assert report.passed, report.summary()

    def test_restores_parameters(self):
        W = Parameter(np.random.default_rng(11).normal(size=(3, 2)).astype(np.float32), "W")
        before = W.data.copy()
        grad_check(lambda: entropy(affine(Tensor(np.ones((1, 3))), W, Tensor(np.zeros(2)))), [W])
        assert W.data.dtype == np.float32
        np.testing.assert_array_equal(W.data, before)

    def test_corrupted_backward_fails(self, monkeypatch):
        real_relu = ops.relu

        def bad_relu(x):
            out = real_relu(x)
            out.backward_fn = lambda g: (g,)  # ignores the mask
            return out

        rng = np.random.default_rng(12)
        W = Parameter(rng.normal(size=(4, 6)), "W")
        W2 = Parameter(rng.normal(size=(6, 3)), "W2")
        x = Tensor(rng.normal(size=(8, 4)))

        def build():
            h = bad_relu(affine(x, W, Tensor(np.zeros(6))))
            return softmax_cross_entropy(affine(h, W2, Tensor(np.zeros(3))), [0, 1, 2, 0, 1, 2, 0, 1])

        report = grad_check(build, [W, W2])
        assert not report.passed


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        params = [Parameter(rng.normal(size=(2, 3)).astype(np.float32), "a.weight"),
                  Parameter(rng.normal(size=(4,)).astype(np.float32), "a.bias")]
        save_checkpoint(params, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert list(loaded) == ["a.weight", "a.bias"]
        for p in params:
            assert loaded[p.name].tobytes() == p.data.tobytes()

    def test_header_layout(self, tmp_path):
        save_checkpoint([Parameter(np.zeros(2, np.float32), "w")], tmp_path / "ck")
        raw = (tmp_path / "ck").read_bytes()
        assert raw[:4] == b"JGCK"
        assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "ck").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_truncated(self, tmp_path):
        save_checkpoint([Parameter(np.zeros((3, 3), np.float32), "w")], tmp_path / "ck")
        raw = (tmp_path / "ck").read_bytes()
        (tmp_path / "ck").write_bytes(raw[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "ck")
