"""Tests for the reverse-mode autodiff core.

Gradients are checked against a central finite-difference oracle that is
independent of the backward implementation: it only reruns forward passes.
"""

import numpy as np
import pytest

from pnpdepth import autodiff as ad
from pnpdepth.errors import ConfigError, ContractError, GraphError, NumericError

REL_TOL = 1e-4
ABS_FLOOR = 1e-7
FD_H = 1e-5


def _fd_close(ad_val, fd_val):
    return abs(ad_val - fd_val) <= max(ABS_FLOOR, REL_TOL * max(abs(ad_val), abs(fd_val)))


def _safe_uniform(rng, shape):
    """Values with magnitude in [0.1, 1]: keeps relu/l1 kinks away from FD steps."""
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _check_against_fd(forward_fn, x0, grad, coords):
    """forward_fn(array) -> float; grad is the AD gradient at x0."""
    for idx in coords:
        xp = x0.copy()
        xp[idx] += FD_H
        xm = x0.copy()
        xm[idx] -= FD_H
        fd = (forward_fn(xp) - forward_fn(xm)) / (2 * FD_H)
        assert _fd_close(grad[idx], fd), (
            f"grad mismatch at {idx}: ad={grad[idx]}, fd={fd}")


def _coords(rng, shape, n=100):
    size = int(np.prod(shape))
    if size <= n:
        flat = np.arange(size)
    else:
        flat = rng.choice(size, size=n, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


class TestForwardBasics:
    def test_identity_kernel_conv(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 6, 7))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ad.conv2d(ad.leaf(x), ad.leaf(w), stride=1, pad=1)
        np.testing.assert_array_equal(out.out, x)

    def test_relu_values(self):
        out = ad.relu(ad.leaf(np.array([[[-1.0, 0.0, 2.0]]])))
        np.testing.assert_array_equal(out.out, [[[0.0, 0.0, 2.0]]])

    def test_stacked_convs_preserve_size(self):
        rng = np.random.default_rng(1)
        x = ad.leaf(rng.standard_normal((2, 10, 10)))
        w1 = ad.leaf(rng.standard_normal((3, 2, 3, 3)))
        w2 = ad.leaf(rng.standard_normal((1, 3, 3, 3)))
        out = ad.conv2d(ad.conv2d(x, w1, pad=1), w2, pad=1)
        assert out.out.shape == (1, 10, 10)

    def test_conv_output_size_formula(self):
        x = ad.leaf(np.ones((1, 9, 11)))
        w = ad.leaf(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, stride=2, pad=0)
        assert out.out.shape == (1, (9 - 3) // 2 + 1, (11 - 3) // 2 + 1)

    def test_repeated_forward_bit_identical(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 8, 8))
        w = rng.standard_normal((2, 2, 3, 3))
        a = ad.conv2d(ad.leaf(x), ad.leaf(w))
        b = ad.conv2d(ad.leaf(x), ad.leaf(w))
        assert a.out.tobytes() == b.out.tobytes()

    def test_upsample_downsample_shapes(self):
        x = ad.leaf(np.arange(24, dtype=float).reshape(1, 4, 6))
        up = ad.upsample2x(x)
        assert up.out.shape == (1, 8, 12)
        down = ad.downsample2x(x)
        assert down.out.shape == (1, 2, 3)
        # nearest-neighbor blocks
        np.testing.assert_array_equal(up.out[0, :2, :2], np.full((2, 2), x.out[0, 0, 0]))

    def test_concat_channels(self):
        a = ad.leaf(np.ones((2, 3, 3)))
        b = ad.leaf(np.zeros((1, 3, 3)))
        out = ad.concat([a, b])
        assert out.out.shape == (3, 3, 3)


class TestErrors:
    def test_conv_channel_mismatch_names_shapes(self):
        x = ad.leaf(np.ones((2, 5, 5)))
        w = ad.leaf(np.ones((1, 3, 3, 3)))
        with pytest.raises(ConfigError, match=r"\(2, 5, 5\).*\(1, 3, 3, 3\)"):
            ad.conv2d(x, w)

    def test_add_shape_mismatch(self):
        with pytest.raises(ConfigError):
            ad.add(ad.leaf(np.ones((1, 2, 2))), ad.leaf(np.ones((1, 3, 2))))

    def test_downsample_odd_extent(self):
        with pytest.raises(ConfigError):
            ad.downsample2x(ad.leaf(np.ones((1, 3, 4))))

    def test_non_finite_forward_is_hard_error(self):
        with pytest.raises(NumericError):
            ad.leaf(np.array([1.0, np.nan]))

    def test_non_scalar_loss_rejected(self):
        x = ad.leaf(np.ones((1, 2, 2)))
        y = ad.relu(x)
        with pytest.raises(ContractError):
            ad.backward_to(y, x)

    def test_stop_not_ancestor(self):
        x = ad.leaf(np.ones((1, 2, 2)))
        other = ad.leaf(np.ones((1, 2, 2)))
        loss = ad.sparse_loss(ad.relu(x), (np.zeros((1, 2, 2)), np.ones((1, 2, 2))))
        with pytest.raises(GraphError):
            ad.backward_to(loss, other)

    def test_unknown_loss_kind(self):
        x = ad.leaf(np.ones((1, 2, 2)))
        with pytest.raises(ConfigError):
            ad.sparse_loss(x, (np.zeros((1, 2, 2)), np.ones((1, 2, 2))), kind="huber")


class TestLossValues:
    def test_l1_example(self):
        pred = ad.leaf(np.array([[[2.0, 2.0]]]))
        values = np.array([[[1.0, 2.0]]])
        mask = np.ones((1, 1, 2))
        loss = ad.sparse_loss(pred, (values, mask), kind="l1")
        assert float(loss.out) == 0.5
        assert not loss.no_observation

    def test_l2_example(self):
        pred = ad.leaf(np.array([[[3.0]]]))
        loss = ad.sparse_loss(pred, (np.array([[[1.0]]]), np.ones((1, 1, 1))), kind="l2")
        assert float(loss.out) == 4.0

    def test_empty_mask_flags_no_observation(self):
        rng = np.random.default_rng(3)
        pred = ad.leaf(rng.standard_normal((1, 4, 4)))
        loss = ad.sparse_loss(pred, (np.zeros((1, 4, 4)), np.zeros((1, 4, 4))))
        assert float(loss.out) == 0.0
        assert loss.no_observation
        grad = ad.backward_to(loss, pred)
        np.testing.assert_array_equal(grad.data, 0.0)

    def test_berhu_value_against_direct_computation(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0, 4, (1, 5, 5))
        d = rng.uniform(0, 4, (1, 5, 5))
        m = (rng.random((1, 5, 5)) < 0.6).astype(float)
        loss = ad.sparse_loss(ad.leaf(p), (d, m), kind="berhu")
        # independent recomputation, scalar loop
        r = (p - d)[m > 0]
        c = 0.2 * np.abs(r).max()
        total = sum(abs(ri) if abs(ri) <= c else (ri * ri + c * c) / (2 * c) for ri in r)
        assert float(loss.out) == pytest.approx(total / len(r), abs=1e-12)

    def test_sum_of_squares_gradient(self):
        # sum-reduction l2 against zero target == sum of squares
        z = ad.leaf(np.array([[[1.0, 2.0]]]))
        loss = ad.sparse_loss(z, (np.zeros((1, 1, 2)), np.ones((1, 1, 2))),
                              kind="l2", reduction="sum")
        grad = ad.backward_to(loss, z)
        np.testing.assert_allclose(grad.data, [[[2.0, 4.0]]], atol=1e-15)

    def test_relu_blocks_gradient(self):
        z = ad.leaf(np.array([[[-1.0, 3.0]]]))
        loss = ad.sparse_loss(ad.relu(z), (np.zeros((1, 1, 2)), np.ones((1, 1, 2))),
                              kind="l2", reduction="sum")
        grad = ad.backward_to(loss, z)
        assert grad.data[0, 0, 0] == 0.0
        assert grad.data[0, 0, 1] == 6.0


def _l2_probe(node, target, mask):
    return ad.sparse_loss(node, (target, mask), kind="l2", reduction="mean")


class TestGradientsAgainstFiniteDifferences:
    """Per-op randomized FD checks (>=100 coordinates per op)."""

    def _run_input_check(self, rng, x0, build):
        """build(x_leaf) -> loss node. Checks d(loss)/d(x) on >=100 coords."""
        x_leaf = ad.leaf(x0)
        grad = ad.backward_to(build(x_leaf), x_leaf).data

        def forward(x_arr):
            return float(build(ad.leaf(x_arr)).out)

        _check_against_fd(forward, x0, grad, _coords(rng, x0.shape))

    def test_conv2d_input_grad(self):
        rng = np.random.default_rng(10)
        x0 = _safe_uniform(rng, (3, 7, 6))
        w = _safe_uniform(rng, (4, 3, 3, 3))
        t = rng.standard_normal((4, 7, 6))
        m = np.ones((4, 7, 6))
        self._run_input_check(
            rng, x0, lambda xl: _l2_probe(ad.conv2d(xl, ad.leaf(w), pad=1), t, m))

    def test_conv2d_strided_input_grad(self):
        rng = np.random.default_rng(11)
        x0 = _safe_uniform(rng, (2, 11, 10))
        w = _safe_uniform(rng, (3, 2, 3, 3))
        t = rng.standard_normal((3, 5, 4))
        m = np.ones((3, 5, 4))
        self._run_input_check(
            rng, x0,
            lambda xl: _l2_probe(ad.conv2d(xl, ad.leaf(w), stride=2, pad=0), t, m))

    def test_conv2d_weight_grad(self):
        rng = np.random.default_rng(12)
        x = _safe_uniform(rng, (3, 7, 6))
        w0 = _safe_uniform(rng, (4, 3, 3, 3))
        t = rng.standard_normal((4, 7, 6))
        m = np.ones((4, 7, 6))

        w_tensor = ad.Tensor(w0, requires_grad=True)
        loss = _l2_probe(ad.conv2d(ad.leaf(x), ad.leaf(w_tensor)), t, m)
        ad.backward(loss)

        def forward(w_arr):
            return float(_l2_probe(ad.conv2d(ad.leaf(x), ad.leaf(w_arr)), t, m).out)

        _check_against_fd(forward, w0, w_tensor.grad, _coords(rng, w0.shape))

    def test_bias_grad(self):
        rng = np.random.default_rng(13)
        x0 = _safe_uniform(rng, (4, 6, 6))
        b0 = _safe_uniform(rng, (4,))
        t = rng.standard_normal((4, 6, 6))
        m = np.ones((4, 6, 6))
        self._run_input_check(
            rng, x0, lambda xl: _l2_probe(ad.bias_add(xl, ad.leaf(b0)), t, m))

        b_tensor = ad.Tensor(b0, requires_grad=True)
        loss = _l2_probe(ad.bias_add(ad.leaf(x0), ad.leaf(b_tensor)), t, m)
        ad.backward(loss)

        def forward(b_arr):
            return float(_l2_probe(ad.bias_add(ad.leaf(x0), ad.leaf(b_arr)), t, m).out)

        _check_against_fd(forward, b0, b_tensor.grad, _coords(rng, b0.shape))

    def test_relu_grad(self):
        rng = np.random.default_rng(14)
        x0 = _safe_uniform(rng, (3, 8, 6))
        t = rng.standard_normal((3, 8, 6))
        m = np.ones((3, 8, 6))
        self._run_input_check(rng, x0, lambda xl: _l2_probe(ad.relu(xl), t, m))

    def test_add_grad(self):
        rng = np.random.default_rng(15)
        x0 = _safe_uniform(rng, (3, 8, 6))
        other = _safe_uniform(rng, (3, 8, 6))
        t = rng.standard_normal((3, 8, 6))
        m = np.ones((3, 8, 6))
        self._run_input_check(
            rng, x0, lambda xl: _l2_probe(ad.add(xl, ad.leaf(other)), t, m))

    def test_concat_grad(self):
        rng = np.random.default_rng(16)
        x0 = _safe_uniform(rng, (2, 8, 7))
        other = _safe_uniform(rng, (3, 8, 7))
        t = rng.standard_normal((5, 8, 7))
        m = np.ones((5, 8, 7))
        self._run_input_check(
            rng, x0, lambda xl: _l2_probe(ad.concat([xl, ad.leaf(other)]), t, m))
        self._run_input_check(
            rng, other, lambda xl: _l2_probe(ad.concat([ad.leaf(x0), xl]), t, m))

    def test_upsample2x_grad(self):
        rng = np.random.default_rng(17)
        x0 = _safe_uniform(rng, (3, 6, 7))
        t = rng.standard_normal((3, 12, 14))
        m = np.ones((3, 12, 14))
        self._run_input_check(rng, x0, lambda xl: _l2_probe(ad.upsample2x(xl), t, m))

    def test_downsample2x_grad(self):
        rng = np.random.default_rng(18)
        x0 = _safe_uniform(rng, (3, 10, 8))
        t = rng.standard_normal((3, 5, 4))
        m = np.ones((3, 5, 4))
        self._run_input_check(rng, x0, lambda xl: _l2_probe(ad.downsample2x(xl), t, m))

    def test_scale_grad(self):
        rng = np.random.default_rng(19)
        x0 = _safe_uniform(rng, (3, 8, 6))
        t = rng.standard_normal((3, 8, 6))
        m = np.ones((3, 8, 6))
        self._run_input_check(rng, x0, lambda xl: _l2_probe(ad.scale(xl, -1.7), t, m))

    @pytest.mark.parametrize("kind", ["l1", "l2", "berhu"])
    def test_loss_grad(self, kind):
        rng = np.random.default_rng(20)
        x0 = _safe_uniform(rng, (2, 9, 7))
        # residuals bounded away from 0 (l1 kink) by construction: targets
        # offset by >= 2 while |x| <= 1
        t = x0 + rng.uniform(2.0, 3.0, x0.shape) * rng.choice([-1.0, 1.0], x0.shape)
        m = (rng.random(x0.shape) < 0.7).astype(float)
        m.flat[0] = 1.0

        x_leaf = ad.leaf(x0)
        grad = ad.backward_to(ad.sparse_loss(x_leaf, (t, m), kind=kind), x_leaf).data

        def forward(x_arr):
            return float(ad.sparse_loss(ad.leaf(x_arr), (t, m), kind=kind).out)

        coords = _coords(rng, x0.shape)
        if kind == "berhu":
            # threshold c = 0.2*max|r| is treated as constant in backward
            # (standard reversed-Huber convention); FD at the argmax residual
            # would measure the non-detached derivative, so skip that pixel.
            argmax = np.unravel_index(np.argmax(np.abs((x0 - t)) * m), x0.shape)
            coords = [c for c in coords if c != argmax]
        _check_against_fd(forward, x0, grad, coords)

    def test_five_layer_net_grad(self):
        # random 5-layer conv net, FD oracle at 32 random coordinates
        rng = np.random.default_rng(21)
        x0 = _safe_uniform(rng, (2, 9, 8))
        ws = [_safe_uniform(rng, (4, 2, 3, 3))] + \
             [_safe_uniform(rng, (4, 4, 3, 3)) for _ in range(3)] + \
             [_safe_uniform(rng, (1, 4, 3, 3))]
        bs = [_safe_uniform(rng, (w.shape[0],)) for w in ws]
        t = rng.standard_normal((1, 9, 8))
        m = np.ones((1, 9, 8))

        def build(x_leaf):
            node = x_leaf
            for i, (w, b) in enumerate(zip(ws, bs)):
                node = ad.bias_add(ad.conv2d(node, ad.leaf(w)), ad.leaf(b))
                if i < 4:
                    node = ad.relu(node)
            return ad.sparse_loss(node, (t, m), kind="l2")

        x_leaf = ad.leaf(x0)
        grad = ad.backward_to(build(x_leaf), x_leaf).data

        def forward(x_arr):
            return float(build(ad.leaf(x_arr)).out)

        flat = rng.choice(x0.size, size=32, replace=False)
        for i in flat:
            idx = np.unravel_index(i, x0.shape)
            xp = x0.copy()
            xp[idx] += FD_H
            xm = x0.copy()
            xm[idx] -= FD_H
            fd = (forward(xp) - forward(xm)) / (2 * FD_H)
            assert abs(grad[idx] - fd) <= 1e-4 * max(abs(grad[idx]), abs(fd), 1e-3)


class TestBackwardContracts:
    def _small_net(self, rng, x_arr):
        w1 = ad.Tensor(_safe_uniform(rng, (3, 2, 3, 3)), requires_grad=True)
        w2 = ad.Tensor(_safe_uniform(rng, (1, 3, 3, 3)), requires_grad=True)
        x_leaf = ad.leaf(x_arr)
        h = ad.relu(ad.conv2d(x_leaf, ad.leaf(w1)))
        out = ad.conv2d(h, ad.leaf(w2))
        return x_leaf, h, out, (w1, w2)

    def test_truncation_blocks_parameters_and_ancestors(self):
        rng = np.random.default_rng(30)
        x_arr = _safe_uniform(rng, (2, 6, 6))
        x_leaf, h, out, params = self._small_net(rng, x_arr)
        loss = ad.sparse_loss(out, (np.zeros(out.out.shape), np.ones(out.out.shape)))
        grad = ad.backward_to(loss, h)
        assert grad.shape == h.out.shape
        assert np.any(grad.data != 0)
        for p in params:
            assert p.grad is None or not np.any(p.grad)
        assert x_leaf.tensor.grad is None or not np.any(x_leaf.tensor.grad)

    def test_full_backward_reaches_parameters(self):
        rng = np.random.default_rng(31)
        x_arr = _safe_uniform(rng, (2, 6, 6))
        _, _, out, params = self._small_net(rng, x_arr)
        loss = ad.sparse_loss(out, (np.zeros(out.out.shape), np.ones(out.out.shape)))
        ad.backward(loss)
        for p in params:
            assert p.grad is not None and np.any(p.grad)

    def test_backward_linearity(self):
        rng = np.random.default_rng(32)
        x_arr = _safe_uniform(rng, (2, 6, 6))
        t1 = rng.standard_normal((1, 6, 6))
        t2 = rng.standard_normal((1, 6, 6))
        m = np.ones((1, 6, 6))
        a, b = 0.7, -2.3

        def grads(combine):
            x_leaf, _, out, _ = self._small_net(np.random.default_rng(33), x_arr)
            l1 = ad.sparse_loss(out, (t1, m), kind="l2")
            l2 = ad.sparse_loss(out, (t2, m), kind="l1")
            return ad.backward_to(combine(l1, l2), x_leaf).data

        combined = grads(lambda l1, l2: ad.add(ad.scale(l1, a), ad.scale(l2, b)))
        g1 = grads(lambda l1, l2: l1)
        g2 = grads(lambda l1, l2: l2)
        np.testing.assert_allclose(combined, a * g1 + b * g2, atol=1e-12)

    def test_backward_determinism(self):
        rng = np.random.default_rng(34)
        x_arr = _safe_uniform(rng, (2, 6, 6))

        def run():
            x_leaf, h, out, params = self._small_net(np.random.default_rng(35), x_arr)
            loss = ad.sparse_loss(out, (np.zeros(out.out.shape), np.ones(out.out.shape)))
            g = ad.backward_to(loss, h)
            return out.out.tobytes(), g.data.tobytes()

        assert run() == run()

    def test_gradient_accumulates_over_shared_parent(self):
        # y = x + x => dy/dx = 2 elementwise
        x = ad.leaf(np.array([[[1.5]]]))
        s = ad.add(x, x)
        loss = ad.sparse_loss(s, (np.zeros((1, 1, 1)), np.ones((1, 1, 1))),
                              kind="l2", reduction="sum")
        grad = ad.backward_to(loss, x)
        # d/dx (2x)^2 = 8x = 12
        np.testing.assert_allclose(grad.data, [[[12.0]]], atol=1e-12)
