"""Kernels: bilinear sampling, softmax, soft-argmax, NMS, conv, deformable conv."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from deformfeat.numerics import (bilinear_sample, conv2d, dcn_conv, grad_check, kernel_taps, nms,
                                 patch_coordinates, selu, softargmax, softmax)


def loop_bilinear(grid: np.ndarray, x: float, y: float) -> np.ndarray:
    """Scalar reference: explicit four-neighbour weights, zero outside."""
    C, H, W = grid.shape
    x0, y0 = math.floor(x), math.floor(y)
    out = np.zeros(C)
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            w = (1 - abs(x - xi)) * (1 - abs(y - yi))
            if 0 <= xi < W and 0 <= yi < H:
                out += w * grid[:, yi, xi]
    return out


def loop_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int) -> np.ndarray:
    C, H, W = x.shape
    O, _, K, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho, Wo = H + 2 * pad - K + 1, W + 2 * pad - K + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for u in range(K):
                        for v in range(K):
                            acc += w[o, c, u, v] * xp[c, i + u, j + v]
                out[o, i, j] = acc
    return out


class TestBilinearSample:
    def test_integer_point_is_exact(self):
        g = torch.arange(24.0).reshape(2, 3, 4)
        out = bilinear_sample(g, torch.tensor([[2.0, 1.0]]))
        torch.testing.assert_close(out[0], g[:, 1, 2])

    def test_average_of_four(self):
        g = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
        assert bilinear_sample(g, torch.tensor([0.5, 0.5])).item() == pytest.approx(1.5)

    def test_out_of_bounds_reads_zero(self):
        g = torch.ones(1, 3, 3)
        pts = torch.tensor([[-1.0, 0.0], [3.0, 1.0], [-0.5, 1.0], [1.0, 2.5]])
        out = bilinear_sample(g, pts)[:, 0]
        torch.testing.assert_close(out, torch.tensor([0.0, 0.0, 0.5, 0.5]))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(3, 5, 7))
        pts = rng.uniform(-1.5, 7.5, size=(40, 2))
        out = bilinear_sample(torch.from_numpy(g), torch.from_numpy(pts)).numpy()
        ref = np.stack([loop_bilinear(g, *p) for p in pts])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_batched_shapes(self):
        g = torch.randn(2, 3, 6, 6)
        pts = torch.rand(2, 4, 5, 2) * 5
        out = bilinear_sample(g, pts)
        assert out.shape == (2, 4, 5, 3)
        torch.testing.assert_close(out[1], bilinear_sample(g[1], pts[1]))

    @given(x=st.floats(0, 4), y=st.floats(0, 3), a=st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_linear_along_x_between_integers(self, x, y, a):
        g = torch.from_numpy(np.random.default_rng(1).normal(size=(2, 5, 6)))
        x0 = math.floor(x)
        lo = bilinear_sample(g, torch.tensor([float(x0), y]))
        hi = bilinear_sample(g, torch.tensor([float(x0 + 1), y]))
        mid = bilinear_sample(g, torch.tensor([x0 + a, y]))
        torch.testing.assert_close(mid, (1 - a) * lo + a * hi)

    def test_gradient_wrt_points(self):
        g = torch.randn(3, 6, 6, generator=torch.Generator().manual_seed(3))
        p = torch.tensor([[2.3, 1.7], [4.6, 3.2]])
        err = grad_check(lambda q: bilinear_sample(g, q).pow(2).sum(), p)
        assert err < 1e-4

    def test_gradient_wrt_grid(self):
        p = torch.tensor([[2.3, 1.7], [0.4, 4.2]])
        g = torch.randn(2, 5, 5, generator=torch.Generator().manual_seed(4))
        err = grad_check(lambda h: bilinear_sample(h, p).sin().sum(), g)
        assert err < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bilinear_sample(torch.zeros(2, 1, 4, 4), torch.zeros(3, 5, 2))


class TestSoftmax:
    def test_constant_is_uniform(self):
        torch.testing.assert_close(softmax(torch.full((5,), 3.0)), torch.full((5,), 0.2))

    def test_two_values(self):
        # scalar oracle: 1 / (1 + e^-2)
        p0 = 1.0 / (1.0 + math.exp(-2.0))
        assert round(p0, 6) == 0.880797
        out = softmax(torch.tensor([0.0, -2.0]), 1.0)
        torch.testing.assert_close(out, torch.tensor([p0, 1 - p0]))
        assert out[1].item() == pytest.approx(0.119203, abs=1e-6)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100),
           st.floats(0.05, 10))
    @settings(max_examples=60, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, xs, c, t):
        x = torch.tensor(xs)
        p = softmax(x, t)
        assert abs(p.sum().item() - 1.0) < 1e-12
        torch.testing.assert_close(softmax(x + c, t), p, atol=1e-12, rtol=1e-9)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_non_positive_temperature(self, t):
        with pytest.raises(ValueError):
            softmax(torch.zeros(3), t)


class TestSoftargmax:
    def test_symmetric_patch(self):
        r = torch.tensor([1.0, 2.0, 1.0])
        patch = r[:, None] * r[None, :]
        torch.testing.assert_close(softargmax(patch, 0.1), torch.zeros(2))

    def test_uniform_patch(self):
        torch.testing.assert_close(softargmax(torch.ones(5, 5), 0.1), torch.zeros(2))

    def test_spike_approaches_its_offset(self):
        patch = torch.zeros(3, 3)
        patch[0, 2] = 1.0  # row -1, column +1 -> (dx, dy) = (1, -1)
        prev = None
        for t in (1.0, 0.3, 0.1, 0.02):
            off = softargmax(patch, t)
            # dense oracle: explicit weighted sum over the nine cells
            w = np.exp(patch.numpy().ravel() / t)
            w /= w.sum()
            cells = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
            ref = np.array([sum(wi * c[0] for wi, c in zip(w, cells)), sum(wi * c[1] for wi, c in zip(w, cells))])
            np.testing.assert_allclose(off.numpy(), ref, atol=1e-12)
            d = torch.linalg.vector_norm(off - torch.tensor([1.0, -1.0])).item()
            if prev is not None:
                assert d < prev
            prev = d
        assert prev < 1e-9

    def test_offset_bounded(self):
        patch = torch.randn(4, 5, 5) * 10
        off = softargmax(patch, 0.1)
        assert off.abs().max() <= 2.0

    def test_even_width_rejected(self):
        with pytest.raises(ValueError):
            softargmax(torch.zeros(4, 4), 0.1)
        with pytest.raises(ValueError):
            patch_coordinates(4)

    def test_gradient(self):
        patch = torch.randn(5, 5, generator=torch.Generator().manual_seed(5)) * 0.3
        err = grad_check(lambda p: (softargmax(p, 0.1) * torch.tensor([1.0, -0.7])).sum(), patch)
        assert err < 1e-4


def brute_nms(s: np.ndarray, r: int) -> np.ndarray:
    H, W = s.shape
    out = np.zeros_like(s, dtype=bool)
    for y in range(H):
        for x in range(W):
            ok = True
            for v in range(max(0, y - r), min(H, y + r + 1)):
                for u in range(max(0, x - r), min(W, x + r + 1)):
                    if (u, v) != (x, y) and s[v, u] >= s[y, x]:
                        ok = False
            out[y, x] = ok
    return out


class TestNms:
    def test_single_spike(self):
        s = torch.full((7, 7), 0.3)
        s[2, 4] = 0.9
        mask = nms(s, 2)
        assert mask.sum() == 1 and mask[2, 4]

    def test_constant_map_is_empty(self):
        assert not nms(torch.full((6, 6), 0.5), 1).any()

    @pytest.mark.parametrize("r", [1, 2, 3])
    def test_matches_brute_force(self, r):
        rng = np.random.default_rng(r)
        s = rng.random((11, 13))
        s[3, 3] = s[3, 4] = 2.0  # a tie; both must go
        np.testing.assert_array_equal(nms(torch.from_numpy(s), r).numpy(), brute_nms(s, r))

    def test_batched(self):
        s = torch.rand(2, 1, 9, 9)
        m = nms(s, 1)
        assert m.shape == (2, 1, 9, 9)
        torch.testing.assert_close(m[1, 0], nms(s[1, 0], 1))

    @given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_larger_radius_selects_subset(self, seed, r1, r2):
        small, big = sorted((r1, r2))
        s = torch.from_numpy(np.random.default_rng(seed).random((12, 12)))
        assert not (nms(s, big) & ~nms(s, small)).any()

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            nms(torch.zeros(3, 3), 0)


class TestConv2d:
    def test_identity_kernel(self):
        x = torch.randn(3, 5, 5)
        w = torch.eye(3).reshape(3, 3, 1, 1)
        torch.testing.assert_close(conv2d(x, w), x)

    def test_box_on_impulse(self):
        x = torch.zeros(1, 7, 7)
        x[0, 3, 3] = 1.0
        out = conv2d(x, torch.ones(1, 1, 3, 3), padding=1)
        ref = torch.zeros(1, 7, 7)
        ref[0, 2:5, 2:5] = 1.0
        torch.testing.assert_close(out, ref)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), padding=1)
        np.testing.assert_allclose(out.numpy(), loop_conv(x, w, b, 1), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 3, 3, 3))

    def test_selu_constants(self):
        x = torch.tensor([-1.0, 2.0])
        ref = torch.tensor([1.0507009873554805 * 1.6732632423543772 * (math.exp(-1) - 1), 2 * 1.0507009873554805])
        torch.testing.assert_close(selu(x), ref)


def loop_dcn(x, w, b, offsets):
    """Direct evaluation: explicit bilinear_sample call per output pixel and tap."""
    C, H, W = x.shape
    O, _, K, _ = w.shape
    taps = kernel_taps(K)
    out = torch.zeros(O, H, W)
    for i in range(H):
        for j in range(W):
            acc = b.clone()
            for t in range(K * K):
                p = torch.tensor([j, i], dtype=x.dtype) + taps[t] + offsets[i, j, t]
                v = bilinear_sample(x, p)
                acc = acc + w[:, :, t // K, t % K] @ v
            out[:, i, j] = acc
    return out


class TestDcnConv:
    @pytest.mark.parametrize("seed", range(3))
    def test_zero_offsets_reduce_to_conv(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(2, 3, 7, 6, generator=g)
        w = torch.randn(4, 3, 3, 3, generator=g)
        b = torch.randn(4, generator=g)
        out = dcn_conv(x, w, b, torch.zeros(2, 7, 6, 9, 2))
        torch.testing.assert_close(out, conv2d(x, w, b, padding=1), atol=1e-6, rtol=0)

    def test_shift_on_ramp(self):
        H, W = 6, 8
        x = torch.arange(W, dtype=torch.float64).repeat(H, 1)[None] * 0.5 + 1.0
        w = torch.randn(2, 1, 3, 3, generator=torch.Generator().manual_seed(7))
        off = torch.zeros(H, W, 9, 2)
        off[..., 0] = 1.0
        # zero-pad first, then shift the padded frame by one column: x'(u) = x(u + 1)
        shifted = F.pad(x, (1, 2, 1, 1))[..., 1:]
        torch.testing.assert_close(dcn_conv(x, w, None, off), conv2d(shifted, w, None))

    def test_matches_loop_oracle(self):
        g = torch.Generator().manual_seed(8)
        x = torch.randn(2, 5, 4, generator=g)
        w = torch.randn(3, 2, 3, 3, generator=g)
        b = torch.randn(3, generator=g)
        off = torch.randn(5, 4, 9, 2, generator=g) * 0.8
        torch.testing.assert_close(dcn_conv(x, w, b, off), loop_dcn(x, w, b, off))

    def test_matches_torchvision(self):
        tv = pytest.importorskip("torchvision.ops")
        g = torch.Generator().manual_seed(9)
        x = torch.randn(1, 3, 6, 7, generator=g)
        w = torch.randn(2, 3, 3, 3, generator=g)
        off = torch.randn(1, 6, 7, 9, 2, generator=g) * 0.6
        tv_off = off.flip(-1).reshape(1, 6, 7, 18).permute(0, 3, 1, 2)  # (dy, dx) channel pairs
        ref = tv.deform_conv2d(x, tv_off, w, padding=1)
        torch.testing.assert_close(dcn_conv(x, w, None, off), ref)

    def test_gradients(self):
        g = torch.Generator().manual_seed(10)
        x = torch.randn(1, 4, 4, generator=g)
        w = torch.randn(2, 1, 3, 3, generator=g)
        off = torch.rand(4, 4, 9, 2, generator=g) * 0.6 + 0.2  # away from integer kinks
        assert grad_check(lambda o: dcn_conv(x, w, None, o).pow(2).sum(), off) < 1e-4
        assert grad_check(lambda k: dcn_conv(x, k, None, off).pow(2).sum(), w) < 1e-4
        assert grad_check(lambda z: dcn_conv(z, w, None, off).pow(2).sum(), x) < 1e-4

    def test_offset_shape_checked(self):
        with pytest.raises(ValueError):
            dcn_conv(torch.zeros(1, 4, 4), torch.zeros(1, 1, 3, 3), None, torch.zeros(4, 4, 4, 2))


class TestGradCheck:
    def test_square(self):
        assert grad_check(lambda x: (x ** 2).sum(), torch.tensor([3.0])) < 1e-6

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x.sum() * 2

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(3)

        assert grad_check(Wrong.apply, torch.ones(3)) > 0.4
