import numpy as np
import pytest
import torch
import torch.nn.functional as F

from deformfeat.descriptors import (DMH, MAGIC, SDDH, DescriptorFile, SddhConfig, SparseDescriptorHead,
                                    dmh_extract, estimate_offsets, read_descriptor_file, sddh_extract,
                                    write_descriptor_file)
from deformfeat.numerics import bilinear_sample, grad_check, kernel_taps


def seeded_head(cfg, seed=0, offset_scale=0.3, c_in=None):
    torch.manual_seed(seed)
    head = SDDH(cfg, c_in=c_in)
    with torch.no_grad():
        head.offset_proj_w.normal_(0, offset_scale)  # live offsets instead of the all-zero start
        head.offset_proj_b.normal_(0, offset_scale)
    return head


def loop_sddh(feat, p, head):
    """One keypoint at a time with plain tensor arithmetic."""
    K, M = head.cfg.K, head.cfg.M
    C = feat.shape[0]
    patch = torch.stack([bilinear_sample(feat, p + t) for t in kernel_taps(K)])  # (K*K, C)
    hidden = torch.zeros(2 * M)
    for o in range(2 * M):
        acc = head.offset_conv_b[o]
        for k in range(K * K):
            for c in range(C):
                acc = acc + head.offset_conv_w[o, c, k // K, k % K] * patch[k, c]
        hidden[o] = acc
    hidden = F.selu(hidden)
    off = (head.offset_proj_w @ hidden + head.offset_proj_b).reshape(M, 2)
    d = head.conv_m_b.clone()
    for i in range(M):
        v = bilinear_sample(feat, p + off[i])
        phi = F.selu(head.phi_w @ v + head.phi_b)
        d = d + head.conv_m_w[i] @ phi
    return off, d / d.norm()


class TestConfig:
    def test_defaults(self):
        assert (SddhConfig().K, SddhConfig().M) == (3, 16)

    @pytest.mark.parametrize("K,M", [(2, 4), (0, 4), (3, 0)])
    def test_invalid(self, K, M):
        with pytest.raises(ValueError):
            SddhConfig(K=K, M=M, dim=8)


class TestEstimateOffsets:
    def test_zero_weights(self):
        head = SDDH(SddhConfig(K=3, M=5, dim=4))
        with torch.no_grad():
            head.offset_conv_w.zero_()
        torch.testing.assert_close(estimate_offsets(torch.randn(4, 3, 3), head), torch.zeros(5, 2))

    def test_default_init_starts_at_keypoint(self):
        head = SDDH(SddhConfig(K=3, M=5, dim=4))
        torch.testing.assert_close(estimate_offsets(torch.randn(4, 3, 3), head), torch.zeros(5, 2))

    def test_bias_encodes_grid(self):
        head = SDDH(SddhConfig(K=5, M=25, dim=4))
        with torch.no_grad():
            head.offset_proj_b.copy_(kernel_taps(5).reshape(-1))
        torch.testing.assert_close(estimate_offsets(torch.randn(4, 5, 5), head), kernel_taps(5))

    def test_loop_oracle(self):
        head = seeded_head(SddhConfig(K=3, M=4, dim=6), seed=1)
        feat = torch.randn(6, 9, 9)
        p = torch.tensor([4.0, 5.0])
        patch = feat[:, 4:7, 3:6]
        off, _ = loop_sddh(feat, p, head)
        torch.testing.assert_close(estimate_offsets(patch, head), off)

    def test_wrong_patch_size(self):
        head = SDDH(SddhConfig(K=3, M=4, dim=6))
        with pytest.raises(ValueError):
            estimate_offsets(torch.randn(6, 5, 5), head)


class TestSddhExtract:
    def test_single_sample_reduction(self):
        cfg = SddhConfig(K=3, M=1, dim=5)
        head = SDDH(cfg)
        with torch.no_grad():
            head.phi_w.copy_(torch.eye(5))
            head.conv_m_w.copy_(torch.eye(5)[None])
        feat = torch.rand(5, 8, 8) + 0.1  # positive, so SELU acts as a scale
        p = torch.tensor([[3.25, 4.5], [5.0, 2.0]])
        ds = sddh_extract(feat, p, head)
        ref = F.normalize(bilinear_sample(feat, p), dim=-1)
        torch.testing.assert_close(ds.vectors, ref)

    def test_loop_oracle(self):
        head = seeded_head(SddhConfig(K=3, M=6, dim=5), seed=2)
        feat = torch.randn(5, 12, 11)
        pts = torch.tensor([[3.3, 4.7], [7.0, 8.0], [5.5, 2.25]])
        ds = sddh_extract(feat, pts, head)
        for k, p in enumerate(pts):
            off, d = loop_sddh(feat, p, head)
            torch.testing.assert_close(ds.sample_offsets[k], off)
            torch.testing.assert_close(ds.vectors[k], d)

    def test_unit_norm(self):
        head = seeded_head(SddhConfig(K=3, M=8, dim=16), seed=3)
        ds = sddh_extract(torch.randn(16, 20, 20), torch.rand(50, 2) * 17 + 1, head)
        torch.testing.assert_close(ds.vectors.norm(dim=1), torch.ones(len(ds)), atol=1e-6, rtol=0)

    def test_border_keypoints_dropped(self):
        head = SDDH(SddhConfig(K=3, M=4, dim=4))
        pts = torch.tensor([[0.5, 4.0], [4.0, 4.0], [4.0, 9.5], [9.0, 9.0]])
        ds = sddh_extract(torch.randn(4, 11, 11), pts, head)
        assert ds.indices.tolist() == [1, 3]
        assert ds.dropped == [0, 2]

    def test_translation_equivariance(self):
        head = seeded_head(SddhConfig(K=3, M=6, dim=6), seed=4)
        feat = torch.zeros(6, 30, 30)
        feat[:, 5:15, 5:15] = torch.randn(6, 10, 10)
        shifted = torch.roll(feat, shifts=(4, 6), dims=(1, 2))
        pts = torch.tensor([[9.3, 8.6], [11.0, 10.0]])
        a = sddh_extract(feat, pts, head)
        b = sddh_extract(shifted, pts + torch.tensor([6.0, 4.0]), head)
        torch.testing.assert_close(a.vectors, b.vectors, atol=1e-5, rtol=0)

    def test_gradients(self):
        head = seeded_head(SddhConfig(K=3, M=4, dim=4), seed=5, offset_scale=0.2)
        g = torch.Generator().manual_seed(6)
        feat = torch.randn(4, 9, 9, generator=g)
        pts = torch.tensor([[3.3, 4.6], [5.2, 4.4]])
        w = torch.randn(2, 4, generator=g)
        assert grad_check(lambda f: (sddh_extract(f, pts, head).vectors * w).sum(), feat) < 1e-4
        assert grad_check(lambda p: (sddh_extract(feat, p, head).vectors * w).sum(), pts) < 1e-4

    def test_weight_gradient(self):
        head = seeded_head(SddhConfig(K=3, M=4, dim=4), seed=7)
        feat = torch.randn(4, 9, 9)
        pts = torch.tensor([[3.3, 4.6]])

        def f(wm):
            with torch.no_grad():
                head.conv_m_w.copy_(wm)
            return sddh_extract(feat, pts, head).vectors[0, 0]

        w0 = head.conv_m_w.detach().clone()
        (head.conv_m_w).requires_grad_(True)
        d = sddh_extract(feat, pts, head).vectors[0, 0]
        (g,) = torch.autograd.grad(d, head.conv_m_w)
        eps = 1e-6
        for idx in [(0, 0, 0), (2, 1, 3), (3, 3, 2)]:
            wp, wm = w0.clone(), w0.clone()
            wp[idx] += eps
            wm[idx] -= eps
            with torch.no_grad():
                fd = (f(wp) - f(wm)).item() / (2 * eps)
            assert abs(fd - g[idx].item()) < 1e-6


class TestDmh:
    def test_constant_feature_gives_constant_interior(self):
        torch.manual_seed(0)
        head = DMH(4, 6, 3)
        dense, _ = dmh_extract(torch.full((4, 9, 9), 0.7), torch.zeros(0, 2), head)
        inner = dense[:, 1:-1, 1:-1]
        torch.testing.assert_close(inner, inner[:, :1, :1].expand_as(inner))

    def test_integer_keypoint_reads_map(self):
        torch.manual_seed(1)
        head = DMH(4, 6, 3)
        feat = torch.randn(4, 8, 8)
        dense, ds = dmh_extract(feat, torch.tensor([[3.0, 5.0]]), head)
        torch.testing.assert_close(ds.vectors[0], F.normalize(dense[:, 5, 3], dim=0))

    def test_loop_oracle(self):
        torch.manual_seed(2)
        head = DMH(3, 4, 3)
        feat = torch.randn(3, 5, 6)
        dense, _ = dmh_extract(feat, torch.zeros(0, 2), head)
        x = F.selu(torch.einsum("oc,chw->ohw", head.conv1_w[:, :, 0, 0], feat) + head.conv1_b[:, None, None])
        xp = F.pad(x, (1, 1, 1, 1))
        for i in range(5):
            for j in range(6):
                v = head.conv_b.clone()
                for u in range(3):
                    for w in range(3):
                        v = v + head.conv_w[:, :, u, w] @ xp[:, i + u, j + w]
                torch.testing.assert_close(dense[:, i, j], v)


class TestGridEquivalence:
    @pytest.mark.parametrize("K", [3, 5])
    def test_sddh_equals_dmh(self, K):
        torch.manual_seed(K)
        c = 6
        dmh = DMH(c, 8, K)
        sddh = SDDH.equivalent_to(dmh)
        assert sddh.cfg.M == K * K
        feat = torch.randn(c, 20, 24)
        g = torch.Generator().manual_seed(0)
        m = K // 2
        pts = torch.stack([torch.randint(m, 24 - m, (120,), generator=g),
                           torch.randint(m, 20 - m, (120,), generator=g)], 1).double()
        _, ref = dmh_extract(feat, pts, dmh)
        out = sddh_extract(feat, pts, sddh)
        assert (out.vectors - ref.vectors).abs().max() < 1e-5


class TestSparseHeads:
    @pytest.mark.parametrize("kind", ["sdh1", "sdh2", "sdh3"])
    def test_shapes_and_norm(self, kind):
        torch.manual_seed(0)
        head = SparseDescriptorHead(kind, 6, 8)
        ds = head(torch.randn(6, 12, 12), torch.tensor([[5.0, 5.0], [0.0, 0.0], [7.5, 6.25]]))
        assert ds.vectors.shape[1] == 8
        torch.testing.assert_close(ds.vectors.norm(dim=1), torch.ones(len(ds)))
        if kind != "sdh1":
            assert 1 in ds.dropped

    def test_unknown(self):
        with pytest.raises(ValueError):
            SparseDescriptorHead("sdh9", 4, 4)


class TestDescriptorFile:
    def sample(self, n=7, dim=8):
        rng = np.random.default_rng(0)
        return DescriptorFile(rng.uniform(0, 100, (n, 2)), rng.random(n),
                              rng.normal(size=(n, dim)).astype(np.float32), "N", 16, 3, (5, 0))

    def test_round_trip(self, tmp_path):
        f = self.sample()
        write_descriptor_file(tmp_path / "a.desc", f)
        g = read_descriptor_file(tmp_path / "a.desc")
        np.testing.assert_array_equal(g.positions, f.positions)
        np.testing.assert_array_equal(g.scores, f.scores)
        np.testing.assert_array_equal(g.descriptors, f.descriptors)
        assert (g.variant, g.M, g.K, g.pad) == ("N", 16, 3, (5, 0))

    def test_layout(self, tmp_path):
        f = self.sample(n=3, dim=4)
        write_descriptor_file(tmp_path / "a.desc", f)
        raw = (tmp_path / "a.desc").read_bytes()
        assert raw[:8] == MAGIC
        assert len(raw) == 8 + 32 + 3 * (24 + 16)
        assert np.frombuffer(raw[40:48], "<f8")[0] == f.positions[0, 0]

    def test_empty(self, tmp_path):
        f = DescriptorFile(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 8), np.float32), "T", 16, 3)
        write_descriptor_file(tmp_path / "e.desc", f)
        g = read_descriptor_file(tmp_path / "e.desc")
        assert g.descriptors.shape == (0, 8)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTDESC!" + bytes(40))
        with pytest.raises(ValueError):
            read_descriptor_file(tmp_path / "x")

    def test_truncated(self, tmp_path):
        write_descriptor_file(tmp_path / "a.desc", self.sample())
        raw = (tmp_path / "a.desc").read_bytes()
        (tmp_path / "b.desc").write_bytes(raw[:-3])
        with pytest.raises(ValueError):
            read_descriptor_file(tmp_path / "b.desc")
