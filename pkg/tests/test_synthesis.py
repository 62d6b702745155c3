import numpy as np
import pytest

from fmba.errors import DegenerateProblemError
from fmba.geometry import CameraIntrinsics, SE3Pose, Twist, se3_exp
from fmba.raster import DepthMap, Raster
from fmba.synthdata import default_scene, make_sequence, relative_pose
from fmba.synthesis import (
    LossWeights,
    WarpedView,
    loss_match,
    loss_photo,
    loss_smooth,
    ssim,
    synthesize_view,
    total_loss,
)

from test_ba import smooth_field

SSIM_C1_VAL = 0.01 ** 2


class TestSynthesizeView:
    def test_identity_pose_reproduces_source(self):
        rng = np.random.default_rng(0)
        src = Raster(smooth_field(rng, 1, 8, 8))
        depth = DepthMap(np.full((8, 8), 5.0))
        K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5)
        wv = synthesize_view(src, depth, SE3Pose.identity(), K)
        assert wv.mask.all()
        assert np.allclose(wv.image, src.data, atol=1e-12)

    def test_ground_truth_warp_below_interpolation_bound(self):
        seq = make_sequence(default_scene())
        K = seq.intrinsics
        tgt = seq.images[seq.target_index]
        depth = seq.depths[seq.target_index]
        for src_idx in seq.source_indices:
            T = relative_pose(seq, src_idx)
            wv = synthesize_view(seq.images[src_idx], depth, T, K)
            err = np.abs(wv.image - tgt.data)[:, wv.mask]
            assert err.mean() < 1e-3

    def test_huge_translation_yields_empty_mask(self):
        rng = np.random.default_rng(1)
        src = Raster(smooth_field(rng, 1, 8, 8))
        depth = DepthMap(np.full((8, 8), 5.0))
        K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5)
        T = SE3Pose(np.eye(3), np.array([500.0, 0.0, 0.0]))
        wv = synthesize_view(src, depth, T, K)
        assert wv.n_valid == 0
        assert np.all(wv.image == 0.0)


class TestLossPhoto:
    def test_perfect_reconstruction_is_zero(self):
        rng = np.random.default_rng(2)
        tgt = Raster(smooth_field(rng, 1, 6, 6))
        wv = WarpedView(tgt.data.copy(), np.ones((6, 6), bool))
        assert loss_photo(tgt, [wv]) == 0.0

    def test_constant_difference(self):
        tgt = Raster(np.full((1, 4, 4), 0.5))
        wv = WarpedView(np.full((1, 4, 4), 0.25), np.ones((4, 4), bool))
        assert loss_photo(tgt, [wv]) == pytest.approx(0.25)

    def test_two_identical_views_double_the_loss(self):
        tgt = Raster(np.full((1, 4, 4), 0.5))
        wv = WarpedView(np.full((1, 4, 4), 0.25), np.ones((4, 4), bool))
        assert loss_photo(tgt, [wv, wv]) == pytest.approx(0.5)

    def test_empty_mask_degenerate(self):
        tgt = Raster(np.full((1, 4, 4), 0.5))
        wv = WarpedView(np.zeros((1, 4, 4)), np.zeros((4, 4), bool))
        with pytest.raises(DegenerateProblemError):
            loss_photo(tgt, [wv])


class TestLossSmooth:
    def test_constant_depth_is_zero(self):
        rng = np.random.default_rng(3)
        img = smooth_field(rng, 1, 6, 6)
        assert loss_smooth(np.full((6, 6), 7.0), img) == 0.0

    def test_edges_downweight_depth_gradients(self):
        # Same depth ramp scores lower against an image whose strong edges
        # line up with the depth variation.
        ys, xs = np.mgrid[0:4, 0:4].astype(float)
        depth = 5.0 + xs
        flat_img = np.full((1, 4, 4), 0.5)
        edged = np.tile((xs % 2)[None], (1, 1, 1)) * 0.9
        assert loss_smooth(depth, flat_img) > loss_smooth(depth, edged)

    def test_scale_invariance_with_normalization(self):
        rng = np.random.default_rng(4)
        depth = 5.0 + rng.uniform(0, 1, (6, 6))
        img = smooth_field(rng, 1, 6, 6)
        a = loss_smooth(depth, img)
        b = loss_smooth(depth * 37.0, img)
        assert a == pytest.approx(b, rel=1e-12)

    def test_raw_mode_not_scale_invariant(self):
        rng = np.random.default_rng(5)
        depth = 5.0 + rng.uniform(0, 1, (6, 6))
        img = smooth_field(rng, 1, 6, 6)
        assert loss_smooth(2 * depth, img, normalize=False) == pytest.approx(
            2 * loss_smooth(depth, img, normalize=False), rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(6)
        depth = 5.0 + rng.uniform(0, 1, (6, 6))
        img = smooth_field(rng, 2, 6, 6)
        _, grad = loss_smooth(depth, img, want_grad=True)
        h = 1e-6
        for _ in range(5):
            d = rng.standard_normal(depth.shape)
            fd = (loss_smooth(depth + h * d, img)
                  - loss_smooth(depth - h * d, img)) / (2 * h)
            assert np.sum(grad * d) == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestSSIM:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(7)
        x = smooth_field(rng, 2, 8, 8)
        assert np.allclose(ssim(x, x), 1.0, atol=1e-12)

    def test_constant_images_closed_form(self):
        x = np.full((1, 6, 6), 0.2)
        y = np.full((1, 6, 6), 0.8)
        expected = (2 * 0.2 * 0.8 + SSIM_C1_VAL) / (0.04 + 0.64 + SSIM_C1_VAL)
        s = ssim(x, y)
        assert np.allclose(s, expected, atol=1e-12)
        assert expected == pytest.approx(0.4707, abs=1e-4)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            x = rng.uniform(0, 1, (1, 8, 8))
            y = rng.uniform(0, 1, (1, 8, 8))
            s = ssim(x, y)
            assert s.min() >= -1.0 and s.max() <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((1, 4, 4)), np.zeros((1, 5, 4)))


class TestLossMatch:
    def test_perfect_reconstruction_zero(self):
        rng = np.random.default_rng(9)
        tgt = Raster(smooth_field(rng, 1, 8, 8))
        wv = WarpedView(tgt.data.copy(), np.ones((8, 8), bool))
        assert loss_match(tgt, [wv], alpha=0.85) == pytest.approx(0.0, abs=1e-12)

    def test_alpha_zero_equals_photo(self):
        rng = np.random.default_rng(10)
        tgt = Raster(smooth_field(rng, 2, 8, 8))
        wv = WarpedView(smooth_field(rng, 2, 8, 8), np.ones((8, 8), bool))
        assert loss_match(tgt, [wv], alpha=0.0) == pytest.approx(
            loss_photo(tgt, [wv]), rel=1e-12)

    def test_alpha_one_equals_ssim_term(self):
        rng = np.random.default_rng(11)
        tgt = Raster(smooth_field(rng, 2, 8, 8))
        w = smooth_field(rng, 2, 8, 8)
        wv = WarpedView(w, np.ones((8, 8), bool))
        s = ssim(tgt.data, w)
        expected = np.mean((1.0 - s) / 2.0)
        assert loss_match(tgt, [wv], alpha=1.0) == pytest.approx(expected,
                                                                 rel=1e-12)

    def test_warped_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        tgt = Raster(smooth_field(rng, 1, 8, 8))
        w = smooth_field(rng, 1, 8, 8)
        mask = np.ones((8, 8), bool)
        mask[0, :] = False
        wv = WarpedView(w * mask, mask)
        _, grads = loss_match(tgt, [wv], alpha=0.85, want_grads=True)
        h = 1e-6
        for _ in range(5):
            d = rng.standard_normal(w.shape) * mask
            vp = loss_match(tgt, [WarpedView((w + h * d) * mask, mask)], 0.85)
            vm = loss_match(tgt, [WarpedView((w - h * d) * mask, mask)], 0.85)
            fd = (vp - vm) / (2 * h)
            assert np.sum(grads[0] * d) == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestTotalLoss:
    def make_case(self, seed=13, perturb=False):
        seq = make_sequence(default_scene(seed))
        poses = [relative_pose(seq, i) for i in seq.source_indices]
        sources = [seq.images[i] for i in seq.source_indices]
        depth = seq.depths[seq.target_index]
        if perturb:
            # Move away from the ground truth so residuals sit clear of the
            # L1 kinks that would corrupt finite differences.
            rng = np.random.default_rng(seed + 1)
            depth = DepthMap(depth.data
                             * (1.0 + 0.05 * rng.uniform(-1, 1, depth.data.shape)))
            noisy = []
            for T in poses:
                d = rng.uniform(-0.03, 0.03, 6)
                P = se3_exp(Twist(d[:3], d[3:]))
                noisy.append(SE3Pose(P.R @ T.R, P.R @ T.t + P.t))
            poses = noisy
        return (depth, poses, seq.images[seq.target_index], sources,
                seq.intrinsics)

    def test_perfect_reconstruction_constant_depth_zero(self):
        rng = np.random.default_rng(14)
        img = Raster(smooth_field(rng, 1, 16, 16))
        depth = DepthMap(np.full((16, 16), 5.0))
        K = CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
        out = total_loss(depth, [SE3Pose.identity()], img, [img], K)
        assert out.total == pytest.approx(0.0, abs=1e-12)

    def test_smoothness_weight_halves_at_double_ratio(self):
        w = LossWeights()
        assert w.smooth_weight(2) == pytest.approx(2 * w.smooth_weight(4))
        assert w.smooth_weight(1) == pytest.approx(0.1)

    def test_report_structure(self):
        depth, poses, tgt, sources, K = self.make_case()
        out = total_loss(depth, poses, tgt, sources, K)
        assert set(out.parts) == {"l_photo", "l_smooth", "l_match", "l_total",
                                  "per_scale"}
        assert len(out.parts["per_scale"]) == 3
        assert out.total == pytest.approx(
            sum(p["l_total"] for p in out.parts["per_scale"]))

    def test_depth_gradient_matches_fd(self):
        depth, poses, tgt, sources, K = self.make_case(perturb=True)
        rng = np.random.default_rng(15)
        out = total_loss(depth, poses, tgt, sources, K)
        h = 1e-5
        for _ in range(4):
            d = rng.standard_normal(depth.data.shape)
            vp = total_loss(DepthMap(depth.data + h * d), poses, tgt,
                            sources, K).total
            vm = total_loss(DepthMap(depth.data - h * d), poses, tgt,
                            sources, K).total
            fd = (vp - vm) / (2 * h)
            assert abs(np.sum(out.depth_grad * d) - fd) <= 1e-3 * max(abs(fd), 1e-6)

    def test_pose_gradient_matches_fd(self):
        depth, poses, tgt, sources, K = self.make_case(perturb=True)
        d0 = depth
        out = total_loss(d0, poses, tgt, sources, K)
        h = 1e-6
        for i in range(len(poses)):
            for k in range(6):
                dxi = np.zeros(6)
                dxi[k] = h
                P = se3_exp(Twist(dxi[:3], dxi[3:]))
                M = se3_exp(Twist(-dxi[:3], -dxi[3:]))
                pp = list(poses)
                pp[i] = SE3Pose(P.R @ poses[i].R, P.R @ poses[i].t + P.t)
                pm = list(poses)
                pm[i] = SE3Pose(M.R @ poses[i].R, M.R @ poses[i].t + M.t)
                fd = (total_loss(d0, pp, tgt, sources, K).total
                      - total_loss(d0, pm, tgt, sources, K).total) / (2 * h)
                # Pair the matrix gradient with the left-twist direction.
                T = poses[i]
                dR = P.R @ T.R - M.R @ T.R
                dt = (P.R @ T.t + P.t) - (M.R @ T.t + M.t)
                directional = (np.sum(out.pose_r_grad[i] * dR)
                               + out.pose_t_grad[i] @ dt) / (2 * h)
                assert abs(directional - fd) <= 1e-3 * max(abs(fd), 1e-6)

    def test_degenerate_propagates(self):
        rng = np.random.default_rng(17)
        img = Raster(smooth_field(rng, 1, 16, 16))
        depth = DepthMap(np.full((16, 16), 5.0))
        K = CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
        T = SE3Pose(np.eye(3), np.array([1e4, 0.0, 0.0]))
        with pytest.raises(DegenerateProblemError):
            total_loss(depth, [T], img, [img], K)
