import numpy as np
import pytest

from fmba.ba import (
    BAState,
    DampingMLP,
    JacobianBlocks,
    ResidualVector,
    ViewSet,
    apply_update,
    ba_solve,
    feature_residual,
    level_intrinsics,
    lm_step,
    load_mlp,
    photometric_residual,
    predict_lambda,
    residual_jacobian,
    save_mlp,
)
from fmba.errors import DegenerateProblemError
from fmba.features import FeaturePyramid
from fmba.geometry import CameraIntrinsics, Twist, se3_exp
from fmba.raster import DepthMap
from fmba.synthdata import fixed_point_scene, make_sequence


def smooth_field(rng, c, h, w, roughness=3.0):
    """Band-limited random field so bilinear sampling is well behaved."""
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros((c, h, w))
    for ci in range(c):
        for _ in range(6):
            kx, ky = rng.uniform(-roughness, roughness, 2) / max(h, w)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.25)
            out[ci] += amp * np.cos(2 * np.pi * (kx * xs + ky * ys) + phase)
    return out + 0.5


def make_pyramid(rng, c, h, w):
    return FeaturePyramid(tuple(smooth_field(rng, c, h // f, w // f)
                                for f in (2, 4, 8)))


def make_problem(rng, h=8, w=8, c=4, n_views=1, twist_scale=0.01):
    K = CameraIntrinsics(float(w), float(w), (w - 1) / 2.0, (h - 1) / 2.0)
    target = make_pyramid(rng, c, h, w)
    sources = tuple(make_pyramid(rng, c, h, w) for _ in range(n_views))
    views = ViewSet(target, sources)
    depth = DepthMap(5.0 + rng.uniform(-0.5, 0.5, (h, w)))
    twists = rng.uniform(-twist_scale, twist_scale, (n_views, 6))
    state = BAState(depth, twists)
    return state, views, K


class TestResidual:
    def test_identical_views_identity_pose_zero(self):
        rng = np.random.default_rng(0)
        pyr = make_pyramid(rng, 4, 8, 8)
        views = ViewSet(pyr, (pyr,))
        state = BAState(DepthMap(np.full((8, 8), 5.0)), np.zeros((1, 6)))
        K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5)
        for level in (1, 2, 3):
            res = feature_residual(state, views, K, level)
            assert res.mask.all()
            assert np.allclose(res.values, 0.0, atol=1e-12)

    def test_one_pixel_shift_construction(self):
        # Source features shifted one level pixel, pose chosen so the
        # projection shifts by exactly one level pixel: zero residual where
        # the shifted content is defined.
        rng = np.random.default_rng(1)
        h = w = 16
        z = 2.0
        K = CameraIntrinsics(16.0, 16.0, (w - 1) / 2.0, (h - 1) / 2.0)
        target = make_pyramid(rng, 3, h, w)
        shifted = tuple(np.roll(lvl, 1, axis=2) for lvl in target.levels)
        views = ViewSet(target, (FeaturePyramid(shifted),))
        # Level-1 shift of one pixel: fx_l * tx / z = 1 with fx_l = 8.
        tx = z / 8.0
        state = BAState(DepthMap(np.full((h, w), z)),
                        np.array([[0, 0, 0, tx, 0, 0.0]]))
        res = feature_residual(state, views, K, 1)
        interior = res.mask[0] & (np.arange(w // 2)[None, :] < w // 2 - 1)
        assert np.abs(res.values[0][:, interior]).max() < 1e-10

    def test_photometric_equals_feature_on_images(self):
        from fmba.raster import Raster
        rng = np.random.default_rng(2)
        img_t = Raster(smooth_field(rng, 1, 16, 16))
        img_s = Raster(smooth_field(rng, 1, 16, 16))
        state = BAState(DepthMap(np.full((16, 16), 4.0)),
                        np.array([[0.002, -0.001, 0.0, 0.05, 0.0, 0.01]]))
        K = CameraIntrinsics(16.0, 16.0, 7.5, 7.5)
        a = photometric_residual(state, img_t, [img_s], K, 2)
        b = feature_residual(state, ViewSet.from_images(img_t, [img_s]), K, 2)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.mask, b.mask)

    def test_all_masked_raises(self):
        rng = np.random.default_rng(3)
        state, views, K = make_problem(rng)
        # Huge translation pushes every projection far out of frame.
        state = BAState(state.depth, np.array([[0, 0, 0, 500.0, 0, 0.0]]))
        with pytest.raises(DegenerateProblemError):
            feature_residual(state, views, K, 1)

    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(4)
        state, views, K = make_problem(rng, twist_scale=0.0)
        state = BAState(state.depth, np.array([[0, 0, 0, 2.0, 0, 0.0]]))
        res = feature_residual(state, views, K, 1)
        assert not res.mask.all()
        assert np.all(res.values[:, :, ~res.mask[0]] == 0.0)


class TestJacobian:
    def test_constant_features_zero_jacobian(self):
        rng = np.random.default_rng(5)
        lvl = tuple(np.full((2, 8 // f, 8 // f), 0.3) for f in (2, 4, 8))
        pyr = FeaturePyramid(lvl)
        views = ViewSet(pyr, (pyr,))
        state = BAState(DepthMap(np.full((8, 8), 5.0)),
                        np.array([[0.001, 0, 0, 0.05, 0, 0]]))
        K = CameraIntrinsics(8.0, 8.0, 3.5, 3.5)
        jac = residual_jacobian(state, views, K, 1)
        assert np.allclose(jac.jd, 0.0)
        assert np.allclose(jac.jxi, 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        state, views, K = make_problem(rng, twist_scale=0.02)
        level = 1
        factor = 2 ** level
        jac = residual_jacobian(state, views, K, level)
        res0 = feature_residual(state, views, K, level)
        h = 1e-5

        # Depth block: bump one full-resolution block to move one level pixel.
        for (py, px) in [(1, 1), (2, 3), (0, 2)]:
            d = state.depth.data.copy()
            d[py * factor:(py + 1) * factor, px * factor:(px + 1) * factor] += h
            rp = feature_residual(BAState(DepthMap(d), state.twists), views, K, level)
            d = state.depth.data.copy()
            d[py * factor:(py + 1) * factor, px * factor:(px + 1) * factor] -= h
            rm = feature_residual(BAState(DepthMap(d), state.twists), views, K, level)
            fd = (rp.values[0, :, py, px] - rm.values[0, :, py, px]) / (2 * h)
            assert np.allclose(jac.jd[0, :, py, px], fd, rtol=1e-4, atol=1e-7)

        # Pose block via left-multiplied twist perturbations.
        base = se3_exp(Twist(state.twists[0, :3], state.twists[0, 3:]))
        for k in range(6):
            dxi = np.zeros(6)
            dxi[k] = h

            def perturbed(sign):
                from fmba.geometry import compose, se3_log
                P = se3_exp(Twist(sign * dxi[:3], sign * dxi[3:]))
                T = compose(P, base)
                tw = se3_log(T).as_array()
                return feature_residual(BAState(state.depth, tw[None]),
                                        views, K, level)

            rp, rm = perturbed(+1.0), perturbed(-1.0)
            fd = (rp.values - rm.values) / (2 * h)
            scale = max(np.abs(fd).max(), 1e-6)
            assert np.abs(jac.jxi[0, :, :, :, k] - fd[0]).max() < 1e-4 * scale

    def test_depth_block_structural_sparsity(self):
        # Each residual involves exactly its own pixel's depth; bumping one
        # level pixel leaves every other pixel's residual untouched.
        rng = np.random.default_rng(7)
        state, views, K = make_problem(rng, twist_scale=0.02)
        level, factor = 1, 2
        res0 = feature_residual(state, views, K, level)
        d = state.depth.data.copy()
        d[0:factor, 0:factor] += 0.05
        res1 = feature_residual(BAState(DepthMap(d), state.twists), views, K, level)
        diff = np.abs(res1.values - res0.values)[0]
        assert diff[:, 0, 0].max() > 0
        mask_other = np.ones(diff.shape[1:], dtype=bool)
        mask_other[0, 0] = False
        assert diff[:, mask_other].max() == 0.0


class TestDampingMLP:
    def test_zero_residual_zero_bias_gives_zero(self):
        mlp = DampingMLP.seeded(4, seed=0)
        mlp = DampingMLP(mlp.w1, mlp.b1, mlp.w2, mlp.b2, mlp.w3,
                         np.zeros(1), seed=0)
        res = ResidualVector(np.zeros((1, 4, 4, 4)), np.ones((1, 4, 4), bool), 1)
        assert predict_lambda(res, mlp) == 0.0

    def test_nonnegative_for_any_weights(self):
        rng = np.random.default_rng(8)
        for seed in range(20):
            mlp = DampingMLP.seeded(4, seed=seed)
            mlp = DampingMLP(*[p + rng.standard_normal(p.shape)
                               for p in mlp.params()], seed=seed)
            res = ResidualVector(rng.standard_normal((2, 4, 4, 4)),
                                 np.ones((2, 4, 4), bool), 1)
            assert predict_lambda(res, mlp) >= 0.0

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        values = rng.standard_normal((1, 4, 4, 4))
        res = ResidualVector(values, np.ones((1, 4, 4), bool), 1)
        mlp = DampingMLP.seeded(4, seed=3)
        assert predict_lambda(res, mlp) == predict_lambda(res, mlp)

    def test_gap_excludes_masked(self):
        values = np.zeros((1, 2, 2, 2))
        mask = np.zeros((1, 2, 2), bool)
        mask[0, 0, 0] = True
        values[0, :, 0, 0] = [1.0, -2.0]
        values *= mask[:, None]
        res = ResidualVector(values, mask, 1)
        mlp = DampingMLP.seeded(2, seed=0)
        pooled_expected = np.array([1.0, -2.0])  # mean over the single valid slot
        assert predict_lambda(res, mlp) == pytest.approx(
            mlp.forward(pooled_expected))

    def test_seeded_initial_lambda_near_one(self):
        mlp = DampingMLP.seeded(16, seed=0)
        assert mlp.forward(np.zeros(16)) == pytest.approx(1.0)

    def test_weights_roundtrip(self, tmp_path):
        mlp = DampingMLP.seeded(8, seed=5)
        save_mlp(tmp_path / "m.bin", tmp_path / "m.json", mlp)
        back = load_mlp(tmp_path / "m.bin", tmp_path / "m.json")
        for a, b in zip(mlp.params(), back.params()):
            assert np.allclose(a.astype(np.float32), b)


def dense_oracle(res, jac, lam):
    """Assemble the full damped normal system and solve it densely."""
    from fmba.ba import DIAG_CLAMP, DIAG_RMS_FRACTION
    n, c, h, w = res.values.shape
    nd = h * w
    rows = []
    rhs_rows = []
    for i in range(n):
        for ci in range(c):
            for yy in range(h):
                for xx in range(w):
                    row = np.zeros(nd + 6 * n)
                    row[yy * w + xx] = jac.jd[i, ci, yy, xx]
                    row[nd + 6 * i:nd + 6 * (i + 1)] = jac.jxi[i, ci, yy, xx]
                    rows.append(row)
                    rhs_rows.append(res.values[i, ci, yy, xx])
    J = np.array(rows)
    E = np.array(rhs_rows)
    H = J.T @ J
    diag = np.diag(H)
    floor_d = max(DIAG_CLAMP ** 2, DIAG_RMS_FRACTION ** 2 * diag[:nd].mean())
    floor_p = max(DIAG_CLAMP ** 2, DIAG_RMS_FRACTION ** 2 * diag[nd:].mean())
    D2 = np.maximum(diag, np.concatenate([np.full(nd, floor_d),
                                          np.full(6 * n, floor_p)]))
    A = H + lam * np.diag(D2)
    return np.linalg.solve(A, -J.T @ E)


class TestLMStep:
    def test_matches_dense_solver(self):
        rng = np.random.default_rng(10)
        state, views, K = make_problem(rng, h=8, w=8, c=3, n_views=2,
                                       twist_scale=0.02)
        res = feature_residual(state, views, K, 1)
        jac = residual_jacobian(state, views, K, 1)
        for lam in (0.3, 1.0, 17.0):
            step = lm_step(res, jac, lam)
            assert not step.stalled
            oracle = dense_oracle(res, jac, lam)
            nd = 16
            assert np.allclose(step.delta_depth.ravel(), oracle[:nd], atol=1e-8)
            assert np.allclose(step.delta_twists.ravel(), oracle[nd:], atol=1e-8)

    def test_affine_toy_single_gn_step_exact(self):
        # E affine in S with lam = 0: one step reaches the exact minimizer,
        # verified against the closed-form normal equations.
        rng = np.random.default_rng(11)
        n, c, h, w = 1, 5, 4, 4
        jd = rng.standard_normal((n, c, h, w))
        jxi = rng.standard_normal((n, c, h, w, 6))
        delta_true_d = rng.standard_normal((h, w)) * 0.1
        delta_true_p = rng.standard_normal((n, 6)) * 0.1
        e0 = -(jd * delta_true_d[None, None]
               + np.einsum("ichwk,ik->ichw", jxi, delta_true_p))
        res = ResidualVector(e0, np.ones((n, h, w), bool), 1)
        jac = JacobianBlocks(jd, jxi, 1)
        step = lm_step(res, jac, 0.0)
        assert np.allclose(step.delta_depth, delta_true_d, atol=1e-9)
        assert np.allclose(step.delta_twists, delta_true_p, atol=1e-9)

    def test_huge_damping_freezes_step(self):
        rng = np.random.default_rng(12)
        state, views, K = make_problem(rng, twist_scale=0.05)
        res = feature_residual(state, views, K, 1)
        jac = residual_jacobian(state, views, K, 1)
        step = lm_step(res, jac, 1e12)
        assert step.norm() < 1e-9

    def test_negative_lambda_rejected(self):
        rng = np.random.default_rng(13)
        state, views, K = make_problem(rng)
        res = feature_residual(state, views, K, 1)
        jac = residual_jacobian(state, views, K, 1)
        with pytest.raises(ValueError):
            lm_step(res, jac, -0.1)

    def test_singular_system_stalls(self):
        n, c, h, w = 1, 2, 4, 4
        res = ResidualVector(np.ones((n, c, h, w)), np.ones((n, h, w), bool), 1)
        jac = JacobianBlocks(np.zeros((n, c, h, w)), np.zeros((n, c, h, w, 6)), 1)
        step = lm_step(res, jac, 0.0)
        assert step.stalled
        assert step.norm() == 0.0


class TestApplyUpdate:
    def test_zero_delta_is_identity(self):
        rng = np.random.default_rng(14)
        state, _, _ = make_problem(rng)
        from fmba.ba import LMStep
        step = LMStep(np.zeros((4, 4)), np.zeros((1, 6)), 1)
        out = apply_update(state, step)
        assert np.allclose(out.depth.data, state.depth.data)
        assert np.allclose(out.twists, state.twists, atol=1e-12)

    def test_depth_clamped_at_floor(self):
        from fmba.ba import LMStep
        state = BAState(DepthMap(np.full((4, 4), 0.5)), np.zeros((1, 6)))
        step = LMStep(np.full((2, 2), -1.5), np.zeros((1, 6)), 1)
        out = apply_update(state, step)
        assert np.allclose(out.depth.data, 1e-3)

    def test_pose_update_roundtrip(self):
        from fmba.ba import LMStep
        rng = np.random.default_rng(15)
        state, _, _ = make_problem(rng, twist_scale=0.3)
        dxi = rng.uniform(-0.2, 0.2, (1, 6))
        fwd = apply_update(state, LMStep(np.zeros((4, 4)), dxi, 1))
        back = apply_update(fwd, LMStep(np.zeros((4, 4)), -dxi, 1))
        assert np.allclose(back.twists, state.twists, atol=1e-9)


class TestBASolve:
    def test_trace_has_18_records_and_nonnegative_lambda(self):
        rng = np.random.default_rng(16)
        state, views, K = make_problem(rng, h=32, w=32, c=4, n_views=2,
                                       twist_scale=0.01)
        mlp = DampingMLP.seeded(4, seed=1)
        final, trace = ba_solve(state, views, K, mlp)
        assert len(trace) == 18
        assert [r.level for r in trace.records] == [3] * 6 + [2] * 6 + [1] * 6
        assert np.all(trace.lambdas() >= 0.0)

    def test_deterministic(self):
        rng = np.random.default_rng(17)
        state, views, K = make_problem(rng, h=32, w=32, c=4, twist_scale=0.01)
        mlp = DampingMLP.seeded(4, seed=2)
        f1, t1 = ba_solve(state, views, K, mlp)
        f2, t2 = ba_solve(state, views, K, mlp)
        assert np.array_equal(f1.depth.data, f2.depth.data)
        assert np.array_equal(f1.twists, f2.twists)
        assert np.array_equal(t1.lambdas(), t2.lambdas())

    def test_ground_truth_exact_fixed_point(self):
        # Photometric pyramids on the integer-shift scene: residual is exactly
        # zero at ground truth, so the solver must not move at all.
        seq = make_sequence(fixed_point_scene())
        views = ViewSet.from_images(seq.images[seq.target_index],
                                    [seq.images[i] for i in seq.source_indices])
        gt_twists = np.stack([seq.twists[i] for i in seq.source_indices])
        init = BAState(seq.depths[seq.target_index], gt_twists)
        mlp = DampingMLP.seeded(1, seed=0)
        final, trace = ba_solve(init, views, seq.intrinsics, mlp)
        assert len(trace) == 18
        move_pose = np.linalg.norm(final.twists - gt_twists)
        move_depth = np.abs(final.depth.data / init.depth.data - 1.0)
        assert move_pose < 1e-10
        assert np.median(move_depth) < 1e-10

    def test_custom_schedule(self):
        rng = np.random.default_rng(18)
        state, views, K = make_problem(rng, twist_scale=0.005)
        mlp = DampingMLP.seeded(4, seed=3)
        _, trace = ba_solve(state, views, K, mlp, schedule=((2, 2), (1, 3)))
        assert len(trace) == 5
        assert [r.level for r in trace.records] == [2, 2, 1, 1, 1]

    def test_mlp_channel_mismatch_rejected(self):
        rng = np.random.default_rng(19)
        state, views, K = make_problem(rng)
        with pytest.raises(ValueError):
            ba_solve(state, views, K, DampingMLP.seeded(7, seed=0))

    def test_trace_jsonl_dump(self, tmp_path):
        import json
        rng = np.random.default_rng(20)
        state, views, K = make_problem(rng, twist_scale=0.005)
        mlp = DampingMLP.seeded(4, seed=4)
        _, trace = ba_solve(state, views, K, mlp, schedule=((1, 2),))
        path = tmp_path / "trace.jsonl"
        trace.dump_jsonl(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert set(rec) == {"level", "iter", "lambda", "residual_l2",
                            "masked_fraction", "step_norm"}
