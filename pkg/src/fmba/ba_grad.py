"""Reverse-mode differentiation through the unrolled LM solve.

The forward trace stores a state snapshot per iteration; this module replays
each iteration from its snapshot and applies hand-written vector-Jacobian
products in reverse, including the damping-MLP path (lambda depends on the
pooled residual, which depends on the features) and the Schur-complement
linear solve (differentiated through the factored system).

Pose gradients flow as raw (R, t) matrix pairings between iterations; the
boundary conversions to twist coordinates happen once at the initial state
via the closed-form VJP of the exponential map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ba import (
    BEHIND_EPS,
    DIAG_CLAMP,
    DIAG_RMS_FRACTION,
    DampingMLP,
    SolveTrace,
    _damping_floors,
    _iter_forward,
)
from .geometry import se3_exp_vjp
from .raster import _sample_indices, block_mean_vjp, block_sum


@dataclass
class StateGrad:
    """Gradient of a scalar with respect to a solver state.

    Pose gradients pair with the raw rotation/translation entries of the
    relative poses (target -> source); depth pairs with the full-resolution
    depth map.
    """

    depth: np.ndarray     # (H, W)
    pose_r: np.ndarray    # (N, 3, 3)
    pose_t: np.ndarray    # (N, 3)

    @classmethod
    def zeros(cls, depth_shape, n_views):
        return cls(np.zeros(depth_shape), np.zeros((n_views, 3, 3)),
                   np.zeros((n_views, 3)))


@dataclass
class MLPGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def zeros_like(cls, mlp: DampingMLP):
        return cls(*[np.zeros_like(p) for p in mlp.params()])

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def flatten(self):
        return np.concatenate([p.ravel() for p in self.params()])


@dataclass
class BAGradients:
    """Output of ba_backward."""

    depth_init: np.ndarray      # (H, W)
    twists_init: np.ndarray     # (N, 6)
    target_levels: list         # 3 arrays (C, h, w), gradient wrt target pyramid
    source_levels: list         # per source view, 3 arrays
    mlp: MLPGrads


def _sample_vjp(feat, px, py, val_bar, gfx_bar, gfy_bar, cells_out):
    """VJP of sample_many_with_grad for one view.

    Accumulates raster-cell gradients into cells_out and returns position
    gradients (px_bar, py_bar). All *_bar inputs must already be masked.
    """
    H, W = feat.shape[-2:]
    x0, y0, x1, y1, fx, fy, _ = _sample_indices((H, W), px, py)
    v00 = feat[:, y0, x0]
    v10 = feat[:, y0, x1]
    v01 = feat[:, y1, x0]
    v11 = feat[:, y1, x1]

    gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy
    gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx
    mix = v00 - v10 - v01 + v11

    px_bar = np.sum(val_bar * gx, axis=0) + np.sum(gfy_bar * mix, axis=0)
    py_bar = np.sum(val_bar * gy, axis=0) + np.sum(gfx_bar * mix, axis=0)

    # Cell gradients: value path uses the bilinear weights, gradient paths use
    # the weight derivatives of the interpolant.
    c00 = val_bar * ((1.0 - fx) * (1.0 - fy)) - gfx_bar * (1.0 - fy) - gfy_bar * (1.0 - fx)
    c10 = val_bar * (fx * (1.0 - fy)) + gfx_bar * (1.0 - fy) - gfy_bar * fx
    c01 = val_bar * ((1.0 - fx) * fy) - gfx_bar * fy + gfy_bar * (1.0 - fx)
    c11 = val_bar * (fx * fy) + gfx_bar * fy + gfy_bar * fx
    for c in range(feat.shape[0]):
        np.add.at(cells_out[c], (y0, x0), c00[c])
        np.add.at(cells_out[c], (y0, x1), c10[c])
        np.add.at(cells_out[c], (y1, x0), c01[c])
        np.add.at(cells_out[c], (y1, x1), c11[c])
    return px_bar, py_bar


def _iter_backward(cache, mlp, nd_bar, nR_bar, nt_bar,
                   tgt_bar_out, src_bars_out, mlp_grads):
    """Reverse one LM iteration.

    cache is the want_cache payload of _iter_forward; nd/nR/nt are gradients
    with respect to the iteration's outputs. Returns gradients with respect
    to the iteration's input state, accumulating feature and MLP gradients
    into the provided buffers.
    """
    lc = cache["level_cache"]
    level = lc["level"]
    factor = lc["factor"]
    K_l = lc["K_l"]
    F, G = K_l.fx, K_l.fy
    views = lc["views"]
    n = len(views)
    dp = cache["dp"]
    dd = cache["dd"]

    # --- update step ---
    u = nd_bar * cache["clamp_pass"]
    d_bar = u.copy()
    dd_bar = block_sum(u, factor)

    R_bar = np.empty_like(nR_bar)
    t_bar = np.empty_like(nt_bar)
    dp_bar = np.zeros((n, 6))
    for i in range(n):
        E = cache["exps"][i]
        Ri, ti = cache["Rs"][i], cache["ts"][i]
        er_bar = nR_bar[i] @ Ri.T + np.outer(nt_bar[i], ti)
        et_bar = nt_bar[i]
        R_bar[i] = E.R.T @ nR_bar[i]
        t_bar[i] = E.R.T @ nt_bar[i]
        dp_bar[i] = se3_exp_vjp(dp[i], er_bar, et_bar)

    if cache["stalled"]:
        # Zero step: the iteration was the identity on the state and lambda
        # never influenced the outputs.
        return d_bar, R_bar, t_bar

    hdd, gd = cache["hdd"], cache["gd"]
    hdp, hpp, gp = cache["hdp"], cache["hpp"], cache["gp"]
    iA, S = cache["iA"], cache["S"]
    lam = cache["lam"]
    h, w = hdd.shape
    gdf = gd.ravel()
    M = hdp.reshape(h * w, n * 6)
    dpf = dp.ravel()
    dd_barf = dd_bar.ravel()

    # --- Schur solve ---
    # dd = -iA * (gdf + M dp)
    iA_bar = -dd_barf * (gdf + M @ dpf)
    gdf_bar = -iA * dd_barf
    M_bar = -np.outer(iA * dd_barf, dpf)
    dp_barf = dp_bar.ravel() - M.T @ (iA * dd_barf)

    # dp = S^{-1} rhs
    rhs_bar = np.linalg.solve(S.T, dp_barf)
    S_bar = -np.outer(rhs_bar, dpf)

    # rhs = -gp + M^T (iA * gdf)
    gp_bar = -rhs_bar.reshape(n, 6)
    M_bar += np.outer(iA * gdf, rhs_bar)
    iA_bar += (M @ rhs_bar) * gdf
    gdf_bar += (M @ rhs_bar) * iA

    # S = blockdiag(a_pp) - M^T (iA * M)
    a_pp_bar = np.stack([S_bar[i * 6:(i + 1) * 6, i * 6:(i + 1) * 6]
                         for i in range(n)])
    M_bar += -iA[:, None] * (M @ (S_bar + S_bar.T))
    iA_bar += -np.einsum("pa,ab,pb->p", M, S_bar, M, optimize=True)

    # iA = 1/a_dd where hdd > 0 else 0
    a_dd_bar = -iA_bar * iA * iA

    # a_dd = hdd + lam * dsq_d with dsq_d = max(hdd, floor_d) and the floor
    # itself a function of mean(hdd) when it exceeds the absolute clamp.
    hddf = hdd.ravel()
    diag_p = np.einsum("iaa->ia", hpp)
    floor_d, floor_p = _damping_floors(hdd, diag_p)
    dsq_d = np.maximum(hddf, floor_d)
    active_d = hddf > floor_d
    hdd_bar_f = a_dd_bar * (1.0 + lam * active_d)
    lam_bar = float(np.sum(a_dd_bar * dsq_d))
    if floor_d > DIAG_CLAMP ** 2:
        coef = lam * float(np.sum(a_dd_bar * ~active_d))
        hdd_bar_f = hdd_bar_f + coef * (DIAG_RMS_FRACTION ** 2 / hddf.size)
    hdd_bar = hdd_bar_f.reshape(h, w)

    # a_pp = hpp + lam * diag(dsq_p), dsq_p = max(diag_p, floor_p)
    dsq_p = np.maximum(diag_p, floor_p)
    active_p = diag_p > floor_p
    hpp_bar = a_pp_bar.copy()
    diag_bar = np.einsum("iaa->ia", a_pp_bar)
    for i in range(n):
        hpp_bar[i][np.diag_indices(6)] += lam * active_p[i] * diag_bar[i]
    lam_bar += float(np.sum(diag_bar * dsq_p))
    if floor_p > DIAG_CLAMP ** 2:
        coefp = lam * float(np.sum(diag_bar * ~active_p))
        add = coefp * (DIAG_RMS_FRACTION ** 2 / diag_p.size)
        for i in range(n):
            hpp_bar[i][np.diag_indices(6)] += add

    gd_bar = gdf_bar.reshape(h, w)
    hdp_bar = M_bar.reshape(h, w, n, 6)

    # --- normal-equation blocks ---
    residual = cache["residual"]
    jac = cache["jac"]
    e = residual.values
    jd, jxi = jac.jd, jac.jxi
    jd_bar = 2.0 * hdd_bar[None, None] * jd
    jd_bar += gd_bar[None, None] * e
    e_bar = gd_bar[None, None] * jd
    jd_bar += np.einsum("hwik,ichwk->ichw", hdp_bar, jxi, optimize=True)
    jxi_bar = np.einsum("hwik,ichw->ichwk", hdp_bar, jd, optimize=True)
    hpp_sym = hpp_bar + np.swapaxes(hpp_bar, 1, 2)
    jxi_bar += np.einsum("iab,ichwb->ichwa", hpp_sym, jxi, optimize=True)
    jxi_bar += np.einsum("ia,ichw->ichwa", gp_bar, e, optimize=True)
    e_bar += np.einsum("ia,ichwa->ichw", gp_bar, jxi, optimize=True)

    # --- lambda path (MLP on the pooled residual) ---
    pooled, z1, h1, z2, h2, z3 = cache["mlp_cache"]
    z3_bar = np.array([lam_bar]) * (z3 > 0)
    mlp_grads.w3 += np.outer(z3_bar, h2)
    mlp_grads.b3 += z3_bar
    h2_bar = mlp.w3.T @ z3_bar
    z2_bar = h2_bar * (z2 > 0)
    mlp_grads.w2 += np.outer(z2_bar, h1)
    mlp_grads.b2 += z2_bar
    h1_bar = mlp.w2.T @ z2_bar
    z1_bar = h1_bar * (z1 > 0)
    mlp_grads.w1 += np.outer(z1_bar, pooled)
    mlp_grads.b1 += z1_bar
    pooled_bar = mlp.w1.T @ z1_bar
    e_bar = e_bar + pooled_bar[None, :, None, None] / cache["n_valid"]

    # --- per-view geometry ---
    rays = lc["rays"]
    dl = lc["dl"]
    dl_bar = np.zeros_like(dl)
    tgt_lvl_bar = tgt_bar_out[level - 1]
    for i, pv in enumerate(views):
        valid = pv["valid"]
        x, y, z = pv["Xs"]
        iz = pv["iz"]
        rd = pv["rd"]
        gfx_m = pv["gfx"] * valid
        gfy_m = pv["gfy"] * valid

        jdb = jd_bar[i]
        jxb = jxi_bar[i]
        # Coefficients of <Pu, rd>, <Pu, V_k> (and Pv analogues).
        alpha_u = np.sum(gfx_m * jdb, axis=0)
        alpha_v = np.sum(gfy_m * jdb, axis=0)
        beta_u = np.einsum("chw,chwk->khw", gfx_m, jxb, optimize=True)
        beta_v = np.einsum("chw,chwk->khw", gfy_m, jxb, optimize=True)

        pu = np.stack([F * iz, np.zeros_like(iz), -F * x * iz * iz])
        pv_row = np.stack([np.zeros_like(iz), G * iz, -G * y * iz * iz])

        # A_k = e_k x X (omega columns), e_{k-3} (translation columns).
        A = np.stack([
            np.stack([np.zeros_like(z), -z, y]),
            np.stack([z, np.zeros_like(z), -x]),
            np.stack([-y, x, np.zeros_like(z)]),
        ])  # (3 cols, 3 comps, h, w)

        G_u = alpha_u * rd
        G_v = alpha_v * rd
        for k in range(3):
            G_u = G_u + beta_u[k] * A[k]
            G_v = G_v + beta_v[k] * A[k]
        for k in range(3):
            G_u[k] += beta_u[3 + k]
            G_v[k] += beta_v[3 + k]

        rd_bar = alpha_u * pu + alpha_v * pv_row
        X_bar = np.zeros_like(rd)
        # <Pu, e_k x X> depends on X: gradient is Pu x e_k.
        for k in range(3):
            ek = np.zeros(3)
            ek[k] = 1.0
            cross_u = np.cross(pu, ek[:, None, None], axisa=0, axisb=0, axisc=0)
            cross_v = np.cross(pv_row, ek[:, None, None], axisa=0, axisb=0, axisc=0)
            X_bar += beta_u[k] * cross_u + beta_v[k] * cross_v
        # Pu / Pv entries depend on (x, y, z).
        iz2 = iz * iz
        iz3 = iz2 * iz
        X_bar[0] += -F * iz2 * G_u[2]
        X_bar[2] += -F * iz2 * G_u[0] + 2.0 * F * x * iz3 * G_u[2]
        X_bar[1] += -G * iz2 * G_v[2]
        X_bar[2] += -G * iz2 * G_v[1] + 2.0 * G * y * iz3 * G_v[2]

        # --- residual and sampling path ---
        eb = e_bar[i]
        val_bar = eb * valid
        tgt_lvl_bar -= val_bar
        gfx_bar = gfx_m * 0.0
        gfy_bar = gfy_m * 0.0
        # jd / jxi entries are linear in the masked feature gradients.
        dpx_dd = pu[0] * rd[0] + pu[2] * rd[2]
        dpy_dd = pv_row[1] * rd[1] + pv_row[2] * rd[2]
        gfx_bar += jdb * dpx_dd
        gfy_bar += jdb * dpy_dd
        dpx_cols = np.stack([np.einsum("nhw,nhw->hw", pu, A[k]) for k in range(3)]
                            + [pu[0], pu[1], pu[2]])
        dpy_cols = np.stack([np.einsum("nhw,nhw->hw", pv_row, A[k]) for k in range(3)]
                            + [pv_row[0], pv_row[1], pv_row[2]])
        gfx_bar += np.einsum("chwk,khw->chw", jxb, dpx_cols, optimize=True)
        gfy_bar += np.einsum("chwk,khw->chw", jxb, dpy_cols, optimize=True)
        gfx_bar *= valid
        gfy_bar *= valid

        feat = cache["source_feats"][i]
        px_bar, py_bar = _sample_vjp(feat, pv["px"], pv["py"],
                                     val_bar, gfx_bar, gfy_bar,
                                     src_bars_out[i][level - 1])
        # px = F * x * iz + cx (only where z was valid; elsewhere constant).
        zvalid = pv["Xs"][2] > BEHIND_EPS
        px_bar = px_bar * zvalid
        py_bar = py_bar * zvalid
        X_bar[0] += px_bar * F * iz
        X_bar[2] += -px_bar * F * x * iz2
        X_bar[1] += py_bar * G * iz
        X_bar[2] += -py_bar * G * y * iz2

        # Xs = dl * rd + t
        dl_bar += np.sum(X_bar * rd, axis=0)
        rd_bar += dl * X_bar
        t_bar[i] += X_bar.sum(axis=(1, 2))
        # rd = R @ rays
        R_bar[i] += np.einsum("nhw,mhw->nm", rd_bar, rays, optimize=True)

    d_bar += block_mean_vjp(dl_bar, factor)
    return d_bar, R_bar, t_bar


def ba_backward(trace: SolveTrace, upstream: StateGrad) -> BAGradients:
    """Reverse through every recorded iteration of a solve.

    upstream carries gradients with respect to the final state (full-depth
    map and raw pose matrices). Returns gradients with respect to the feature
    pyramids, the damping-MLP weights and the initial state (depth plus twist
    coordinates).
    """
    views = trace.views
    mlp = trace.mlp
    n = len(views.sources)
    tgt_bars = [np.zeros_like(views.target.level(k)) for k in (1, 2, 3)]
    src_bars = [[np.zeros_like(s.level(k)) for k in (1, 2, 3)]
                for s in views.sources]
    mlp_grads = MLPGrads.zeros_like(mlp)

    d_bar = upstream.depth.copy()
    R_bar = upstream.pose_r.copy()
    t_bar = upstream.pose_t.copy()

    for k in reversed(range(len(trace.records))):
        depth_k, Rs_k, ts_k = trace.snapshots[k]
        level = trace.records[k].level
        out = _iter_forward(depth_k, Rs_k, ts_k, views, trace.K, level, mlp,
                            want_cache=True)
        cache = out["cache"]
        cache["source_feats"] = [s.level(level) for s in views.sources]
        d_bar, R_bar, t_bar = _iter_backward(cache, mlp, d_bar, R_bar, t_bar,
                                             tgt_bars, src_bars, mlp_grads)

    twists_init_bar = np.stack([
        se3_exp_vjp(trace.init_twists[i], R_bar[i], t_bar[i]) for i in range(n)])
    return BAGradients(depth_init=d_bar, twists_init=twists_init_bar,
                       target_levels=tgt_bars, source_levels=src_bars,
                       mlp=mlp_grads)
