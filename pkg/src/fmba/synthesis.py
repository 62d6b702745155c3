"""View synthesis by differentiable warping, and the training losses.

A target view is reconstructed by projecting each target pixel through its
depth into a source view and sampling the source image bilinearly. The
training objective blends an L1 photometric term with a single-scale SSIM
appearance term and adds an edge-aware smoothness penalty on mean-normalized
depth, evaluated at the three solver scales with the smoothness weight
divided by the downscale ratio.

All losses are averaged over valid pixels (not summed) so the masked-region
size does not rescale the objective, and expose analytic gradients with
respect to the depth map and the relative poses for end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProblemError
from .geometry import CameraIntrinsics, SE3Pose
from .raster import DepthMap, Raster, block_mean, block_mean_vjp
from .raster import _sample_indices

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
BEHIND_EPS = 1e-6


@dataclass(frozen=True)
class WarpedView:
    """Source image resampled into the target frame plus its validity mask."""

    image: np.ndarray    # (C, h, w); masked pixels carry exactly zero
    mask: np.ndarray     # (h, w)

    @property
    def n_valid(self):
        return int(self.mask.sum())


@dataclass(frozen=True)
class LossWeights:
    """Blend weight for SSIM vs L1 and the smoothness base weight.

    The smoothness weight at downscale ratio r is smooth_base / r.
    """

    alpha: float = 0.85
    smooth_base: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.smooth_base <= 0:
            raise ValueError("smooth_base must be positive")

    def smooth_weight(self, ratio):
        return self.smooth_base / float(ratio)


# --- warping -----------------------------------------------------------------------

def _warp_forward(src, depth, R, t, K):
    """Project the target grid through depth into the source and sample it."""
    h, w = depth.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)])
    rd = np.tensordot(R, rays, axes=(1, 0))
    Xs = depth * rd + t[:, None, None]
    x, y, z = Xs
    zvalid = z > BEHIND_EPS
    iz = 1.0 / np.where(zvalid, z, 1.0)
    px = np.where(zvalid, K.fx * x * iz + K.cx, -1.0)
    py = np.where(zvalid, K.fy * y * iz + K.cy, -1.0)

    x0, y0, x1, y1, fx, fy, inb = _sample_indices(src.shape[-2:], px, py)
    v00 = src[:, y0, x0]
    v10 = src[:, y0, x1]
    v01 = src[:, y1, x0]
    v11 = src[:, y1, x1]
    vals = ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)
    valid = zvalid & inb
    image = vals * valid
    cache = {"rays": rays, "rd": rd, "Xs": Xs, "iz": iz, "zvalid": zvalid,
             "corners": (v00, v10, v01, v11), "fracs": (fx, fy),
             "valid": valid, "K": K, "depth": depth}
    return WarpedView(image, valid), cache


def _warp_vjp(cache, image_bar):
    """Gradients of the warped image with respect to depth, R and t."""
    K = cache["K"]
    v00, v10, v01, v11 = cache["corners"]
    fx, fy = cache["fracs"]
    valid = cache["valid"]
    ib = image_bar * valid
    gx = (v10 - v00) * (1 - fy) + (v11 - v01) * fy
    gy = (v01 - v00) * (1 - fx) + (v11 - v10) * fx
    px_bar = np.sum(ib * gx, axis=0) * cache["zvalid"]
    py_bar = np.sum(ib * gy, axis=0) * cache["zvalid"]

    x, y, z = cache["Xs"]
    iz = cache["iz"]
    X_bar = np.zeros_like(cache["Xs"])
    X_bar[0] = px_bar * K.fx * iz
    X_bar[2] = -px_bar * K.fx * x * iz * iz
    X_bar[1] = py_bar * K.fy * iz
    X_bar[2] += -py_bar * K.fy * y * iz * iz

    rd = cache["rd"]
    depth_bar = np.sum(X_bar * rd, axis=0)
    rd_bar = cache["depth"] * X_bar
    R_bar = np.einsum("nhw,mhw->nm", rd_bar, cache["rays"], optimize=True)
    t_bar = X_bar.sum(axis=(1, 2))
    return depth_bar, R_bar, t_bar


def synthesize_view(source: Raster, depth: DepthMap, T: SE3Pose,
                    K: CameraIntrinsics) -> WarpedView:
    """Reconstruct the target view from a source image.

    The warped value at target pixel p is the source sampled at
    project(K, T, depth(p), p); projections behind the camera or outside the
    source raster are masked and carry value zero.
    """
    warped, _ = _warp_forward(source.data, depth.data, T.R, T.t, K)
    return warped


# --- photometric loss ----------------------------------------------------------------

def loss_photo(target: Raster, warped_list):
    """Mean absolute difference over valid pixels, summed over source views."""
    total = 0.0
    for wv in warped_list:
        total += _photo_one(target.data, wv)[0]
    return total


def _photo_one(tgt, wv: WarpedView):
    n_valid = wv.n_valid
    if n_valid == 0:
        raise DegenerateProblemError("warped view has no valid pixels")
    c = tgt.shape[0]
    diff = (tgt - wv.image) * wv.mask
    value = float(np.sum(np.abs(diff)) / (c * n_valid))
    return value, diff, n_valid


def _photo_one_vjp(diff, n_valid, c, upstream=1.0):
    # d/d(warped) of mean |t - w|; sign(0) = 0 at the L1 kink.
    return (-np.sign(diff)) * (upstream / (c * n_valid))


# --- smoothness -----------------------------------------------------------------------

def _fwd_diff_x(a):
    out = np.zeros_like(a)
    out[..., :, :-1] = a[..., :, 1:] - a[..., :, :-1]
    return out


def _fwd_diff_y(a):
    out = np.zeros_like(a)
    out[..., :-1, :] = a[..., 1:, :] - a[..., :-1, :]
    return out


def _fwd_diff_x_adj(u):
    out = np.zeros_like(u)
    out[..., :, 1:] += u[..., :, :-1]
    out[..., :, :-1] -= u[..., :, :-1]
    return out


def _fwd_diff_y_adj(u):
    out = np.zeros_like(u)
    out[..., 1:, :] += u[..., :-1, :]
    out[..., :-1, :] -= u[..., :-1, :]
    return out


def loss_smooth(depth, image, normalize=True, want_grad=False):
    """Edge-aware smoothness of (mean-normalized) depth.

    Mean over pixels of |dx D~| exp(-|dx I|) + |dy D~| exp(-|dy I|), image
    gradients averaged over channels. With normalize=True, D~ = D / mean(D),
    making the loss invariant to global depth scale; normalize=False applies
    the penalty to raw depth.
    """
    d = depth.data if isinstance(depth, DepthMap) else np.asarray(depth, float)
    img = image.data if isinstance(image, Raster) else np.asarray(image, float)
    m = d.mean() if normalize else 1.0
    dn = d / m
    gx_i = np.mean(np.abs(_fwd_diff_x(img)), axis=0)
    gy_i = np.mean(np.abs(_fwd_diff_y(img)), axis=0)
    wx = np.exp(-gx_i)
    wy = np.exp(-gy_i)
    dx = _fwd_diff_x(dn)
    dy = _fwd_diff_y(dn)
    n = d.size
    value = float(np.sum(np.abs(dx) * wx + np.abs(dy) * wy) / n)
    if not want_grad:
        return value
    dx_bar = np.sign(dx) * wx / n
    dy_bar = np.sign(dy) * wy / n
    dn_bar = _fwd_diff_x_adj(dx_bar) + _fwd_diff_y_adj(dy_bar)
    if normalize:
        d_bar = dn_bar / m - (np.sum(dn_bar * d) / (n * m * m))
    else:
        d_bar = dn_bar
    return value, d_bar


# --- SSIM ----------------------------------------------------------------------------

def _reflect_index(n, off):
    idx = np.arange(n) + off
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    idx = np.where(idx < 0, -idx, idx)
    idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    return idx


def _mean3(a):
    """3x3 mean filter with reflective padding (edge behaviour on size-1 axes)."""
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    for dy in (-1, 0, 1):
        iy = _reflect_index(h, dy)
        for dx in (-1, 0, 1):
            ix = _reflect_index(w, dx)
            out += a[..., iy[:, None], ix[None, :]]
    return out / 9.0


def _mean3_adj(u):
    h, w = u.shape[-2:]
    out = np.zeros_like(u)
    flat = out.reshape(-1, h, w)
    uf = u.reshape(-1, h, w) / 9.0
    for dy in (-1, 0, 1):
        iy = _reflect_index(h, dy)
        for dx in (-1, 0, 1):
            ix = _reflect_index(w, dx)
            for c in range(flat.shape[0]):
                np.add.at(flat[c], (iy[:, None], ix[None, :]), uf[c])
    return out


def ssim(x, y, want_cache=False):
    """Per-pixel single-scale SSIM with 3x3 mean-filter local statistics.

    Values are clipped to [-1, 1]. Inputs are (C, H, W) arrays or Rasters
    with values in [0, 1].
    """
    xa = x.data if isinstance(x, Raster) else np.asarray(x, float)
    ya = y.data if isinstance(y, Raster) else np.asarray(y, float)
    if xa.shape != ya.shape:
        raise ValueError("ssim inputs must have matching shapes")
    mx = _mean3(xa)
    my = _mean3(ya)
    x2 = _mean3(xa * xa)
    y2 = _mean3(ya * ya)
    xy = _mean3(xa * ya)
    sx = x2 - mx * mx
    sy = y2 - my * my
    sxy = xy - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sx + sy + SSIM_C2
    raw = (a1 * a2) / (b1 * b2)
    val = np.clip(raw, -1.0, 1.0)
    if want_cache:
        return val, {"xa": xa, "ya": ya, "mx": mx, "my": my, "a1": a1,
                     "a2": a2, "b1": b1, "b2": b2, "raw": raw}
    return val


def _ssim_vjp_y(cache, s_bar):
    """Gradient of ssim with respect to the second argument."""
    xa, ya = cache["xa"], cache["ya"]
    mx, my = cache["mx"], cache["my"]
    a1, a2, b1, b2 = cache["a1"], cache["a2"], cache["b1"], cache["b2"]
    # Clip passes gradient on the closed interval; outside values are clamped.
    s_bar = s_bar * (np.abs(cache["raw"]) <= 1.0)
    denom = b1 * b2
    n_bar = s_bar / denom
    d_bar = -s_bar * (a1 * a2) / (denom * denom)
    a1_bar = n_bar * a2
    a2_bar = n_bar * a1
    b1_bar = d_bar * b2
    b2_bar = d_bar * b1
    sxy_bar = 2.0 * a2_bar
    sy_bar = b2_bar
    my_bar = 2.0 * mx * a1_bar + 2.0 * my * b1_bar - mx * sxy_bar - 2.0 * my * sy_bar
    y2_bar = sy_bar
    xy_bar = sxy_bar
    y_bar = _mean3_adj(my_bar)
    y_bar += _mean3_adj(y2_bar) * 2.0 * ya
    y_bar += _mean3_adj(xy_bar) * xa
    return y_bar


# --- appearance matching ----------------------------------------------------------------

def loss_match(target: Raster, warped_list, alpha=0.85, want_grads=False):
    """Blend of (1 - SSIM)/2 and L1 photometric terms, summed over views.

    Both terms are averaged over valid pixels and channels per view.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    tgt = target.data
    c = tgt.shape[0]
    total = 0.0
    grads = []
    for wv in warped_list:
        photo, diff, n_valid = _photo_one(tgt, wv)
        s_val, s_cache = ssim(tgt, wv.image, want_cache=True)
        ssim_term = float(np.sum((1.0 - s_val) / 2.0 * wv.mask[None])
                          / (c * n_valid))
        total += alpha * ssim_term + (1.0 - alpha) * photo
        if want_grads:
            w_bar = _photo_one_vjp(diff, n_valid, c, upstream=(1.0 - alpha))
            s_bar = -alpha * wv.mask[None] / (2.0 * c * n_valid)
            w_bar = w_bar + _ssim_vjp_y(s_cache, s_bar)
            grads.append(w_bar)
    if want_grads:
        return total, grads
    return total


# --- total objective ---------------------------------------------------------------------

@dataclass
class TotalLoss:
    total: float
    parts: dict
    depth_grad: np.ndarray     # (H, W) wrt the full-resolution depth
    pose_r_grad: np.ndarray    # (N, 3, 3)
    pose_t_grad: np.ndarray    # (N, 3)

    def report(self):
        return dict(self.parts)


def total_loss(depth: DepthMap, poses, target_img: Raster, source_imgs,
               K: CameraIntrinsics, weights: LossWeights = LossWeights(),
               scales=(2, 4, 8)) -> TotalLoss:
    """Appearance-matching plus weighted smoothness, summed over scales.

    poses are target->source SE3Pose transforms, one per source image. The
    smoothness weight at downscale ratio r is weights.smooth_base / r.
    Returns the loss value, a per-part report and analytic gradients with
    respect to the full-resolution depth and the pose matrix entries.
    """
    n = len(source_imgs)
    if len(poses) != n:
        raise ValueError("need one pose per source image")
    depth_bar = np.zeros_like(depth.data)
    pose_r_bar = np.zeros((n, 3, 3))
    pose_t_bar = np.zeros((n, 3))
    parts = {"l_photo": 0.0, "l_smooth": 0.0, "l_match": 0.0, "l_total": 0.0,
             "per_scale": []}
    for s in scales:
        K_s = K.scaled(1.0 / s)
        tgt_s = Raster(block_mean(target_img.data, s))
        d_s = block_mean(depth.data, s)
        lam_s = weights.smooth_weight(s)

        warped, caches = [], []
        for i, src in enumerate(source_imgs):
            wv, cache = _warp_forward(block_mean(src.data, s), d_s,
                                      poses[i].R, poses[i].t, K_s)
            warped.append(wv)
            caches.append(cache)

        photo_s = loss_photo(tgt_s, warped)
        match_s, wbars = loss_match(tgt_s, warped, weights.alpha,
                                    want_grads=True)
        smooth_s, d_s_bar = loss_smooth(d_s, tgt_s, want_grad=True)
        scale_total = match_s + lam_s * smooth_s

        d_s_bar = lam_s * d_s_bar
        for i in range(n):
            db, rb, tb = _warp_vjp(caches[i], wbars[i])
            d_s_bar += db
            pose_r_bar[i] += rb
            pose_t_bar[i] += tb
        depth_bar += block_mean_vjp(d_s_bar, s)

        parts["per_scale"].append({
            "scale": s, "l_photo": photo_s, "l_smooth": smooth_s,
            "l_match": match_s, "l_total": scale_total})
        parts["l_photo"] += photo_s
        parts["l_smooth"] += lam_s * smooth_s
        parts["l_match"] += match_s
        parts["l_total"] += scale_total
    return TotalLoss(parts["l_total"], parts, depth_bar, pose_r_bar, pose_t_bar)
