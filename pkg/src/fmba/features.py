"""Feature extraction: a small strided conv encoder and the top-down pyramid.

The encoder stands in for a U-Net encoder: four 3x3 stride-2 convolutions
(channels 8, 16, 16, 16) produce base maps C1..C4 at scales 1/2..1/16. The
pyramid head upsamples the coarser map by 2 (bilinear), concatenates it with
the lateral base map and applies a 3x3 convolution, yielding exactly three
levels F1..F3 at scales 1/2, 1/4, 1/8. Every convolution uses replicate
padding (well defined down to 1x1 maps) and a leaky rectifier with slope 0.1;
all operations have hand-written VJPs so feature weights can be trained
through the solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster import Raster, _sample_indices, block_mean, sample_many

LEAKY_SLOPE = 0.1


# --- primitive ops ------------------------------------------------------------

def conv2d(x, w, b, stride=1):
    """3x3 convolution with replicate padding; x (Cin,H,W) -> (Cout,H/s,W/s)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    # win: (Cin, Hout, Wout, 3, 3); w: (Cout, Cin, 3, 3)
    y = np.einsum("ihwyx,oiyx->ohw", win, w, optimize=True)
    return y + b[:, None, None]


def conv2d_vjp(x, w, stride, ybar):
    """VJP of conv2d; returns (xbar, wbar, bbar)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    wbar = np.einsum("ohw,ihwyx->oiyx", ybar, win, optimize=True)
    bbar = ybar.sum(axis=(1, 2))

    cin, hp, wp = xp.shape
    hout, wout = ybar.shape[1:]
    xpbar = np.zeros((cin, hp, wp))
    for dy in range(3):
        for dx in range(3):
            contrib = np.einsum("ohw,oi->ihw", ybar, w[:, :, dy, dx], optimize=True)
            xpbar[:, dy:dy + stride * hout:stride,
                  dx:dx + stride * wout:stride] += contrib
    # Fold the replicate padding back onto the borders.
    xbar = xpbar[:, 1:-1, 1:-1].copy()
    xbar[:, 0, :] += xpbar[:, 0, 1:-1]
    xbar[:, -1, :] += xpbar[:, -1, 1:-1]
    xbar[:, :, 0] += xpbar[:, 1:-1, 0]
    xbar[:, :, -1] += xpbar[:, 1:-1, -1]
    xbar[:, 0, 0] += xpbar[:, 0, 0]
    xbar[:, 0, -1] += xpbar[:, 0, -1]
    xbar[:, -1, 0] += xpbar[:, -1, 0]
    xbar[:, -1, -1] += xpbar[:, -1, -1]
    return xbar, wbar, bbar


def leaky_relu(x):
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def leaky_relu_vjp(x, ybar):
    return np.where(x >= 0, ybar, LEAKY_SLOPE * ybar)


def _upsample2_grid(h, w):
    # Half-pixel-centre mapping for an exact 2x bilinear upsample.
    ys = np.clip((np.arange(2 * h) + 0.5) / 2.0 - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(2 * w) + 0.5) / 2.0 - 0.5, 0.0, w - 1.0)
    return np.meshgrid(xs, ys)


def upsample2(x):
    """Bilinear 2x upsampling of a (C, H, W) array."""
    h, w = x.shape[1:]
    gx, gy = _upsample2_grid(h, w)
    vals, _ = sample_many(x, gx, gy)
    return vals


def upsample2_vjp(in_shape, ybar):
    """VJP of upsample2 (linear, so independent of the input values)."""
    c, h, w = in_shape
    gx, gy = _upsample2_grid(h, w)
    x0, y0, x1, y1, fx, fy, _ = _sample_indices((h, w), gx, gy)
    xbar = np.zeros((c, h, w))
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    for ci in range(c):
        np.add.at(xbar[ci], (y0, x0), ybar[ci] * w00)
        np.add.at(xbar[ci], (y0, x1), ybar[ci] * w10)
        np.add.at(xbar[ci], (y1, x0), ybar[ci] * w01)
        np.add.at(xbar[ci], (y1, x1), ybar[ci] * w11)
    return xbar


# --- conv stacks ---------------------------------------------------------------

@dataclass
class ConvStack:
    """Ordered 3x3 conv layers with biases and per-layer strides."""

    weights: list        # list of (Cout, Cin, 3, 3) arrays
    biases: list         # list of (Cout,) arrays
    strides: list        # list of ints
    seed: int = 0

    def __post_init__(self):
        for w in self.weights:
            if w.shape[2:] != (3, 3):
                raise ValueError("kernels must be 3x3")
        if not (len(self.weights) == len(self.biases) == len(self.strides)):
            raise ValueError("layer lists must have equal length")

    @classmethod
    def seeded(cls, channel_plan, strides, seed):
        """Deterministic He-style initialization.

        channel_plan is [(in, out), ...] matching strides.
        """
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for cin, cout in channel_plan:
            fan_in = cin * 9
            weights.append(rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(fan_in))
            biases.append(np.zeros(cout))
        return cls(weights, biases, list(strides), seed=int(seed))

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[k:k + w.size].reshape(w.shape).copy())
            k += w.size
            biases.append(flat[k:k + b.size].copy())
            k += b.size
        if k != flat.size:
            raise ValueError("flat parameter vector has wrong length")
        return ConvStack(weights, biases, list(self.strides), seed=self.seed)

    def forward(self, x, keep=False):
        """Run all layers; with keep=True also returns pre-activation caches."""
        acts = []
        for w, b, s in zip(self.weights, self.biases, self.strides):
            pre = conv2d(x, w, b, stride=s)
            out = leaky_relu(pre)
            acts.append((x, pre))
            x = out
        return (x, acts) if keep else x


def save_convstack(path_bin, path_json, stack: ConvStack, extra=None):
    """Flat little-endian float32 weights plus a JSON sidecar with the shapes."""
    flat = stack.flatten().astype("<f4")
    with open(path_bin, "wb") as f:
        f.write(flat.tobytes())
    meta = {
        "seed": stack.seed,
        "strides": [int(s) for s in stack.strides],
        "layers": [{"weight": list(w.shape), "bias": list(b.shape)}
                   for w, b in zip(stack.weights, stack.biases)],
        "activation": "leaky_relu_0.1",
    }
    if extra:
        meta.update(extra)
    with open(path_json, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_convstack(path_bin, path_json) -> ConvStack:
    with open(path_json) as f:
        meta = json.load(f)
    weights, biases = [], []
    flat = np.frombuffer(open(path_bin, "rb").read(), dtype="<f4").astype(float)
    k = 0
    for layer in meta["layers"]:
        wshape = tuple(layer["weight"])
        bshape = tuple(layer["bias"])
        n = int(np.prod(wshape))
        weights.append(flat[k:k + n].reshape(wshape).copy())
        k += n
        n = int(np.prod(bshape))
        biases.append(flat[k:k + n].copy())
        k += n
    if k != flat.size:
        raise ValueError(f"{path_bin}: weight payload does not match sidecar shapes")
    return ConvStack(weights, biases, [int(s) for s in meta["strides"]],
                     seed=int(meta.get("seed", 0)))


# --- encoder and pyramid --------------------------------------------------------

ENCODER_CHANNELS = (8, 16, 16, 16)


def encoder_stack(image_channels, seed) -> ConvStack:
    plan = []
    cin = image_channels
    for cout in ENCODER_CHANNELS:
        plan.append((cin, cout))
        cin = cout
    return ConvStack.seeded(plan, [2, 2, 2, 2], seed)


def lateral_stack(pyramid_channels, seed) -> ConvStack:
    c = ENCODER_CHANNELS
    p = pyramid_channels
    plan = [(c[3] + c[2], p), (p + c[1], p), (p + c[0], p)]
    return ConvStack.seeded(plan, [1, 1, 1], seed)


@dataclass(frozen=True)
class FeaturePyramid:
    """Three feature levels at 1/2, 1/4 and 1/8 of the input resolution."""

    levels: tuple  # (F1, F2, F3) arrays, finest first, equal channel count

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("pyramid must have exactly 3 levels")
        chans = {lvl.shape[0] for lvl in self.levels}
        if len(chans) != 1:
            raise ValueError("pyramid levels must share the channel count")
        for fine, coarse in zip(self.levels, self.levels[1:]):
            if coarse.shape[1:] != (fine.shape[1] // 2, fine.shape[2] // 2):
                raise ValueError("each level must halve the previous extent")

    @property
    def channels(self):
        return self.levels[0].shape[0]

    def level(self, k):
        """Level k in 1..3 (1 finest)."""
        return self.levels[k - 1]


def encode_base(img: Raster, enc: ConvStack):
    """Base feature maps C1..C4 at scales 1/2..1/16 of the input."""
    h, w = img.height, img.width
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    x = img.data
    outs = []
    for wgt, b, s in zip(enc.weights, enc.biases, enc.strides):
        x = leaky_relu(conv2d(x, wgt, b, stride=s))
        outs.append(x)
    return outs


def build_pyramid(cs, lat: ConvStack) -> FeaturePyramid:
    """Top-down pyramid with lateral connections from base maps C1..C4."""
    c1, c2, c3, c4 = cs
    for fine, coarse in zip((c1, c2, c3), (c2, c3, c4)):
        if coarse.shape[1:] != (fine.shape[1] // 2, fine.shape[2] // 2):
            raise ValueError("base maps must halve in extent")
    f3 = leaky_relu(conv2d(np.concatenate([upsample2(c4), c3]),
                           lat.weights[0], lat.biases[0]))
    f2 = leaky_relu(conv2d(np.concatenate([upsample2(f3), c2]),
                           lat.weights[1], lat.biases[1]))
    f1 = leaky_relu(conv2d(np.concatenate([upsample2(f2), c1]),
                           lat.weights[2], lat.biases[2]))
    return FeaturePyramid((f1, f2, f3))


def encode_pyramid(img: Raster, enc: ConvStack, lat: ConvStack) -> FeaturePyramid:
    return build_pyramid(encode_base(img, enc), lat)


def intensity_pyramid(img: Raster) -> FeaturePyramid:
    """Image-intensity pyramid (block averages) for the photometric error mode."""
    return FeaturePyramid(tuple(block_mean(img.data, f) for f in (2, 4, 8)))


# --- full backward pass ----------------------------------------------------------

@dataclass
class PyramidCache:
    """Intermediates of encode_pyramid needed for its VJP."""

    enc_acts: list = field(default_factory=list)
    cs: list = field(default_factory=list)
    lat_inputs: list = field(default_factory=list)   # concatenated inputs, fine last
    lat_pres: list = field(default_factory=list)


def encode_pyramid_cached(img: Raster, enc: ConvStack, lat: ConvStack):
    h, w = img.height, img.width
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    cache = PyramidCache()
    x = img.data
    for wgt, b, s in zip(enc.weights, enc.biases, enc.strides):
        pre = conv2d(x, wgt, b, stride=s)
        cache.enc_acts.append((x, pre))
        x = leaky_relu(pre)
        cache.cs.append(x)
    c1, c2, c3, c4 = cache.cs
    levels = []
    top = c4
    for idx, lateral in enumerate((c3, c2, c1)):
        inp = np.concatenate([upsample2(top), lateral])
        pre = conv2d(inp, lat.weights[idx], lat.biases[idx])
        cache.lat_inputs.append(inp)
        cache.lat_pres.append(pre)
        top = leaky_relu(pre)
        levels.append(top)
    # levels were built coarse to fine: [F3, F2, F1]
    return FeaturePyramid((levels[2], levels[1], levels[0])), cache


def encode_pyramid_vjp(cache: PyramidCache, enc: ConvStack, lat: ConvStack,
                       level_bars):
    """Backward through encode_pyramid.

    level_bars is (F1bar, F2bar, F3bar). Returns (enc_grads, lat_grads) as
    (weights list, biases list) pairs; the image gradient is discarded.
    """
    lat_w_bars = [np.zeros_like(w) for w in lat.weights]
    lat_b_bars = [np.zeros_like(b) for b in lat.biases]
    cs_bars = [np.zeros_like(c) for c in cache.cs]

    # Top-down path ran F3 -> F2 -> F1; reverse it.
    f_bars = [level_bars[2], level_bars[1], level_bars[0]]  # order F3, F2, F1
    top_bar = None
    for idx in reversed(range(3)):
        bar = f_bars[idx].copy()
        if top_bar is not None:
            bar += top_bar
        pre_bar = leaky_relu_vjp(cache.lat_pres[idx], bar)
        inp_bar, wbar, bbar = conv2d_vjp(cache.lat_inputs[idx],
                                         lat.weights[idx], 1, pre_bar)
        lat_w_bars[idx] += wbar
        lat_b_bars[idx] += bbar
        up_c = inp_bar.shape[0] - cache.cs[2 - idx].shape[0]
        up_bar, lateral_bar = inp_bar[:up_c], inp_bar[up_c:]
        cs_bars[2 - idx] += lateral_bar
        coarse_shape = (up_c, up_bar.shape[1] // 2, up_bar.shape[2] // 2)
        coarse_bar = upsample2_vjp(coarse_shape, up_bar)
        if idx == 0:
            cs_bars[3] += coarse_bar
            top_bar = None
        else:
            top_bar = coarse_bar
    # top_bar chains into the next-coarser lateral output, handled above by
    # iterating from fine (idx=2) to coarse (idx=0).

    enc_w_bars = [np.zeros_like(w) for w in enc.weights]
    enc_b_bars = [np.zeros_like(b) for b in enc.biases]
    carry = np.zeros_like(cs_bars[3])
    for k in reversed(range(4)):
        bar = cs_bars[k] + carry
        x, pre = cache.enc_acts[k]
        pre_bar = leaky_relu_vjp(pre, bar)
        xbar, wbar, bbar = conv2d_vjp(x, enc.weights[k], enc.strides[k], pre_bar)
        enc_w_bars[k] += wbar
        enc_b_bars[k] += bbar
        carry = xbar if k > 0 else None
    return (enc_w_bars, enc_b_bars), (lat_w_bars, lat_b_bars)
