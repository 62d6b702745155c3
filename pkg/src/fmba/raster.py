"""Multi-channel rasters, differentiable bilinear sampling and raster I/O.

Rasters are channel-major float64 arrays (C, H, W), immutable after
construction so they can be sampled concurrently. Sampling outside
[0, W-1] x [0, H-1] is reported through a validity flag and the caller masks;
values are never clamped into range (clamping would create zero-gradient
plateaus at the borders).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class Raster:
    """Dense (C, H, W) value grid with finite entries."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError("raster data must have shape (C, H, W)")
        if min(data.shape) < 1:
            raise ValueError("raster dimensions must be at least 1")
        if not np.all(np.isfinite(data)):
            raise ValueError("raster values must be finite")
        data = np.ascontiguousarray(data).copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class DepthMap:
    """(H, W) grid of positive, finite depths in scene units."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=float)).copy()
        if data.ndim != 2:
            raise ValueError("depth map must have shape (H, W)")
        if not np.all(np.isfinite(data)):
            raise ValueError("depth values must be finite")
        if not np.all(data > 0):
            raise ValueError("depth values must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def mean(self):
        return float(self.data.mean())


# --- bilinear sampling -------------------------------------------------------

def _sample_indices(shape_hw, xs, ys):
    """Corner indices, fractional offsets and the in-bounds mask for sampling.

    Indices are arranged so that the interpolation is exact on [0, W-1] even at
    the far border (where the weight of the clipped neighbour is zero), and
    degenerates gracefully for size-1 axes.
    """
    H, W = shape_hw
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    inb = (xs >= 0.0) & (xs <= W - 1.0) & (ys >= 0.0) & (ys <= H - 1.0)
    xc = np.clip(xs, 0.0, W - 1.0)
    yc = np.clip(ys, 0.0, H - 1.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(H - 2, 0))
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return x0, y0, x1, y1, fx, fy, inb


def sample_many(data, xs, ys):
    """Bilinear sampling of a (C, H, W) array at arbitrary positions.

    Returns (values (C, ...), inbounds (...)). Out-of-bounds positions get the
    value of the nearest boundary sample but are flagged invalid; callers must
    mask them.
    """
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("sample positions must be finite")
    x0, y0, x1, y1, fx, fy, inb = _sample_indices(data.shape[-2:], xs, ys)
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    vals = (w00 * data[:, y0, x0] + w10 * data[:, y0, x1]
            + w01 * data[:, y1, x0] + w11 * data[:, y1, x1])
    return vals, inb


def sample_many_with_grad(data, xs, ys):
    """Sampling plus the spatial gradient of the interpolant.

    Returns (values, gx, gy, inbounds), each channel-leading. The gradient is
    the exact derivative of the piecewise-bilinear surface; on integer lattice
    lines it is the one-sided limit from the cell the index math selects.
    """
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("sample positions must be finite")
    x0, y0, x1, y1, fx, fy, inb = _sample_indices(data.shape[-2:], xs, ys)
    v00 = data[:, y0, x0]
    v10 = data[:, y0, x1]
    v01 = data[:, y1, x0]
    v11 = data[:, y1, x1]
    vals = ((1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10
            + (1.0 - fx) * fy * v01 + fx * fy * v11)
    gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy
    gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx
    return vals, gx, gy, inb


def _sample_vjp_full(data, xs, ys, upstream, want_cells=True):
    """VJP of sample_many for known raster data.

    Returns (pos_grad_x, pos_grad_y, cell_grad or None). Position gradients are
    zeroed outside [0, W-1] x [0, H-1] (masked samples carry no gradient).
    """
    x0, y0, x1, y1, fx, fy, inb = _sample_indices(data.shape[-2:], xs, ys)
    v00 = data[:, y0, x0]
    v10 = data[:, y0, x1]
    v01 = data[:, y1, x0]
    v11 = data[:, y1, x1]
    gx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy
    gy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx
    pos_gx = np.sum(upstream * gx, axis=0) * inb
    pos_gy = np.sum(upstream * gy, axis=0) * inb
    cells = None
    if want_cells:
        cells = np.zeros_like(data)
        w00 = (1.0 - fx) * (1.0 - fy) * inb
        w10 = fx * (1.0 - fy) * inb
        w01 = (1.0 - fx) * fy * inb
        w11 = fx * fy * inb
        for c in range(data.shape[0]):
            np.add.at(cells[c], (y0, x0), upstream[c] * w00)
            np.add.at(cells[c], (y0, x1), upstream[c] * w10)
            np.add.at(cells[c], (y1, x0), upstream[c] * w01)
            np.add.at(cells[c], (y1, x1), upstream[c] * w11)
    return pos_gx, pos_gy, cells


def bilinear_sample(raster: Raster, x, y):
    """Sample one position; returns (channel-vector, inbounds flag)."""
    vals, inb = sample_many(raster.data, np.array([x]), np.array([y]))
    return vals[:, 0].copy(), bool(inb[0])


def bilinear_sample_vjp(raster: Raster, x, y, upstream):
    """VJP of bilinear_sample at one position.

    Returns (grad wrt (x, y) as a 2-vector, grad wrt raster cells (C, H, W)).
    On integer lattice lines the returned position gradient is the one-sided
    subgradient of the interpolant.
    """
    upstream = np.asarray(upstream, dtype=float).reshape(raster.channels, 1)
    gx, gy, cells = _sample_vjp_full(raster.data, np.array([float(x)]),
                                     np.array([float(y)]), upstream)
    return np.array([gx[0], gy[0]]), cells


# --- gradients and resampling ------------------------------------------------

def image_gradients(raster: Raster):
    """Forward-difference gradients; the last column/row is zero."""
    d = raster.data
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, :, :-1] = d[:, :, 1:] - d[:, :, :-1]
    gy[:, :-1, :] = d[:, 1:, :] - d[:, :-1, :]
    return Raster(gx), Raster(gy)


def block_mean(arr, factor):
    """Average over non-overlapping factor x factor blocks of the last 2 axes."""
    factor = int(factor)
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ValueError("factor must be a positive power of two")
    if factor == 1:
        return np.array(arr, dtype=float)
    a = np.asarray(arr, dtype=float)
    H, W = a.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"factor {factor} does not divide raster size {H}x{W}")
    shape = a.shape[:-2] + (H // factor, factor, W // factor, factor)
    return a.reshape(shape).mean(axis=(-3, -1))


def block_mean_vjp(upstream, factor):
    """VJP of block_mean: spread each coarse gradient over its block."""
    factor = int(factor)
    if factor == 1:
        return np.array(upstream, dtype=float)
    up = np.asarray(upstream, dtype=float)
    out = np.repeat(np.repeat(up, factor, axis=-2), factor, axis=-1)
    return out / float(factor * factor)


def block_sum(arr, factor):
    """Sum over non-overlapping blocks (VJP of nearest upsampling)."""
    return block_mean(arr, factor) * float(factor * factor)


def upsample_nearest(arr, factor):
    """Replicate each entry over a factor x factor block."""
    factor = int(factor)
    if factor == 1:
        return np.array(arr, dtype=float)
    a = np.asarray(arr, dtype=float)
    return np.repeat(np.repeat(a, factor, axis=-2), factor, axis=-1)


def downsample_depth(depth: DepthMap, factor) -> DepthMap:
    """Block-average depth downsampling (preserves the mean depth)."""
    return DepthMap(block_mean(depth.data, factor))


def downsample_raster(raster: Raster, factor) -> Raster:
    return Raster(block_mean(raster.data, factor))


def resize_bilinear(data, out_h, out_w):
    """Bilinear resize of a (C, H, W) array using half-pixel-centre mapping."""
    C, H, W = data.shape
    if (out_h, out_w) == (H, W):
        return data.copy()
    ys = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    xs = np.clip(xs, 0.0, W - 1.0)
    ys = np.clip(ys, 0.0, H - 1.0)
    gx, gy = np.meshgrid(xs, ys)
    vals, _ = sample_many(data, gx, gy)
    return vals


# --- file formats -------------------------------------------------------------

def write_pfm(path, data):
    """Write a PFM (portable float map): 'Pf' single channel or 'PF' RGB.

    Little-endian (negative scale), scanlines bottom to top, float32 payload.
    """
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 2:
        header, payload = b"Pf", a[::-1]
    elif a.ndim == 3 and a.shape[0] == 3:
        header, payload = b"PF", np.moveaxis(a, 0, 2)[::-1]
    else:
        raise ValueError("PFM supports (H, W) or (3, H, W) data")
    h, w = a.shape[-2:]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_pfm(path):
    """Read a PFM file; returns (H, W) or (3, H, W) float64."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(count * 4), dtype=dtype, count=count)
    if header == b"Pf":
        return raw.reshape(h, w)[::-1].astype(float)
    return np.moveaxis(raw.reshape(h, w, 3)[::-1], 2, 0).astype(float)


def write_png(path, raster: Raster):
    """Write an 8-bit grayscale or RGB PNG from values in [0, 1]."""
    d = np.clip(raster.data, 0.0, 1.0)
    q = np.round(d * 255.0).astype(np.uint8)
    if raster.channels == 1:
        img = Image.fromarray(q[0], mode="L")
    elif raster.channels == 3:
        img = Image.fromarray(np.moveaxis(q, 0, 2), mode="RGB")
    else:
        raise ValueError("PNG output supports 1 or 3 channels")
    img.save(path, format="PNG")


def read_png(path) -> Raster:
    """Read an 8-bit PNG into a raster with values in [0, 1]."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("RGBA", "P") else "L")
    a = np.asarray(img, dtype=float) / 255.0
    if a.ndim == 2:
        return Raster(a[None])
    return Raster(np.moveaxis(a, 2, 0))
