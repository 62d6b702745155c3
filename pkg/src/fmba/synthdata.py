"""Synthetic planar scenes with exact analytic ground truth.

Scenes are textured planes seen by a pinhole camera. Depth comes from exact
ray-plane intersection and image values are sampled from a band-limited
procedural texture through the plane's world parameterization, so rendered
ground truth carries no source-discretization error. The texture band limit
keeps bilinear interpolation error small enough for the solver to converge
from perturbed initializations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose, Twist, compose, invert, se3_exp
from .raster import DepthMap, Raster


@dataclass(frozen=True)
class SceneSpec:
    """Scene description: plane geometry, texture and camera trajectory.

    kind is one of 'fronto', 'slanted', 'step'. depth_near/depth_far give the
    target-view depth range ('fronto' uses depth_near only; 'step' uses them
    as the two plateau depths). trajectory holds one twist per frame, relative
    to the central target frame whose twist must be zero.
    """

    kind: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    depth_near: float
    depth_far: float
    texture_seed: int = 0
    n_waves: int = 16
    min_wavelength: float = 4.0   # scene units along the plane
    max_wavelength: float = 10.0
    step_split: float = 0.0       # world x of the depth step ('step' kind)
    trajectory: tuple = field(default_factory=tuple)  # per-frame 6-vectors

    def __post_init__(self):
        if self.kind not in ("fronto", "slanted", "step"):
            raise ValueError(f"unknown scene kind '{self.kind}'")
        if not (self.depth_near > 0 and self.depth_far >= self.depth_near):
            raise ValueError("need 0 < depth_near <= depth_far")
        if self.min_wavelength <= 0 or self.max_wavelength < self.min_wavelength:
            raise ValueError("invalid wavelength band")
        object.__setattr__(
            self, "trajectory",
            tuple(np.asarray(t, dtype=float).reshape(6) for t in self.trajectory))

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def n_frames(self):
        return len(self.trajectory)

    @property
    def target_index(self):
        return len(self.trajectory) // 2

    def to_json_dict(self):
        d = {k: getattr(self, k) for k in (
            "kind", "width", "height", "fx", "fy", "cx", "cy",
            "depth_near", "depth_far", "texture_seed", "n_waves",
            "min_wavelength", "max_wavelength", "step_split")}
        d["trajectory"] = [list(map(float, t)) for t in self.trajectory]
        return d

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        d["trajectory"] = tuple(np.asarray(t, dtype=float) for t in d["trajectory"])
        return cls(**d)


def save_scene_spec(path, spec: SceneSpec):
    with open(path, "w") as f:
        json.dump(spec.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        return SceneSpec.from_json_dict(json.load(f))


# --- texture -------------------------------------------------------------------

class _Texture:
    """Band-limited sum of random cosines, values strictly inside [0, 1]."""

    def __init__(self, spec: SceneSpec):
        rng = np.random.default_rng(spec.texture_seed)
        n = spec.n_waves
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        lam = np.exp(rng.uniform(np.log(spec.min_wavelength),
                                 np.log(spec.max_wavelength), n))
        freq = 1.0 / lam
        self.ku = 2.0 * np.pi * freq * np.cos(theta)
        self.kv = 2.0 * np.pi * freq * np.sin(theta)
        self.phase = rng.uniform(0.0, 2.0 * np.pi, n)
        amp = lam / lam.sum()
        self.amp = 0.45 * amp / np.abs(amp).sum()

    def __call__(self, u, v):
        u = np.asarray(u, dtype=float)[..., None]
        v = np.asarray(v, dtype=float)[..., None]
        waves = np.cos(u * self.ku + v * self.kv + self.phase)
        return 0.5 + waves @ self.amp


# --- planes --------------------------------------------------------------------

class _Plane:
    """Plane n . X = rho in the target camera frame, with in-plane axes."""

    def __init__(self, normal, rho):
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        if rho <= 0:
            raise ValueError("plane offset must be positive")
        self.n = n
        self.rho = float(rho)
        self.anchor = self.rho * n
        # In-plane orthonormal axes for the texture parameterization.
        up = np.array([0.0, 1.0, 0.0])
        if abs(n @ up) > 0.9:
            up = np.array([1.0, 0.0, 0.0])
        e1 = np.cross(up, n)
        e1 /= np.linalg.norm(e1)
        self.e1 = e1
        self.e2 = np.cross(n, e1)

    def intersect(self, Rt_rays, Rt_t):
        """Ray parameters of the intersection for view rays in target coords.

        Rt_rays is (3, H, W): ray directions rotated into the target frame;
        Rt_t is R^T t. Returns lambda with X_view = lambda * ray.
        """
        denom = np.tensordot(self.n, Rt_rays, axes=(0, 0))
        numer = self.rho + self.n @ Rt_t
        with np.errstate(divide="ignore"):
            lam = numer / denom
        return lam


def _scene_planes(spec: SceneSpec):
    if spec.kind == "fronto":
        return [_Plane([0.0, 0.0, 1.0], spec.depth_near)]
    if spec.kind == "step":
        return [_Plane([0.0, 0.0, 1.0], spec.depth_near),
                _Plane([0.0, 0.0, 1.0], spec.depth_far)]
    # Slanted: depth depth_near at the left image edge, depth_far at the right.
    xt_min = (0.0 - spec.cx) / spec.fx
    xt_max = (spec.width - 1.0 - spec.cx) / spec.fx
    zn, zf = spec.depth_near, spec.depth_far
    nx = (zf - zn) / (xt_min * zn - xt_max * zf)
    rho = (1.0 + nx * xt_min) * zn
    scale = 1.0 / np.linalg.norm([nx, 0.0, 1.0])
    return [_Plane([nx, 0.0, 1.0], rho * scale)]


def render_view(spec: SceneSpec, pose: SE3Pose):
    """Render the scene from the given pose (target -> view transform).

    Returns (image Raster with one channel in [0, 1], DepthMap of exact
    per-pixel depths in the view's frame). Raises if the plane falls behind
    the camera anywhere in the frame.
    """
    K = spec.intrinsics
    xs, ys = np.meshgrid(np.arange(spec.width, dtype=float),
                         np.arange(spec.height, dtype=float))
    rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)])
    Rt = pose.R.T
    Rt_rays = np.tensordot(Rt, rays, axes=(1, 0))
    Rt_t = Rt @ pose.t

    planes = _scene_planes(spec)
    tex = _Texture(spec)

    lam0 = planes[0].intersect(Rt_rays, Rt_t)
    if spec.kind == "step":
        # Pick the plane by the world x of the first-plane hit point.
        X0 = lam0 * Rt_rays - Rt_t[:, None, None]
        lam1 = planes[1].intersect(Rt_rays, Rt_t)
        use_far = X0[0] >= spec.step_split
        lam = np.where(use_far, lam1, lam0)
        plane_idx = use_far.astype(int)
    else:
        lam = lam0
        plane_idx = np.zeros_like(lam, dtype=int)

    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise ValueError("plane is behind the camera for this pose")

    X = lam * Rt_rays - Rt_t[:, None, None]
    img = np.zeros((spec.height, spec.width))
    for idx, plane in enumerate(planes):
        sel = plane_idx == idx
        if not np.any(sel):
            continue
        d = X[:, sel] - plane.anchor[:, None]
        img[sel] = tex(plane.e1 @ d, plane.e2 @ d)
    return Raster(img[None]), DepthMap(lam)


@dataclass(frozen=True)
class SequenceData:
    """A rendered tracklet: central target frame plus surrounding sources."""

    images: tuple          # Raster per frame
    depths: tuple          # DepthMap per frame
    poses: tuple           # SE3Pose per frame, mapping target -> frame
    twists: tuple          # 6-vectors matching poses
    target_index: int
    intrinsics: CameraIntrinsics

    @property
    def source_indices(self):
        return tuple(i for i in range(len(self.images)) if i != self.target_index)


def make_sequence(spec: SceneSpec, n=None) -> SequenceData:
    """Render an n-frame tracklet; the central frame is the target view."""
    if n is None:
        n = spec.n_frames
    if n not in (3, 5):
        raise ValueError("sequence length must be 3 or 5")
    if spec.n_frames != n:
        raise ValueError(f"scene trajectory has {spec.n_frames} frames, wanted {n}")
    centre = spec.target_index
    if np.linalg.norm(spec.trajectory[centre]) > 1e-12:
        raise ValueError("the central trajectory twist must be zero")
    images, depths, poses = [], [], []
    for xi in spec.trajectory:
        pose = se3_exp(Twist(xi[:3], xi[3:]))
        img, depth = render_view(spec, pose)
        images.append(img)
        depths.append(depth)
        poses.append(pose)
    return SequenceData(tuple(images), tuple(depths), tuple(poses),
                        tuple(spec.trajectory), centre, spec.intrinsics)


# --- standard scenes --------------------------------------------------------------

def default_scene(seed=0) -> SceneSpec:
    """Slanted-plane scene used by the convergence and training suites."""
    traj = (
        np.array([0.004, -0.006, 0.003, -0.45, 0.06, -0.03]),
        np.zeros(6),
        np.array([-0.003, 0.005, -0.004, 0.45, -0.05, 0.04]),
    )
    return SceneSpec(
        kind="slanted", width=64, height=64,
        fx=64.0, fy=64.0, cx=31.5, cy=31.5,
        depth_near=5.0, depth_far=20.0,
        texture_seed=seed, n_waves=16,
        min_wavelength=4.0, max_wavelength=10.0,
        trajectory=traj,
    )


def fixed_point_scene(seed=0) -> SceneSpec:
    """Fronto-parallel scene whose ground-truth warp is an exact 16px shift.

    fx * tx / z = 64 * 2.5 / 10 = 16 pixels, an integer at every pyramid
    scale, so intensity pyramids of the source views are exact shifted copies
    of the target's and the ground-truth residual vanishes identically.
    """
    traj = (
        np.array([0.0, 0.0, 0.0, -2.5, 0.0, 0.0]),
        np.zeros(6),
        np.array([0.0, 0.0, 0.0, 2.5, 0.0, 0.0]),
    )
    return SceneSpec(
        kind="fronto", width=64, height=64,
        fx=64.0, fy=64.0, cx=31.5, cy=31.5,
        depth_near=10.0, depth_far=10.0,
        texture_seed=seed, n_waves=16,
        min_wavelength=4.0, max_wavelength=10.0,
        trajectory=traj,
    )


def with_seed(spec: SceneSpec, seed) -> SceneSpec:
    return replace(spec, texture_seed=int(seed))


def relative_pose(seq: SequenceData, source_frame) -> SE3Pose:
    """T mapping target-frame points into the given source frame."""
    return compose(seq.poses[source_frame], invert(seq.poses[seq.target_index]))
