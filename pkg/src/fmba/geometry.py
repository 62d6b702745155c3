"""SE(3)/se(3) operations, camera intrinsics and pinhole projection.

Twists are 6-vectors ordered [omega, v]: rotation first (axis-angle, radians),
translation second (scene units). Pose Jacobians and perturbations use the
left convention exp(delta) @ T throughout, so they are independent of how the
current rotation is parameterized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Camera-frame depth below this counts as behind the camera; callers mask.
BEHIND_EPS = 1e-6

_ORTHO_TOL = 1e-9


def skew(w):
    """3x3 cross-product matrix of a 3-vector: skew(w) @ x == cross(w, x)."""
    w = np.asarray(w, dtype=float)
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


@dataclass(frozen=True)
class Twist:
    """se(3) element: rotation part omega (||omega|| < pi) and translation v."""

    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).reshape(3).copy()
        v = np.asarray(self.v, dtype=float).reshape(3).copy()
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(v))):
            raise ValueError("twist components must be finite")
        if np.linalg.norm(omega) >= np.pi:
            raise ValueError("rotation magnitude must be < pi (principal branch)")
        omega.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "v", v)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_array(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_array(self):
        return np.concatenate([self.omega, self.v])

    def norm(self):
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: x -> R @ x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3).copy()
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.linalg.norm(R.T @ R - np.eye(3)) > _ORTHO_TOL:
            raise ValueError("R is not orthogonal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("R must have determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def matrix34(self):
        return np.hstack([self.R, self.t.reshape(3, 1)])

    def matrix44(self):
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.t
        return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def scaled(self, s):
        """Intrinsics of the image resized by factor s."""
        return CameraIntrinsics(s * self.fx, s * self.fy, s * self.cx, s * self.cy)

    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])


class Pixel(NamedTuple):
    """Continuous image coordinate; homogeneous extension is (x, y, 1)."""

    x: float
    y: float


class Projection(NamedTuple):
    pixel: Pixel
    depth: float   # transformed camera-frame depth z'
    valid: bool    # False when z' <= BEHIND_EPS


def _rot_coeffs(s):
    """Rodrigues coefficients a, b, c as functions of s = theta^2.

    a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3, with series branches
    below s = 1e-8 where the closed forms lose precision.
    """
    s = np.asarray(s, dtype=float)
    small = s < 1e-8
    ssafe = np.where(small, 1.0, s)
    t = np.sqrt(ssafe)
    a = np.where(small, 1.0 - s / 6.0 + s * s / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - s / 24.0 + s * s / 720.0, (1.0 - np.cos(t)) / ssafe)
    c = np.where(small, 1.0 / 6.0 - s / 120.0 + s * s / 5040.0,
                 (t - np.sin(t)) / (ssafe * t))
    return a, b, c


def _rot_coeffs_ds(s):
    """Derivatives of the Rodrigues coefficients with respect to s = theta^2."""
    s = np.asarray(s, dtype=float)
    small = s < 1e-6
    ssafe = np.where(small, 1.0, s)
    t = np.sqrt(ssafe)
    sin_t, cos_t = np.sin(t), np.cos(t)
    da = np.where(small, -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
                  (t * cos_t - sin_t) / (2.0 * ssafe * t))
    db = np.where(small, -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
                  (t * sin_t - 2.0 * (1.0 - cos_t)) / (2.0 * ssafe * ssafe))
    dc = np.where(small, -1.0 / 120.0 + s / 2520.0 - s * s / 120960.0,
                  (3.0 * sin_t - t * (2.0 + cos_t)) / (2.0 * ssafe * ssafe * t))
    return da, db, dc


def se3_exp(xi: Twist) -> SE3Pose:
    """Exponential map se(3) -> SE(3) via the Rodrigues closed form."""
    omega, v = xi.omega, xi.v
    s = float(omega @ omega)
    a, b, c = _rot_coeffs(s)
    K = skew(omega)
    K2 = K @ K
    R = np.eye(3) + a * K + b * K2
    V = np.eye(3) + b * K + c * K2
    return SE3Pose(R, V @ v)


def se3_exp_array(xi) -> SE3Pose:
    return se3_exp(Twist.from_array(xi))


def se3_log(T: SE3Pose) -> Twist:
    """Logarithm map SE(3) -> se(3); inverse of se3_exp on the principal branch.

    The angle-pi neighbourhood extracts the axis from R + I, which stays well
    conditioned where the skew-part formula degenerates.
    """
    R, t = T.R, T.t
    svec = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos_t = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    sin_t = np.linalg.norm(svec)
    theta = float(np.arctan2(sin_t, cos_t))

    if theta < 1e-6:
        s = theta * theta
        omega = svec * (1.0 + s / 6.0 + 7.0 * s * s / 360.0)
    elif theta > np.pi - 1e-3:
        # Axis extraction: R + I ~ 2 n n^T near theta = pi.
        B = R + np.eye(3)
        j = int(np.argmax(np.diag(B)))
        n = B[:, j] / np.linalg.norm(B[:, j])
        if sin_t > 1e-12 and n @ svec < 0:
            n = -n
        omega = theta * n
    else:
        omega = svec * (theta / sin_t)

    s = float(omega @ omega)
    a, b, c = _rot_coeffs(s)
    K = skew(omega)
    # V^{-1} = I - K/2 + e(s) K^2 with e = (1 - a/(2b)) / s.
    if s < 1e-8:
        e = 1.0 / 12.0 + s / 720.0 + s * s / 30240.0
    else:
        e = (1.0 - a / (2.0 * b)) / s
    Vinv = np.eye(3) - 0.5 * K + e * (K @ K)
    return Twist(omega, Vinv @ t)


def se3_exp_vjp(xi, rbar, tbar):
    """Vector-Jacobian product of se3_exp.

    Given gradients of a scalar with respect to the entries of R and t of
    exp(xi), returns the gradient with respect to the 6 twist coordinates.
    """
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    s = float(omega @ omega)
    a, b, c = _rot_coeffs(s)
    da, db, dc = _rot_coeffs_ds(s)
    K = skew(omega)
    K2 = K @ K
    V = np.eye(3) + b * K + c * K2

    rbar = np.asarray(rbar, dtype=float).reshape(3, 3)
    tbar = np.asarray(tbar, dtype=float).reshape(3)

    grad = np.zeros(6)
    grad[3:] = V.T @ tbar
    for i in range(3):
        ei = np.zeros(3)
        ei[i] = 1.0
        Ei = skew(ei)
        EK = Ei @ K + K @ Ei
        ds_i = 2.0 * omega[i]
        dR = (da * ds_i) * K + a * Ei + (db * ds_i) * K2 + b * EK
        dV = (db * ds_i) * K + b * Ei + (dc * ds_i) * K2 + c * EK
        grad[i] = float(np.sum(rbar * dR) + tbar @ (dV @ v))
    return grad


def euler_pose(angles, t, depth_mean) -> SE3Pose:
    """Pose from Euler angles (intrinsic Z*Y*X order) and depth-scaled translation.

    R = Rz(angles[2]) @ Ry(angles[1]) @ Rx(angles[0]); the returned translation
    is t / depth_mean, which aligns predicted translation scale to the depth.
    """
    if depth_mean <= 0:
        raise ValueError("depth_mean must be positive")
    ax, ay, az = (float(a) for a in np.asarray(angles, dtype=float).reshape(3))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return SE3Pose(Rz @ Ry @ Rx, np.asarray(t, dtype=float).reshape(3) / depth_mean)


def compose(A: SE3Pose, B: SE3Pose) -> SE3Pose:
    """Composition A * B: first apply B, then A."""
    return SE3Pose(A.R @ B.R, A.R @ B.t + A.t)


def invert(T: SE3Pose) -> SE3Pose:
    return SE3Pose(T.R.T, -T.R.T @ T.t)


def backproject_dirs(K: CameraIntrinsics, xs, ys):
    """Unit-depth ray directions K^{-1} (x, y, 1) for pixel coordinates."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    return np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)])


def project(K: CameraIntrinsics, T: SE3Pose, d, p: Pixel) -> Projection:
    """Project the depth-d backprojection of target pixel p into the T frame.

    Computes K T (d K^{-1} p~) with perspective division and reports the
    transformed camera-frame depth for visibility checks.
    """
    if not np.isfinite(d) or d <= 0:
        raise ValueError("depth must be positive and finite")
    if not (np.isfinite(p[0]) and np.isfinite(p[1])):
        raise ValueError("pixel coordinates must be finite")
    ray = backproject_dirs(K, p[0], p[1])
    X = T.R @ (d * ray) + T.t
    z = float(X[2])
    if z <= BEHIND_EPS:
        return Projection(Pixel(np.nan, np.nan), z, False)
    return Projection(
        Pixel(float(K.fx * X[0] / z + K.cx), float(K.fy * X[1] / z + K.cy)), z, True
    )


def project_jacobian(K: CameraIntrinsics, T: SE3Pose, d, p: Pixel):
    """Analytic Jacobians of the projected pixel.

    Returns (dp_dd, dp_dxi): the 2-vector derivative with respect to depth and
    the 2x6 derivative with respect to a left-multiplied twist exp(delta) @ T,
    columns ordered [omega, v].
    """
    ray = backproject_dirs(K, p[0], p[1])
    rd = T.R @ ray
    X = d * rd + T.t
    x, y, z = X
    if z <= BEHIND_EPS:
        raise ValueError("point is behind the camera")
    iz = 1.0 / z
    fx, fy = K.fx, K.fy
    Pmat = np.array([
        [fx * iz, 0.0, -fx * x * iz * iz],
        [0.0, fy * iz, -fy * y * iz * iz],
    ])
    dp_dd = Pmat @ rd
    dp_dxi = np.zeros((2, 6))
    dp_dxi[:, :3] = Pmat @ (-skew(X))
    dp_dxi[:, 3:] = Pmat
    return dp_dd, dp_dxi


# --- file formats -----------------------------------------------------------
# Pose files use the KITTI odometry convention: one line per frame, 12
# whitespace-separated numbers, row-major 3x4 [R|t].

def save_poses_kitti(path, poses):
    lines = []
    for T in poses:
        lines.append(" ".join(repr(float(v)) for v in T.matrix34().reshape(12)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_poses_kitti(path):
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = np.array([float(v) for v in line.split()])
            if vals.size != 12:
                raise ValueError(f"{path}: expected 12 numbers per line, got {vals.size}")
            M = vals.reshape(3, 4)
            R = M[:, :3]
            # Text files may carry rounded entries; snap to the nearest rotation.
            U, _, Vt = np.linalg.svd(R)
            Rn = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))]) @ Vt
            if np.linalg.norm(Rn - R) > 1e-6:
                raise ValueError(f"{path}: rotation block is not close to orthogonal")
            poses.append(SE3Pose(Rn, M[:, 3]))
    return poses


def save_intrinsics(path, K: CameraIntrinsics, width, height):
    payload = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
               "width": int(width), "height": int(height)}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_intrinsics(path):
    with open(path) as f:
        data = json.load(f)
    for key in ("fx", "fy", "cx", "cy", "width", "height"):
        if key not in data:
            raise ValueError(f"{path}: missing intrinsics field '{key}'")
    K = CameraIntrinsics(float(data["fx"]), float(data["fy"]),
                         float(data["cx"]), float(data["cy"]))
    return K, (int(data["width"]), int(data["height"]))
