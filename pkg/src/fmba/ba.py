"""The differentiable bundle-adjustment layer (forward pass).

State is the target frame's full-resolution depth map plus one 6-DoF relative
pose per source view; the target pose is pinned to identity to fix the gauge.
Each solver level works on the depth block-averaged to that level's
resolution, and depth updates are replicated back onto the full grid, so the
per-pixel depth block of the normal equations stays diagonal at every level.

The Levenberg-Marquardt damping factor is predicted per iteration by a small
MLP from the globally average-pooled residual. The iteration count is fixed
(no early exit) so the whole solve stays differentiable; `ba_grad` implements
the reverse pass over the recorded trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateProblemError
from .features import FeaturePyramid, intensity_pyramid
from .geometry import CameraIntrinsics, SE3Pose, Twist, se3_exp, se3_log
from .raster import (
    DepthMap,
    Raster,
    block_mean,
    sample_many_with_grad,
    upsample_nearest,
)

DEPTH_MIN = 1e-3        # clamp floor applied after every depth update
DIAG_CLAMP = 1e-8       # absolute floor for the entries of D = sqrt(diag(J^T J))
# Scale-aware floor: D entries are additionally clamped at DIAG_RMS_FRACTION
# times the RMS of their block's diagonal. A purely absolute floor leaves
# near-blind depth pixels (tiny feature gradient or shrinking 1/z^2
# observability) essentially undamped, and their Gauss-Newton targets e/J
# blow up; the relative floor bounds every step by the block's own scale.
DIAG_RMS_FRACTION = 0.1
BEHIND_EPS = 1e-6
DEFAULT_SCHEDULE = ((3, 6), (2, 6), (1, 6))   # coarse to fine, 6 each


@dataclass(frozen=True)
class BAState:
    """Optimization state: target depth map and source-view twists."""

    depth: DepthMap
    twists: np.ndarray    # (N, 6), rows [omega, v] mapping target -> source

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.twists, dtype=float))
        if t.ndim != 2 or t.shape[1] != 6:
            raise ValueError("twists must have shape (n_views, 6)")
        t.setflags(write=False)
        object.__setattr__(self, "twists", t)

    @property
    def n_views(self):
        return self.twists.shape[0]

    def poses(self):
        return [se3_exp(Twist(x[:3], x[3:])) for x in self.twists]


@dataclass(frozen=True)
class ViewSet:
    """Per-view pyramids: the anchor target plus the source views."""

    target: FeaturePyramid
    sources: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        chans = {self.target.channels} | {s.channels for s in self.sources}
        if len(chans) != 1:
            raise ValueError("all views must share the pyramid channel count")

    @property
    def channels(self):
        return self.target.channels

    @property
    def n_sources(self):
        return len(self.sources)

    @classmethod
    def from_images(cls, target_img: Raster, source_imgs):
        """Intensity pyramids for the photometric error mode."""
        return cls(intensity_pyramid(target_img),
                   tuple(intensity_pyramid(s) for s in source_imgs))


@dataclass
class ResidualVector:
    """Stacked per-view, per-channel, per-pixel differences plus validity."""

    values: np.ndarray   # (N, C, h, w); masked entries are exactly zero
    mask: np.ndarray     # (N, h, w)
    level: int

    @property
    def n_valid(self):
        return int(self.mask.sum())

    def l2(self):
        return float(np.sqrt(np.sum(self.values ** 2)))

    def masked_fraction(self):
        return 1.0 - self.mask.mean()


@dataclass
class JacobianBlocks:
    """Analytic residual Jacobian, stored blockwise.

    jd holds the derivative of each residual with respect to its own pixel's
    level depth (depths of other pixels never enter a residual, which is the
    structural sparsity the Schur solve relies on); jxi holds the 6 pose
    columns per source view under a left-multiplied twist perturbation.
    """

    jd: np.ndarray       # (N, C, h, w)
    jxi: np.ndarray      # (N, C, h, w, 6)
    level: int


@dataclass
class LMStep:
    delta_depth: np.ndarray    # (h, w) at the level resolution
    delta_twists: np.ndarray   # (N, 6)
    level: int
    stalled: bool = False

    def norm(self):
        return float(np.sqrt(np.sum(self.delta_depth ** 2)
                             + np.sum(self.delta_twists ** 2)))


# --- damping MLP -----------------------------------------------------------------

def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols] if rows >= cols else q[:cols, :rows].T


@dataclass
class DampingMLP:
    """Three stacked fully connected layers predicting the damping factor.

    Input is the channel-wise global average pool of the residual; the output
    rectifier keeps lambda non-negative for any weights.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    seed: int = 0

    @classmethod
    def seeded(cls, in_dim, hidden=128, seed=0):
        # Orthogonal hidden weights scaled 0.1 and output bias 1 start the
        # solver near lambda = 1, a safe LM regime.
        rng = np.random.default_rng(seed)
        return cls(
            w1=0.1 * _orthogonal(rng, hidden, in_dim), b1=np.zeros(hidden),
            w2=0.1 * _orthogonal(rng, hidden, hidden), b2=np.zeros(hidden),
            w3=0.1 * _orthogonal(rng, 1, hidden), b3=np.ones(1),
            seed=int(seed),
        )

    @property
    def in_dim(self):
        return self.w1.shape[1]

    def forward(self, pooled, keep=False):
        z1 = self.w1 @ pooled + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = self.w2 @ h1 + self.b2
        h2 = np.maximum(z2, 0.0)
        z3 = self.w3 @ h2 + self.b3
        lam = float(max(z3[0], 0.0))
        if keep:
            return lam, (pooled, z1, h1, z2, h2, z3)
        return lam

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def flatten(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        out, k = [], 0
        for p in self.params():
            out.append(flat[k:k + p.size].reshape(p.shape).copy())
            k += p.size
        if k != flat.size:
            raise ValueError("flat parameter vector has wrong length")
        return DampingMLP(*out, seed=self.seed)


def save_mlp(path_bin, path_json, mlp: DampingMLP):
    flat = mlp.flatten().astype("<f4")
    with open(path_bin, "wb") as f:
        f.write(flat.tobytes())
    meta = {"seed": mlp.seed,
            "layers": [list(p.shape) for p in mlp.params()],
            "activation": "relu"}
    with open(path_json, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_mlp(path_bin, path_json) -> DampingMLP:
    with open(path_json) as f:
        meta = json.load(f)
    flat = np.frombuffer(open(path_bin, "rb").read(), dtype="<f4").astype(float)
    shapes = [tuple(s) for s in meta["layers"]]
    out, k = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[k:k + n].reshape(s).copy())
        k += n
    if k != flat.size:
        raise ValueError(f"{path_bin}: payload does not match sidecar shapes")
    return DampingMLP(*out, seed=int(meta.get("seed", 0)))


def predict_lambda(residual: ResidualVector, mlp: DampingMLP):
    """Damping factor from the masked global average pool of the residual."""
    pooled, n_valid = _gap(residual.values, residual.mask)
    if n_valid == 0:
        raise DegenerateProblemError("residual is fully masked")
    return mlp.forward(pooled)


def _gap(values, mask):
    n_valid = int(mask.sum())
    if n_valid == 0:
        return np.zeros(values.shape[1]), 0
    pooled = values.sum(axis=(0, 2, 3)) / n_valid
    return pooled, n_valid


# --- residual and Jacobian --------------------------------------------------------

def level_intrinsics(K: CameraIntrinsics, level):
    return K.scaled(1.0 / (2 ** level))


def _pixel_grid(K_l, h, w):
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays = np.stack([(xs - K_l.cx) / K_l.fx, (ys - K_l.cy) / K_l.fy,
                     np.ones_like(xs)])
    return rays


def _view_forward(dl, R, t, feat, K_l, rays):
    """Warp geometry plus sampled features and residual inputs for one view."""
    rd = np.tensordot(R, rays, axes=(1, 0))           # (3, h, w)
    Xs = dl * rd + t[:, None, None]
    x, y, z = Xs
    zvalid = z > BEHIND_EPS
    zsafe = np.where(zvalid, z, 1.0)
    iz = 1.0 / zsafe
    px = K_l.fx * x * iz + K_l.cx
    py = K_l.fy * y * iz + K_l.cy
    px = np.where(zvalid, px, -1.0)
    py = np.where(zvalid, py, -1.0)
    val, gfx, gfy, inb = sample_many_with_grad(feat, px, py)
    valid = zvalid & inb
    return {
        "rd": rd, "Xs": Xs, "iz": iz, "px": px, "py": py,
        "val": val, "gfx": gfx, "gfy": gfy, "valid": valid,
    }


def _level_cache(depth_full, Rs, ts, views: ViewSet, K: CameraIntrinsics, level):
    factor = 2 ** level
    tgt = views.target.level(level)
    h, w = tgt.shape[1:]
    if depth_full.shape != (h * factor, w * factor):
        raise ValueError(
            f"depth {depth_full.shape} inconsistent with level {level} grid {h}x{w}")
    K_l = level_intrinsics(K, level)
    dl = block_mean(depth_full, factor)
    rays = _pixel_grid(K_l, h, w)
    per_view = []
    for i, pyr in enumerate(views.sources):
        pv = _view_forward(dl, Rs[i], ts[i], pyr.level(level), K_l, rays)
        pv["e"] = (pv["val"] - tgt) * pv["valid"]
        per_view.append(pv)
    return {
        "level": level, "factor": factor, "K_l": K_l, "dl": dl, "rays": rays,
        "tgt": tgt, "views": per_view, "h": h, "w": w,
    }


def _residual_from_cache(cache) -> ResidualVector:
    values = np.stack([pv["e"] for pv in cache["views"]])
    mask = np.stack([pv["valid"] for pv in cache["views"]])
    return ResidualVector(values, mask, cache["level"])


def _jacobian_from_cache(cache) -> JacobianBlocks:
    K_l = cache["K_l"]
    fx, fy = K_l.fx, K_l.fy
    n = len(cache["views"])
    c = cache["tgt"].shape[0]
    h, w = cache["h"], cache["w"]
    jd = np.zeros((n, c, h, w))
    jxi = np.zeros((n, c, h, w, 6))
    for i, pv in enumerate(cache["views"]):
        x, y, z = pv["Xs"]
        iz = pv["iz"]
        rd = pv["rd"]
        valid = pv["valid"]
        au, cu = fx * iz, -fx * x * iz * iz
        av, cv = fy * iz, -fy * y * iz * iz
        dpx_dd = au * rd[0] + cu * rd[2]
        dpy_dd = av * rd[1] + cv * rd[2]
        # Pose columns [omega, v] of the projected pixel.
        dpx = np.stack([-fx * x * y * iz * iz, fx * (1.0 + x * x * iz * iz),
                        -fx * y * iz, au, np.zeros_like(au), cu])
        dpy = np.stack([-fy * (1.0 + y * y * iz * iz), fy * x * y * iz * iz,
                        fy * x * iz, np.zeros_like(av), av, cv])
        gfx = pv["gfx"] * valid
        gfy = pv["gfy"] * valid
        jd[i] = gfx * dpx_dd + gfy * dpy_dd
        jxi[i] = gfx[..., None] * np.moveaxis(dpx, 0, -1)[None] \
            + gfy[..., None] * np.moveaxis(dpy, 0, -1)[None]
    return JacobianBlocks(jd, jxi, cache["level"])


def _state_pose_arrays(state: BAState):
    Rs = np.stack([se3_exp(Twist(x[:3], x[3:])).R for x in state.twists])
    ts = np.stack([se3_exp(Twist(x[:3], x[3:])).t for x in state.twists])
    return Rs, ts


def feature_residual(state: BAState, views: ViewSet, K: CameraIntrinsics,
                     level) -> ResidualVector:
    """Feature-metric residual at one pyramid level.

    For each target pixel q and source view i the entry is
    F_i(project(T_i, d(q) * q)) - F_target(q), bilinearly sampled; projections
    behind the camera or outside the source raster are masked to exact zero.
    """
    Rs, ts = _state_pose_arrays(state)
    cache = _level_cache(state.depth.data, Rs, ts, views, K, level)
    res = _residual_from_cache(cache)
    if res.n_valid == 0:
        raise DegenerateProblemError(f"level {level}: all pixels masked")
    return res


def photometric_residual(state: BAState, target_img: Raster, source_imgs,
                         K: CameraIntrinsics, level) -> ResidualVector:
    """Same contract as feature_residual with raw intensities as features."""
    return feature_residual(state, ViewSet.from_images(target_img, source_imgs),
                            K, level)


def residual_jacobian(state: BAState, views: ViewSet, K: CameraIntrinsics,
                      level) -> JacobianBlocks:
    """Analytic Jacobian of feature_residual (chain rule through sampling)."""
    Rs, ts = _state_pose_arrays(state)
    cache = _level_cache(state.depth.data, Rs, ts, views, K, level)
    return _jacobian_from_cache(cache)


# --- LM step -----------------------------------------------------------------------

def _normal_blocks(residual: ResidualVector, jac: JacobianBlocks):
    e = residual.values
    jd, jxi = jac.jd, jac.jxi
    n = e.shape[0]
    hdd = np.sum(jd * jd, axis=(0, 1))                    # (h, w)
    gd = np.sum(jd * e, axis=(0, 1))
    hdp = np.einsum("ichw,ichwk->hwik", jd, jxi)          # (h, w, N, 6)
    hpp = np.einsum("ichwa,ichwb->iab", jxi, jxi)         # (N, 6, 6)
    gp = np.einsum("ichwa,ichw->ia", jxi, e)              # (N, 6)
    return hdd, gd, hdp, hpp, gp, n


def _damping_floors(hdd, diag_p):
    """Squared floors for the depth and pose damping diagonals."""
    floor_d = max(DIAG_CLAMP ** 2, DIAG_RMS_FRACTION ** 2 * float(hdd.mean()))
    floor_p = max(DIAG_CLAMP ** 2, DIAG_RMS_FRACTION ** 2 * float(diag_p.mean()))
    return floor_d, floor_p


def _solve_normal(hdd, gd, hdp, hpp, gp, lam):
    """Damped Schur-complement solve; returns (dd, dp, iA, S, rhs, stalled)."""
    n = hpp.shape[0]
    h, w = hdd.shape
    diag_p = np.einsum("iaa->ia", hpp)
    floor_d, floor_p = _damping_floors(hdd, diag_p)
    dsq_d = np.maximum(hdd, floor_d)
    dsq_p = np.maximum(diag_p, floor_p)

    a_dd = hdd + lam * dsq_d
    a_pp = hpp + lam * dsq_p[:, :, None] * np.eye(6)[None]

    iA = np.where(hdd > 0.0, 1.0 / np.where(hdd > 0.0, a_dd, 1.0), 0.0).ravel()
    M = hdp.reshape(h * w, n * 6)
    S = np.zeros((n * 6, n * 6))
    for i in range(n):
        S[i * 6:(i + 1) * 6, i * 6:(i + 1) * 6] = a_pp[i]
    S = S - M.T @ (iA[:, None] * M)
    rhs = -gp.ravel() + M.T @ (iA * gd.ravel())
    try:
        dp = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        dp = None
    if dp is None or not np.all(np.isfinite(dp)):
        zero_d = np.zeros_like(hdd)
        return zero_d, np.zeros((n, 6)), iA, S, rhs, True
    dd = (-iA * (gd.ravel() + M @ dp)).reshape(h, w)
    return dd, dp.reshape(n, 6), iA, S, rhs, False


def lm_step(residual: ResidualVector, jac: JacobianBlocks, lam) -> LMStep:
    """One damped step: solve (J^T J + lam D^T D) delta = -J^T E.

    D is sqrt(diag(J^T J)) with entries clamped below at 1e-8. The per-pixel
    depth block is eliminated by the Schur complement, the reduced pose system
    is solved densely and depths are back-substituted. A singular reduced
    system yields a zero step flagged as stalled.
    """
    if lam < 0:
        raise ValueError("damping factor must be non-negative")
    if residual.level != jac.level:
        raise ValueError("residual and Jacobian levels differ")
    hdd, gd, hdp, hpp, gp, _ = _normal_blocks(residual, jac)
    dd, dp, _, _, _, stalled = _solve_normal(hdd, gd, hdp, hpp, gp, lam)
    return LMStep(dd, dp, residual.level, stalled)


def apply_update(state: BAState, step: LMStep) -> BAState:
    """Additive depth update (clamped at 1e-3) and left exp-composed poses."""
    factor = 2 ** step.level
    new_depth = state.depth.data + upsample_nearest(step.delta_depth, factor)
    new_depth = np.maximum(new_depth, DEPTH_MIN)
    new_twists = np.empty_like(state.twists)
    for i in range(state.n_views):
        old = se3_exp(Twist(state.twists[i, :3], state.twists[i, 3:]))
        upd = se3_exp(Twist(step.delta_twists[i, :3], step.delta_twists[i, 3:]))
        new = SE3Pose(upd.R @ old.R, upd.R @ old.t + upd.t)
        new_twists[i] = se3_log(new).as_array()
    return BAState(DepthMap(new_depth), new_twists)


# --- fixed-iteration solve ------------------------------------------------------------

@dataclass
class IterRecord:
    level: int
    iteration: int          # index within the level
    global_iteration: int
    lam: float
    residual_l2: float
    masked_fraction: float
    step_norm: float
    stalled: bool

    def to_json(self):
        return json.dumps({
            "level": self.level, "iter": self.iteration,
            "lambda": self.lam, "residual_l2": self.residual_l2,
            "masked_fraction": self.masked_fraction,
            "step_norm": self.step_norm,
        }, sort_keys=True)


@dataclass
class SolveTrace:
    """Everything the reverse pass needs: per-iteration state snapshots.

    Snapshots hold (depth, Rs, ts) at the start of each iteration; the
    backward pass recomputes each iteration's intermediates from its snapshot.
    """

    schedule: tuple
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)   # (depth, Rs, ts) tuples
    init_twists: np.ndarray = None
    views: ViewSet = None
    K: CameraIntrinsics = None
    mlp: DampingMLP = None
    final: tuple = None     # (depth, Rs, ts)

    def __len__(self):
        return len(self.records)

    def lambdas(self):
        return np.array([r.lam for r in self.records])

    def dump_jsonl(self, path):
        with open(path, "w") as f:
            for r in self.records:
                f.write(r.to_json() + "\n")


def _iter_forward(depth_full, Rs, ts, views, K, level, mlp, want_cache=False):
    """One LM iteration at one level; optionally keeps all intermediates."""
    cache = _level_cache(depth_full, Rs, ts, views, K, level)
    residual = _residual_from_cache(cache)
    n_valid = residual.n_valid
    if n_valid == 0:
        raise DegenerateProblemError(
            f"level {level}: residual fully masked during solve")
    pooled = residual.values.sum(axis=(0, 2, 3)) / n_valid
    lam, mlp_cache = mlp.forward(pooled, keep=True)
    jac = _jacobian_from_cache(cache)
    hdd, gd, hdp, hpp, gp, _ = _normal_blocks(residual, jac)
    dd, dp, iA, S, rhs, stalled = _solve_normal(hdd, gd, hdp, hpp, gp, lam)

    factor = cache["factor"]
    raised = depth_full + upsample_nearest(dd, factor)
    new_depth = np.maximum(raised, DEPTH_MIN)
    new_Rs = np.empty_like(Rs)
    new_ts = np.empty_like(ts)
    exps = []
    for i in range(Rs.shape[0]):
        E = se3_exp(Twist(dp[i, :3], dp[i, 3:]))
        new_Rs[i] = E.R @ Rs[i]
        new_ts[i] = E.R @ ts[i] + E.t
        exps.append(E)

    step_norm = float(np.sqrt(np.sum(dd ** 2) + np.sum(dp ** 2)))
    out = {
        "depth": new_depth, "Rs": new_Rs, "ts": new_ts,
        "lam": lam, "residual_l2": residual.l2(),
        "masked_fraction": residual.masked_fraction(),
        "step_norm": step_norm, "stalled": stalled,
    }
    if want_cache:
        out["cache"] = {
            "level_cache": cache, "residual": residual, "jac": jac,
            "pooled": pooled, "n_valid": n_valid, "mlp_cache": mlp_cache,
            "lam": lam, "hdd": hdd, "gd": gd, "hdp": hdp, "hpp": hpp,
            "gp": gp, "iA": iA, "S": S, "rhs": rhs, "dd": dd, "dp": dp,
            "stalled": stalled, "clamp_pass": raised > DEPTH_MIN,
            "exps": exps, "Rs": Rs, "ts": ts, "depth": depth_full,
        }
    return out


def ba_solve(init: BAState, views: ViewSet, K: CameraIntrinsics,
             mlp: DampingMLP, schedule=DEFAULT_SCHEDULE):
    """Run the fixed iteration schedule (default: levels 3, 2, 1 with 6 each).

    Every scheduled iteration executes regardless of residual progress; the
    returned trace holds one record and one state snapshot per iteration.
    """
    if mlp.in_dim != views.channels:
        raise ValueError(
            f"MLP input dim {mlp.in_dim} != pyramid channels {views.channels}")
    depth = init.depth.data.copy()
    Rs, ts = _state_pose_arrays(init)
    trace = SolveTrace(schedule=tuple(schedule), init_twists=init.twists.copy(),
                       views=views, K=K, mlp=mlp)
    g = 0
    for level, iters in schedule:
        for it in range(iters):
            trace.snapshots.append((depth.copy(), Rs.copy(), ts.copy()))
            out = _iter_forward(depth, Rs, ts, views, K, level, mlp)
            depth, Rs, ts = out["depth"], out["Rs"], out["ts"]
            trace.records.append(IterRecord(
                level=level, iteration=it, global_iteration=g,
                lam=out["lam"], residual_l2=out["residual_l2"],
                masked_fraction=out["masked_fraction"],
                step_norm=out["step_norm"], stalled=out["stalled"]))
            g += 1
    trace.final = (depth.copy(), Rs.copy(), ts.copy())
    final_twists = np.stack([
        se3_log(SE3Pose(Rs[i], ts[i])).as_array() for i in range(Rs.shape[0])])
    return BAState(DepthMap(depth), final_twists), trace
