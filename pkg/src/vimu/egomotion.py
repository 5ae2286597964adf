"""Camera ego-motion from depth maps, and world-frame motion composition.

Depth maps are back-projected to colored point clouds, pixels inside human
bounding boxes are masked out, and consecutive background clouds are
registered with a colored ICP whose residual blends a point-to-plane term
with a photometric term on the target's tangent plane. The per-frame
alignments are accumulated so a static scene point keeps constant
coordinates in the frame-0 camera frame, which defines the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .calib3d import CalibratedPose, CameraIntrinsics
from .geometry import RigidTransform, so3_exp
from .trackio import BBox


@dataclass
class DepthMap:
    """Row-major metric depth; NaN or non-positive entries are invalid."""

    depth: np.ndarray  # (H, W) float

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class ColoredPointCloud:
    points: np.ndarray            # (M, 3) meters
    colors: np.ndarray            # (M, 3) RGB in [0, 1]
    normals: np.ndarray | None = None  # (M, 3) unit vectors
    pixels: np.ndarray | None = None   # (M, 2) source pixel (x, y)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class MotionTrack3D:
    """World-frame joint motion of one tracked person."""

    track_id: int
    clip_id: str
    fps: float
    joints_world: np.ndarray                 # (T, N, 3)
    joint_orientations: np.ndarray | None = None  # (T, N, 3, 3), filled by imusynth
    label: str = ""
    subject: str = ""


@dataclass
class IcpParams:
    delta: float = 0.968           # weight of the geometric term in [0, 1]
    max_iterations: int = 50
    tolerance: float = 1e-6        # relative residual change
    max_corr_factor: float = 3.0   # gate: factor x median target point spacing
    trim_factor: float = 3.0       # adaptive gate: factor x median current distance
    min_correspondences: int = 10
    normal_k: int = 30
    # reject pairs whose normals disagree by more than this angle (degrees);
    # None disables the check. Suppresses cross-surface matches near creases.
    normal_gate_deg: float | None = None


@dataclass
class IcpResult:
    transform: RigidTransform
    residual: float
    n_correspondences: int
    converged: bool
    ok: bool
    # (before, after) objective per iteration at fixed correspondences
    objective_trace: list[tuple[float, float]] = field(default_factory=list)


def backproject(depth: DepthMap, color: np.ndarray, intr: CameraIntrinsics,
                stride: int = 4) -> ColoredPointCloud:
    """Back-project a depth map to a colored cloud on a pixel stride grid.

    Each valid pixel (x, y) with depth Z maps to
    ((x - px) Z / fx, (y - py) Z / fy, Z).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if color.shape[:2] != depth.depth.shape:
        raise ValueError("depth/color dimension mismatch")
    d = depth.depth[::stride, ::stride]
    ys, xs = np.mgrid[0:depth.height:stride, 0:depth.width:stride]
    valid = np.isfinite(d) & (d > 0)
    z = d[valid]
    x = xs[valid].astype(float)
    y = ys[valid].astype(float)
    points = np.stack([(x - intr.px) * z / intr.fx,
                       (y - intr.py) * z / intr.fy,
                       z], axis=1)
    cols = color[::stride, ::stride][valid]
    if cols.dtype == np.uint8:
        cols = cols.astype(float) / 255.0
    return ColoredPointCloud(points=points, colors=cols,
                             pixels=np.stack([x, y], axis=1))


def mask_foreground(pixels: np.ndarray, bboxes: Sequence[BBox], margin: float = 0.0) -> np.ndarray:
    """Keep-mask over cloud points: False inside any margin-expanded bbox."""
    keep = np.ones(pixels.shape[0], dtype=bool)
    for box in bboxes:
        b = box.expand(margin)
        inside = ((pixels[:, 0] >= b.x_min) & (pixels[:, 0] <= b.x_max) &
                  (pixels[:, 1] >= b.y_min) & (pixels[:, 1] <= b.y_max))
        keep &= ~inside
    return keep


def select_points(cloud: ColoredPointCloud, keep: np.ndarray) -> ColoredPointCloud:
    return ColoredPointCloud(
        points=cloud.points[keep],
        colors=cloud.colors[keep],
        normals=None if cloud.normals is None else cloud.normals[keep],
        pixels=None if cloud.pixels is None else cloud.pixels[keep],
    )


def neighborhood_eigenvalues(points: np.ndarray, k: int = 12) -> np.ndarray:
    """Ascending covariance eigenvalues (M, 3) of each point's k-neighborhood."""
    m = points.shape[0]
    if m < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, have {m}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    nbr = points[idx]
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    return np.linalg.eigvalsh(cov)


def planarity_scores(points: np.ndarray, k: int = 12) -> np.ndarray:
    """Per-point flatness: ratio of the two smallest covariance eigenvalues.

    Near zero on locally planar neighborhoods; grows where a neighborhood
    spans a crease or depth discontinuity. Useful for discarding seam points
    whose normals would bias point-to-plane registration.
    """
    w = neighborhood_eigenvalues(points, k)
    return w[:, 0] / np.clip(w[:, 1], 1e-30, None)


def surface_point_mask(points: np.ndarray, k: int = 12, max_flatness: float = 1e-4,
                       min_spread: float = 0.05) -> np.ndarray:
    """Keep points whose neighborhood is a well-sampled plane patch.

    Rejects crease/seam neighborhoods (flatness = w0/w1 above max_flatness)
    and degenerate line-like neighborhoods (w1/w2 below min_spread), both of
    which yield unreliable normals.
    """
    w = neighborhood_eigenvalues(points, k)
    flat = w[:, 0] / np.clip(w[:, 1], 1e-30, None)
    spread = w[:, 1] / np.clip(w[:, 2], 1e-30, None)
    return (flat < max_flatness) & (spread > min_spread)


def estimate_normals(cloud: ColoredPointCloud, k: int = 30) -> ColoredPointCloud:
    """Per-point normals from the k nearest neighbors, oriented camera-facing.

    The normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance, flipped so it points toward the camera origin.
    """
    m = len(cloud)
    if m < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, have {m}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k + 1)
    nbr = cloud.points[idx]                       # (M, k+1, 3)
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    flip = np.einsum("mi,mi->m", normals, cloud.points) > 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return ColoredPointCloud(points=cloud.points, colors=cloud.colors,
                             normals=normals, pixels=cloud.pixels)


def _gray(colors: np.ndarray) -> np.ndarray:
    return colors.mean(axis=1)


def _color_gradients(points: np.ndarray, gray: np.ndarray, normals: np.ndarray,
                     tree: cKDTree, k: int) -> np.ndarray:
    """Tangent-plane intensity gradient per point (least squares over neighbors)."""
    _, idx = tree.query(points, k=min(k + 1, points.shape[0]))
    nbr = points[idx]
    dp = nbr - points[:, None, :]
    # project neighbor offsets onto the tangent plane
    dp = dp - np.einsum("mkj,mj->mk", dp, normals)[:, :, None] * normals[:, None, :]
    dg = gray[idx] - gray[:, None]
    A = np.einsum("mki,mkj->mij", dp, dp) + 1e-9 * np.eye(3)
    b = np.einsum("mki,mk->mi", dp, dg)
    grad = np.linalg.solve(A, b[..., None])[..., 0]
    # keep the gradient tangent
    grad -= np.einsum("mi,mi->m", grad, normals)[:, None] * normals
    return grad


def median_spacing(points: np.ndarray) -> float:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def colored_icp(source: ColoredPointCloud, target: ColoredPointCloud,
                params: IcpParams | None = None,
                init: RigidTransform | None = None) -> IcpResult:
    """Align `source` (frame t) onto `target` (frame t-1) by colored ICP.

    Minimizes delta * point-to-plane + (1 - delta) * photometric residuals by
    Gauss-Newton over SE(3), re-finding nearest-neighbor correspondences each
    iteration. Fails (ok=False, identity transform) when fewer than
    `min_correspondences` survive the distance gate.
    """
    params = params or IcpParams()
    if not (0.0 <= params.delta <= 1.0):
        raise ValueError("delta must be in [0, 1]")
    if source.normals is None or target.normals is None:
        raise ValueError("both clouds need normals; call estimate_normals first")

    tgt_pts = target.points
    tgt_nrm = target.normals
    tgt_gray = _gray(target.colors)
    src_gray = _gray(source.colors)
    tree = cKDTree(tgt_pts)
    spacing = median_spacing(tgt_pts)
    use_color = params.delta < 1.0
    grads = (_color_gradients(tgt_pts, tgt_gray, tgt_nrm, tree, params.normal_k)
             if use_color else None)

    R = np.eye(3) if init is None else init.R.copy()
    T = np.zeros(3) if init is None else init.T.copy()
    sqrt_g = np.sqrt(params.delta)
    sqrt_c = np.sqrt(1.0 - params.delta)
    prev_obj = None
    converged = False
    n_corr = 0
    trace: list[tuple[float, float]] = []

    cos_gate = (np.cos(np.deg2rad(params.normal_gate_deg))
                if params.normal_gate_deg is not None else None)

    for _ in range(params.max_iterations):
        xs = source.points @ R.T + T
        dist, j = tree.query(xs)
        gate = max(params.max_corr_factor * spacing,
                   params.trim_factor * float(np.median(dist)))
        sel = dist <= gate
        if cos_gate is not None:
            rotated_nrm = source.normals @ R.T
            agree = np.abs(np.einsum("mi,mi->m", rotated_nrm, tgt_nrm[j])) >= cos_gate
            sel &= agree
        n_corr = int(sel.sum())
        if n_corr < params.min_correspondences:
            return IcpResult(RigidTransform(), np.inf, n_corr, False, False, trace)

        x = xs[sel]
        q = tgt_pts[j[sel]]
        n = tgt_nrm[j[sel]]

        def objective(xx):
            rg = np.einsum("mi,mi->m", xx - q, n)
            total = params.delta * float(rg @ rg)
            if use_color:
                f = xx - np.einsum("mi,mi->m", xx - q, n)[:, None] * n
                rc = tgt_gray[j[sel]] + np.einsum("mi,mi->m", grads[j[sel]], f - q) - src_gray[sel]
                total += (1.0 - params.delta) * float(rc @ rc)
            return total / n_corr

        obj0 = objective(x)

        # build the stacked weighted GN system
        rows = []
        resids = []
        rg = np.einsum("mi,mi->m", x - q, n)
        Jg = np.concatenate([np.cross(x, n), n], axis=1) * sqrt_g
        rows.append(Jg)
        resids.append(rg * sqrt_g)
        if use_color:
            d_t = grads[j[sel]]
            f = x - rg[:, None] * n
            rc = tgt_gray[j[sel]] + np.einsum("mi,mi->m", d_t, f - q) - src_gray[sel]
            # dr/dx = d^T (I - n n^T) = d^T since d is tangent
            Jc = np.concatenate([np.cross(x, d_t), d_t], axis=1) * sqrt_c
            rows.append(Jc)
            resids.append(rc * sqrt_c)
        J = np.vstack(rows)
        r = np.concatenate(resids)
        A = J.T @ J
        g = J.T @ r
        try:
            xi = np.linalg.lstsq(A, -g, rcond=1e-12)[0]
        except np.linalg.LinAlgError:
            break

        # step-halving keeps the fixed-correspondence objective non-increasing
        step = 1.0
        for _ in range(12):
            dR = so3_exp(step * xi[:3])
            R_new = dR @ R
            T_new = dR @ T + step * xi[3:]
            x_new = source.points[sel] @ R_new.T + T_new
            obj1 = objective(x_new)
            if obj1 <= obj0 + 1e-18:
                break
            step *= 0.5
        else:
            trace.append((obj0, obj0))
            converged = True
            break
        R, T = R_new, T_new
        trace.append((obj0, obj1))
        if prev_obj is not None and abs(prev_obj - obj1) <= params.tolerance * max(prev_obj, 1e-30):
            converged = True
            prev_obj = obj1
            break
        prev_obj = obj1

    residual = prev_obj if prev_obj is not None else (trace[-1][1] if trace else np.inf)
    return IcpResult(RigidTransform(R, T), float(residual), n_corr, converged, True, trace)


def compose_track(calibrated: Sequence[CalibratedPose], ego: Sequence[RigidTransform],
                  track_id: int = 0, clip_id: str = "", fps: float = 30.0,
                  label: str = "", subject: str = "") -> MotionTrack3D:
    """Accumulate per-frame ego-motion into world-frame joint positions.

    `ego[t]` must align the frame-t cloud onto the frame-(t-1) cloud (the
    colored_icp output); ego[0] is ignored and treated as identity. The
    frame-0 camera frame defines the world frame, so a static scene point
    keeps constant world coordinates under camera motion.
    """
    if len(calibrated) != len(ego):
        raise ValueError("calibrated poses and ego transforms must align 1:1")
    world = RigidTransform.identity()
    joints = []
    for t, pose in enumerate(calibrated):
        if t > 0:
            world = world.compose(ego[t])
        joints.append(pose.joints @ world.R.T + world.T)
    return MotionTrack3D(track_id=track_id, clip_id=clip_id, fps=fps,
                         joints_world=np.stack(joints), label=label, subject=subject)
