"""Camera intrinsics aggregation, PnP pose calibration, background pruning.

Places each person-centered 3D pose in the camera frame by minimizing the
reprojection error  sum_i || p2_i - (1/s) * project(R p3_i + T) ||^2  over a
rotation (axis-angle), translation, and a per-track scale, subject to R
being a proper rotation (guaranteed by the parameterization).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import RigidTransform, is_rotation, project_to_rotation, slerp, so3_exp
from .trackio import PersonTrack


@dataclass
class CameraIntrinsics:
    """Pinhole parameters plus a single division-model distortion coefficient."""

    fx: float
    fy: float
    px: float
    py: float
    d: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.px, self.py, self.d])


@dataclass
class Pose3D:
    """Person-centered 3D pose of one frame (meters)."""

    joints: np.ndarray  # (N, 3)
    frame_index: int
    track_id: int


@dataclass
class CalibratedPose:
    """A 3D pose placed in the camera frame, with the transform that put it there."""

    joints: np.ndarray  # (N, 3), camera coordinates
    transform: RigidTransform
    scale: float
    reprojection_rmse: float
    frame_index: int = 0
    flagged: bool = False  # solver failed or did not converge; pose interpolated


@dataclass
class PnpParams:
    max_iterations: int = 100
    gradient_tol: float = 1e-10
    cost_tol: float = 1e-14
    initial_damping: float = 1e-3


@dataclass
class PnpResult:
    pose: CalibratedPose
    converged: bool
    cost_trace: list[float] = field(default_factory=list)


def aggregate_intrinsics(per_frame: Sequence[CameraIntrinsics]) -> CameraIntrinsics:
    """Arithmetic mean of per-frame intrinsics estimates."""
    if len(per_frame) == 0:
        raise ValueError("cannot aggregate an empty intrinsics sequence")
    arr = np.stack([c.as_array() for c in per_frame])
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite intrinsics entry")
    m = arr.mean(axis=0)
    return CameraIntrinsics(*m)


def load_intrinsics_stream(path) -> dict[int, CameraIntrinsics]:
    """Read per-frame intrinsics JSONL; returns {frame_index: intrinsics}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out[int(obj["frame"])] = CameraIntrinsics(
                    fx=float(obj["fx"]), fy=float(obj["fy"]),
                    px=float(obj["px"]), py=float(obj["py"]),
                    d=float(obj.get("d", 0.0)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"intrinsics line {lineno}: {exc}") from exc
    return out


def load_pose_stream(path) -> dict[tuple[int, int], Pose3D]:
    """Read 3D pose JSONL; returns {(track_id, frame_index): Pose3D}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                joints = np.asarray(obj["joints"], dtype=float)
                if joints.ndim != 2 or joints.shape[1] != 3 or not np.all(np.isfinite(joints)):
                    raise ValueError("joints must be finite [x,y,z] triples")
                pose = Pose3D(joints=joints, frame_index=int(obj["frame"]),
                              track_id=int(obj["track"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"pose line {lineno}: {exc}") from exc
            out[(pose.track_id, pose.frame_index)] = pose
    return out


def _distort_radius(r_u: np.ndarray, d: float) -> np.ndarray:
    """Distorted radius from undistorted (division model r_u = r_d / (1 + d r_d^2))."""
    if d == 0.0:
        return r_u
    disc = 1.0 - 4.0 * d * r_u**2
    if np.any(disc < 0):
        raise ValueError("distortion model not invertible at this radius")
    return 2.0 * r_u / (1.0 + np.sqrt(disc))


def project(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to pixels (pinhole + radial distortion).

    Points must be in front of the camera (Z > 0).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts[:, 2] <= 0):
        raise ValueError("point behind camera (Z <= 0)")
    uv = _project_unchecked(pts, intr)
    return uv[0] if np.asarray(points).ndim == 1 else uv


def _project_unchecked(pts: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    z = pts[:, 2]
    xn = pts[:, 0] / z
    yn = pts[:, 1] / z
    if intr.d != 0.0:
        r_u = np.hypot(xn, yn)
        r_d = _distort_radius(r_u, intr.d)
        scale = np.where(r_u > 1e-12, r_d / np.where(r_u > 1e-12, r_u, 1.0), 1.0)
        xn = xn * scale
        yn = yn * scale
    return np.stack([intr.fx * xn + intr.px, intr.fy * yn + intr.py], axis=1)


def undistort_pixels(uv: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Normalized undistorted image coordinates for pixel positions."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xd = (uv[:, 0] - intr.px) / intr.fx
    yd = (uv[:, 1] - intr.py) / intr.fy
    if intr.d != 0.0:
        r_d2 = xd**2 + yd**2
        f = 1.0 + intr.d * r_d2
        xd = xd / f
        yd = yd / f
    return np.stack([xd, yd], axis=1)


def _dlt_estimate(p2: np.ndarray, p3: np.ndarray, intr: CameraIntrinsics) -> RigidTransform:
    """Closed-form [R|T] estimate from >= 6 correspondences (12-parameter DLT)."""
    xn = undistort_pixels(p2, intr)
    n = p3.shape[0]
    A = np.zeros((2 * n, 12))
    X = np.hstack([p3, np.ones((n, 1))])
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -xn[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -xn[:, 1:2] * X
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    U, S, Vt2 = np.linalg.svd(M)
    sigma = S.mean()
    if sigma < 1e-12:
        raise np.linalg.LinAlgError("degenerate DLT solution")
    R = project_to_rotation(M)
    T = P[:, 3] / sigma
    # resolve the global sign so points land in front of the camera
    if np.mean((p3 @ R.T + T)[:, 2]) < 0:
        R = project_to_rotation(-M)
        T = -T
    return RigidTransform(R, T)


def _residuals(theta: np.ndarray, p2: np.ndarray, p3: np.ndarray,
               intr: CameraIntrinsics, scale: float | None) -> np.ndarray:
    w = theta[:3]
    T = theta[3:6]
    s = theta[6] if scale is None else scale
    if abs(s) < 1e-9:
        return np.full(2 * p3.shape[0], 1e6)
    R = so3_exp(w)
    pts = p3 @ R.T + T
    z = pts[:, 2]
    if np.any(z <= 1e-6):
        # behind-camera iterate: huge residual makes LM reject the step
        return np.full(2 * p3.shape[0], 1e6)
    try:
        uv = _project_unchecked(pts, intr)
    except ValueError:
        return np.full(2 * p3.shape[0], 1e6)
    return (p2 - uv / s).ravel()


def _numeric_jacobian(fun, theta: np.ndarray, h: float = 1e-7) -> np.ndarray:
    n = theta.size
    r0 = fun(theta)
    J = np.zeros((r0.size, n))
    for k in range(n):
        step = h * max(1.0, abs(theta[k]))
        tp = theta.copy(); tp[k] += step
        tm = theta.copy(); tm[k] -= step
        J[:, k] = (fun(tp) - fun(tm)) / (2.0 * step)
    return J


def _levenberg_marquardt(fun, theta0: np.ndarray, params: PnpParams):
    theta = theta0.copy()
    r = fun(theta)
    cost = float(r @ r)
    lam = params.initial_damping
    trace = [cost]
    converged = False
    for _ in range(params.max_iterations):
        J = _numeric_jacobian(fun, theta)
        g = J.T @ r
        if np.max(np.abs(g)) < params.gradient_tol:
            converged = True
            break
        A = J.T @ J
        diag = np.clip(np.diag(A), 1e-12, None)
        accepted = False
        for _ in range(30):
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            theta_new = theta + delta
            r_new = fun(theta_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-300)
                theta, r, cost = theta_new, r_new, cost_new
                trace.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                if rel < params.cost_tol or cost < 1e-24:
                    converged = True
                break
            lam *= 10.0
            if lam > 1e14:
                break
        if not accepted:
            converged = True  # no descent step exists: local minimum reached
        if not accepted or converged:
            break
    return theta, cost, trace, converged


def solve_pnp(p2: np.ndarray, p3: np.ndarray, intr: CameraIntrinsics,
              init: RigidTransform | None = None, scale: float | None = None,
              params: PnpParams | None = None, frame_index: int = 0) -> PnpResult:
    """Recover (R, T, s) aligning a person-centered 3D pose with its 2D keypoints.

    p2: (M, 2) pixel keypoints, p3: (M, 3) pose points; only usable (present)
    correspondences should be passed. When `scale` is given it is held fixed,
    otherwise it is estimated jointly. `init` seeds the iterative solver
    (typically the previous frame's result); without it a DLT estimate plus a
    small set of canonical fallbacks is used.
    """
    params = params or PnpParams()
    p2 = np.asarray(p2, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    if p2.shape[0] != p3.shape[0]:
        raise ValueError("correspondence count mismatch")
    if p2.shape[0] < 4:
        raise ValueError("need at least 4 correspondences")
    if _collinear(p3):
        raise ValueError("3D points are collinear; pose unobservable")

    fit_scale = scale is None
    fun = lambda th: _residuals(th, p2, p3, intr, None if fit_scale else scale)

    inits: list[np.ndarray] = []
    if init is not None:
        inits.append(_pack(init, 1.0 if fit_scale else scale, fit_scale))
    else:
        try:
            dlt = _dlt_estimate(p2, p3, intr)
            inits.append(_pack(dlt, 1.0, fit_scale))
        except np.linalg.LinAlgError:
            pass
        depth = max(np.linalg.norm(p3, axis=1).max() * 3.0, 1.0)
        for yaw in (0.0, np.pi / 2, np.pi, -np.pi / 2):
            t0 = RigidTransform(so3_exp([0.0, yaw, 0.0]), np.array([0.0, 0.0, depth]))
            inits.append(_pack(t0, 1.0, fit_scale))

    best = None
    for theta0 in inits:
        theta, cost, trace, conv = _levenberg_marquardt(fun, theta0, params)
        if best is None or cost < best[1]:
            best = (theta, cost, trace, conv)
        if cost < 1e-18:
            break
    theta, cost, trace, conv = best
    R = so3_exp(theta[:3])
    T = theta[3:6]
    s = float(theta[6]) if fit_scale else float(scale)
    rmse = float(np.sqrt(cost / p2.shape[0]))
    transform = RigidTransform(R, T)
    pose = CalibratedPose(joints=p3 @ R.T + T, transform=transform, scale=s,
                          reprojection_rmse=rmse, frame_index=frame_index,
                          flagged=not conv)
    return PnpResult(pose=pose, converged=conv, cost_trace=trace)


def _pack(t: RigidTransform, s: float, fit_scale: bool) -> np.ndarray:
    from .geometry import so3_log
    w = so3_log(t.R)
    return np.concatenate([w, t.T, [s]]) if fit_scale else np.concatenate([w, t.T])


def _collinear(p3: np.ndarray, tol: float = 1e-9) -> bool:
    c = p3 - p3.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return bool(s[1] <= tol * max(s[0], 1.0))


def calibrate_track(poses: Sequence[Pose3D], track: PersonTrack,
                    intr: CameraIntrinsics, params: PnpParams | None = None,
                    min_rmse_ok: float = 20.0) -> list[CalibratedPose]:
    """Chain per-frame PnP along a track with previous-frame initialization.

    The scale factor is estimated in the first successfully solved frame and
    held fixed for the rest of the track. Frames where the solver fails are
    filled afterwards by interpolating rotation (geodesic) and translation
    (linear) from the nearest successful frames, and flagged.
    """
    params = params or PnpParams()
    by_frame = {p.frame_index: p for p in poses}
    results: list[CalibratedPose | None] = []
    frame_indices = list(track.frames)
    prev: RigidTransform | None = None
    scale: float | None = None
    for i, f in enumerate(frame_indices):
        pose = by_frame.get(f)
        if pose is None:
            results.append(None)
            continue
        mask = track.present[i]
        if mask.sum() < 4:
            results.append(None)
            continue
        try:
            res = solve_pnp(track.xy[i][mask], pose.joints[mask], intr,
                            init=prev, scale=scale, params=params, frame_index=f)
        except (ValueError, np.linalg.LinAlgError):
            results.append(None)
            continue
        ok = res.converged and res.pose.reprojection_rmse < min_rmse_ok
        if not ok and prev is None:
            # first frame failing badly: try again without init chaining
            results.append(None)
            continue
        if scale is None:
            scale = res.pose.scale
        prev = res.pose.transform
        # joints of the full pose (present or not) are calibrated
        full = pose.joints @ res.pose.transform.R.T + res.pose.transform.T
        results.append(CalibratedPose(joints=full, transform=res.pose.transform,
                                      scale=res.pose.scale,
                                      reprojection_rmse=res.pose.reprojection_rmse,
                                      frame_index=f, flagged=not ok))
    return _fill_failed_frames(results, by_frame, frame_indices)


def _fill_failed_frames(results, by_frame, frame_indices) -> list[CalibratedPose]:
    ok_idx = [i for i, r in enumerate(results) if r is not None]
    if not ok_idx:
        raise ValueError("PnP failed on every frame of the track")
    filled: list[CalibratedPose] = []
    for i, f in enumerate(frame_indices):
        if results[i] is not None:
            filled.append(results[i])
            continue
        lo = max((j for j in ok_idx if j < i), default=None)
        hi = min((j for j in ok_idx if j > i), default=None)
        if lo is None:
            tf = results[hi].transform
            scale = results[hi].scale
        elif hi is None:
            tf = results[lo].transform
            scale = results[lo].scale
        else:
            a = (i - lo) / (hi - lo)
            R = slerp(results[lo].transform.R, results[hi].transform.R, a)
            T = (1 - a) * results[lo].transform.T + a * results[hi].transform.T
            tf = RigidTransform(R, T)
            scale = results[lo].scale
        pose = by_frame.get(f)
        joints = (pose.joints @ tf.R.T + tf.T) if pose is not None else filled[-1].joints
        filled.append(CalibratedPose(joints=joints, transform=tf, scale=scale,
                                     reprojection_rmse=np.nan, frame_index=f,
                                     flagged=True))
    return filled


def track_variation(joints_seq: np.ndarray) -> float:
    """Sum over joints and axes of the temporal variance of joint positions."""
    return float(np.var(joints_seq, axis=0).sum())


def prune_background(tracks: Sequence[np.ndarray]) -> list[int]:
    """Indices of tracks whose pose variation reaches the population median.

    tracks: per-track (T, N, 3) calibrated joint sequences. A single track is
    always retained; ties at the median are retained.
    """
    if len(tracks) == 0:
        raise ValueError("prune_background needs at least one track")
    if len(tracks) == 1:
        return [0]
    var = np.array([track_variation(t) for t in tracks])
    med = np.median(var)
    keep = (var > med) | np.isclose(var, med, rtol=1e-12, atol=1e-15)
    return [i for i in range(len(tracks)) if keep[i]]
