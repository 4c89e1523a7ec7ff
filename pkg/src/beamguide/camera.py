"""Pinhole camera model and pose-from-correspondences solver.

The solver estimates the rigid transform mapping object coordinates into
camera coordinates from 2D image observations.  It runs a linear
initialization (homography decomposition for planar point sets, DLT for
six or more points in general position) followed by a damped Gauss-Newton
refinement with multiplicative damping.  Both the tag-map localizer and the
toolhead refiner share this code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_from_matrix, quat_from_rotvec, skew

__all__ = [
    "CameraError",
    "InsufficientObservations",
    "SolverDiverged",
    "CameraIntrinsics",
    "solve_pose",
]


class CameraError(Exception):
    """Base class for camera and solver failures."""


class InsufficientObservations(CameraError):
    """Raised when fewer than four correspondences are supplied."""


class SolverDiverged(CameraError):
    """Raised when damped refinement increases the residual five times in a row."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; fov_limit is the visibility half-angle."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    fov_limit_deg: float = 70.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def k_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def project(self, points_cam) -> np.ndarray:
        """Project camera-frame points (N, 3) to pixels (N, 2); z must be > 0."""
        p = np.atleast_2d(np.asarray(points_cam, dtype=float))
        z = p[:, 2]
        return np.column_stack(
            (self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy)
        )

    def normalized(self, pixels) -> np.ndarray:
        """Pixels (N, 2) to normalized image coordinates (N, 2)."""
        uv = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.column_stack(
            ((uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy)
        )

    def in_bounds(self, pixels) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(pixels, dtype=float))
        return (
            (uv[:, 0] >= 0.0)
            & (uv[:, 0] <= self.width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] <= self.height)
        )

    def within_fov(self, points_cam) -> np.ndarray:
        """True where the ray to the point stays inside the fov half-angle cone."""
        p = np.atleast_2d(np.asarray(points_cam, dtype=float))
        norms = np.linalg.norm(p, axis=1)
        cosang = np.divide(p[:, 2], norms, out=np.zeros_like(norms), where=norms > 0)
        return cosang >= math.cos(math.radians(self.fov_limit_deg))


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform conditioning a 2D point set for DLT."""
    mean = pts.mean(axis=0)
    d = np.linalg.norm(pts - mean, axis=1).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    t = np.array([[s, 0.0, -s * mean[0]], [0.0, s, -s * mean[1]], [0.0, 0.0, 1.0]])
    out = (pts - mean) * s
    return out, t


def _homography(src2d: np.ndarray, dst2d: np.ndarray) -> np.ndarray:
    """DLT homography mapping src2d to dst2d, both (N, 2) with N >= 4."""
    sn, ts = _hartley_normalize(src2d)
    dn, td = _hartley_normalize(dst2d)
    n = sn.shape[0]
    a = np.zeros((2 * n, 9))
    for i in range(n):
        x, y = sn[i]
        u, v = dn[i]
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, _, vt = np.linalg.svd(a)
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(td) @ h @ ts


def _pose_from_planar(points3d: np.ndarray, norm2d: np.ndarray) -> Pose:
    """Initial pose from a homography over the dominant plane of points3d."""
    centroid = points3d.mean(axis=0)
    _, _, vt = np.linalg.svd(points3d - centroid)
    e1, e2 = vt[0], vt[1]
    plane2d = np.column_stack(
        ((points3d - centroid) @ e1, (points3d - centroid) @ e2)
    )
    h = _homography(plane2d, norm2d)
    h1, h2, h3 = h[:, 0], h[:, 1], h[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    r1, r2, t = lam * h1, lam * h2, lam * h3
    if t[2] < 0.0:
        r1, r2, t = -r1, -r2, -t
    m = np.column_stack((r1, r2, np.cross(r1, r2)))
    u, _, vt2 = np.linalg.svd(m)
    r_plane = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt2)]) @ vt2
    basis = np.column_stack((e1, e2, np.cross(e1, e2)))
    r = r_plane @ basis.T
    return Pose(quat_from_matrix(r), t - r @ centroid)


def _pose_from_dlt(points3d: np.ndarray, norm2d: np.ndarray) -> Pose:
    """Initial pose via DLT on >= 6 points in general position."""
    n = points3d.shape[0]
    xh = np.hstack([points3d, np.ones((n, 1))])
    a = np.zeros((2 * n, 12))
    for i in range(n):
        a[2 * i, 0:4] = xh[i]
        a[2 * i, 8:12] = -norm2d[i, 0] * xh[i]
        a[2 * i + 1, 4:8] = xh[i]
        a[2 * i + 1, 8:12] = -norm2d[i, 1] * xh[i]
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)

    best = None
    for sign in (1.0, -1.0):
        m = sign * p[:, :3]
        u, s, vt2 = np.linalg.svd(m)
        r = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt2)]) @ vt2
        scale = s.mean()
        if scale < 1e-12:
            continue
        t = sign * p[:, 3] / scale
        z = points3d @ r.T[:, 2] + t[2]
        n_front = int(np.sum(z > 0))
        if best is None or n_front > best[0]:
            best = (n_front, r, t)
    if best is None:
        raise SolverDiverged("DLT produced a singular projection")
    _, r, t = best
    return Pose(quat_from_matrix(r), t)


def _linear_init(points3d: np.ndarray, norm2d: np.ndarray) -> Pose:
    centroid = points3d.mean(axis=0)
    s = np.linalg.svd(points3d - centroid, compute_uv=False)
    planar = s[2] <= 1e-6 * max(1.0, s[0])
    if planar or points3d.shape[0] < 6:
        return _pose_from_planar(points3d, norm2d)
    return _pose_from_dlt(points3d, norm2d)


def _residuals(pose: Pose, points3d, points2d, intr) -> tuple[np.ndarray, np.ndarray] | None:
    pc = pose.apply(points3d)
    if np.any(pc[:, 2] <= 1e-9):
        return None
    r = (intr.project(pc) - points2d).ravel()
    return r, pc


def solve_pose(
    points3d,
    points2d,
    intr: CameraIntrinsics,
    init: Pose | None = None,
    max_iters: int = 100,
    step_tol: float = 1e-10,
) -> tuple[Pose, float]:
    """Object-to-camera pose minimizing squared reprojection error.

    Returns (pose, rmse_px).  The damping factor starts at 1e-3, divides by 10
    on accepted steps and multiplies by 10 on rejected ones; twelve consecutive
    rejections raise SolverDiverged.  Twelve gives the damping room to climb on
    ill-conditioned geometry (a fronto-parallel plane of points stalls near the
    noise floor) where a tight limit would misreport convergence trouble as
    divergence.  When ``init`` is given the linear initialization is skipped.
    """
    p3 = np.asarray(points3d, dtype=float).reshape(-1, 3)
    p2 = np.asarray(points2d, dtype=float).reshape(-1, 2)
    n = p3.shape[0]
    if n < 4 or p2.shape[0] != n:
        raise InsufficientObservations(f"need at least 4 correspondences, got {n}")

    if init is None:
        pose = _linear_init(p3, intr.normalized(p2))
    else:
        pose = init

    lam = 1e-3
    res = _residuals(pose, p3, p2, intr)
    if res is None:
        raise SolverDiverged("initial pose places points behind the camera")
    r, pc = res
    cost = float(r @ r)
    rejects = 0

    for _ in range(max_iters):
        jac = np.zeros((2 * n, 6))
        for i in range(n):
            x, y, z = pc[i]
            proj = np.array(
                [
                    [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
                    [0.0, intr.fy / z, -intr.fy * y / (z * z)],
                ]
            )
            jac[2 * i : 2 * i + 2, :3] = proj @ (-skew(pc[i]))
            jac[2 * i : 2 * i + 2, 3:] = proj
        jtj = jac.T @ jac
        jtr = jac.T @ r
        if float(np.max(np.abs(jtr))) < 1e-6:
            break  # first-order optimality: converged, not diverged
        diag = np.diag(np.maximum(np.diag(jtj), 1e-12))
        try:
            delta = np.linalg.solve(jtj + lam * diag, -jtr)
        except np.linalg.LinAlgError as exc:
            raise SolverDiverged("singular normal equations") from exc

        candidate = pose.then(Pose(quat_from_rotvec(delta[:3]), delta[3:]))
        cres = _residuals(candidate, p3, p2, intr)
        if cres is not None:
            cr, cpc = cres
            ccost = float(cr @ cr)
        else:
            ccost = math.inf
        if ccost < cost:
            pose, r, pc, cost = candidate, cr, cpc, ccost
            lam = max(lam / 10.0, 1e-7)
            rejects = 0
            if float(np.linalg.norm(delta)) < step_tol:
                break
        else:
            lam *= 10.0
            # A failed step this small means the cost floor is reached;
            # only meaningful steps count toward divergence.
            if float(np.linalg.norm(delta)) < max(step_tol, 1e-8):
                break
            rejects += 1
            if rejects >= 12:
                raise SolverDiverged("residual increased on 12 consecutive steps")

    return pose, math.sqrt(cost / n)
