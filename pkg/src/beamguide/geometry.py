"""Frame-aware rigid transforms and geometric primitives.

Rotations are unit quaternions in (w, x, y, z) order, renormalized after
every composition so long chains do not drift.  A ``Pose`` maps coordinates
of a point from one frame into another via ``y = R @ x + t``.  ``FramedPose``
adds source/target frame tags and refuses to compose mismatched chains.

Internal units are meters and radians.  Degrees and millimeters only appear
at reporting boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "GeometryError",
    "FrameMismatch",
    "ZeroVector",
    "DegenerateInput",
    "FrameTag",
    "Pose",
    "FramedPose",
    "Plane",
    "Obb",
    "compose",
    "invert",
    "transform_point",
    "angle_between",
    "obb_fit",
    "quat_multiply",
    "quat_rotate",
    "quat_to_matrix",
    "quat_from_matrix",
    "quat_from_rotvec",
    "quat_slerp",
    "rotation_angle_deg",
    "skew",
    "polygon_normal",
]


class GeometryError(Exception):
    """Base class for geometric failures."""


class FrameMismatch(GeometryError):
    """Raised when framed poses are chained across unequal frames."""


class ZeroVector(GeometryError):
    """Raised when a direction is requested from a near-zero vector."""


class DegenerateInput(GeometryError):
    """Raised when a fit is attempted on rank-deficient input."""


class FrameTag(Enum):
    TIMBER = "timber"
    CAMERA = "camera"
    TOOLHEAD = "toolhead"
    WORLD = "world"


_EPS = 1e-12


def _as_vec(x, n: int) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(n)
    return v


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = _as_vec(v, 3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b in (w, x, y, z) order."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_normalize(q) -> np.ndarray:
    q = _as_vec(q, 4)
    n = float(np.linalg.norm(q))
    if n < _EPS:
        raise ZeroVector("quaternion norm is zero")
    q = q / n
    # Canonical sign keeps serialized poses reproducible.
    if q[0] < 0.0:
        q = -q
    return q


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector(s) v by unit quaternion q."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m) -> np.ndarray:
    """Quaternion from a rotation matrix, largest-pivot branch for stability."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (m[2, 1] - m[1, 2]) / s,
                (m[0, 2] - m[2, 0]) / s,
                (m[1, 0] - m[0, 1]) / s,
            ]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[2, 1] - m[1, 2]) / s,
                0.25 * s,
                (m[0, 1] + m[1, 0]) / s,
                (m[0, 2] + m[2, 0]) / s,
            ]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [
                (m[0, 2] - m[2, 0]) / s,
                (m[0, 1] + m[1, 0]) / s,
                0.25 * s,
                (m[1, 2] + m[2, 1]) / s,
            ]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [
                (m[1, 0] - m[0, 1]) / s,
                (m[0, 2] + m[2, 0]) / s,
                (m[1, 2] + m[2, 1]) / s,
                0.25 * s,
            ]
        )
    return quat_normalize(q)


def quat_from_rotvec(w) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    w = _as_vec(w, 3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-16:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = w / theta
    half = 0.5 * theta
    return np.concatenate(([math.cos(half)], math.sin(half) * axis))


def quat_slerp(a, b, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc, t in [0, 1]."""
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(a + t * (b - a))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return quat_normalize(
        (math.sin((1.0 - t) * theta) / s) * a + (math.sin(t * theta) / s) * b
    )


def rotation_angle_deg(q) -> float:
    """Magnitude of the rotation encoded by q, in degrees within [0, 180]."""
    q = quat_normalize(q)
    return math.degrees(2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0]))))


@dataclass(frozen=True)
class Pose:
    """Rigid transform acting on coordinates: apply(x) = R x + t."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", _as_vec(self.t, 3))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rt(r, t) -> "Pose":
        return Pose(quat_from_matrix(r), t)

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.t

    def rotate(self, vectors) -> np.ndarray:
        """Rotate direction vector(s) without translating."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def then(self, other: "Pose") -> "Pose":
        """Pose applying self first, then other."""
        return Pose(quat_multiply(other.q, self.q), other.apply(self.t))

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def as_params(self) -> np.ndarray:
        """Serialization order (qw, qx, qy, qz, tx, ty, tz)."""
        return np.concatenate((self.q, self.t))

    @staticmethod
    def from_params(p) -> "Pose":
        p = _as_vec(p, 7)
        return Pose(p[:4], p[4:])


@dataclass(frozen=True)
class FramedPose:
    """A Pose tagged with source and target frames.

    transform_point maps coordinates expressed in ``src`` into ``dst``.
    """

    pose: Pose
    src: FrameTag
    dst: FrameTag

    def compose(self, other: "FramedPose") -> "FramedPose":
        """Chain self [A -> B] with other [B -> C] into [A -> C]."""
        if self.dst is not other.src:
            raise FrameMismatch(
                f"cannot chain {self.src.value}->{self.dst.value} "
                f"with {other.src.value}->{other.dst.value}"
            )
        return FramedPose(self.pose.then(other.pose), self.src, other.dst)

    def invert(self) -> "FramedPose":
        return FramedPose(self.pose.inverse(), self.dst, self.src)

    def transform_point(self, points) -> np.ndarray:
        return self.pose.apply(points)


def compose(a: FramedPose, b: FramedPose) -> FramedPose:
    """Chain a [X -> Y] with b [Y -> Z]; raises FrameMismatch otherwise."""
    return a.compose(b)


def invert(p: FramedPose) -> FramedPose:
    return p.invert()


def transform_point(p: FramedPose, points) -> np.ndarray:
    return p.transform_point(points)


@dataclass(frozen=True)
class Plane:
    """Oriented plane: points x with dot(normal, x) == offset."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = _as_vec(self.normal, 3)
        norm = float(np.linalg.norm(n))
        if norm < _EPS:
            raise ZeroVector("plane normal is zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @staticmethod
    def from_point_normal(point, normal) -> "Plane":
        n = _as_vec(normal, 3)
        norm = float(np.linalg.norm(n))
        if norm < _EPS:
            raise ZeroVector("plane normal is zero")
        n = n / norm
        return Plane(n, float(np.dot(n, _as_vec(point, 3))))

    @staticmethod
    def from_points(points) -> "Plane":
        """Least-squares plane through >= 3 points (total least squares)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 3:
            raise DegenerateInput("plane fit needs at least 3 points")
        centroid = pts.mean(axis=0)
        _, s, vt = np.linalg.svd(pts - centroid)
        if s[1] < 1e-12 * max(1.0, s[0]):
            raise DegenerateInput("points are collinear")
        return Plane.from_point_normal(centroid, vt[2])

    def signed_distance(self, points) -> np.ndarray | float:
        p = np.asarray(points, dtype=float)
        d = p @ self.normal - self.offset
        return float(d) if d.ndim == 0 else d

    def project(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        d = np.atleast_1d(p @ self.normal - self.offset)
        return p - np.outer(d, self.normal).reshape(p.shape)


@dataclass(frozen=True)
class Obb:
    """Oriented bounding box; axes are columns, half_extents sorted descending."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec(self.center, 3))
        axes = np.asarray(self.axes, dtype=float).reshape(3, 3)
        object.__setattr__(self, "axes", axes)
        he = _as_vec(self.half_extents, 3)
        object.__setattr__(self, "half_extents", he)
        if not np.allclose(axes.T @ axes, np.eye(3), atol=1e-9):
            raise DegenerateInput("obb axes are not orthonormal")
        if np.any(he <= 0.0):
            raise DegenerateInput("obb half extents must be positive")
        if not (he[0] >= he[1] - 1e-12 and he[1] >= he[2] - 1e-12):
            raise DegenerateInput("obb half extents must be sorted descending")

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        local = (p - self.center) @ self.axes
        return np.all(np.abs(local) <= self.half_extents + margin, axis=1)

    @property
    def extents(self) -> np.ndarray:
        return 2.0 * self.half_extents


def angle_between(u, v) -> float:
    """Unsigned angle between two vectors in degrees, range [0, 180]."""
    u = _as_vec(u, 3)
    v = _as_vec(v, 3)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _EPS or nv < _EPS:
        raise ZeroVector("angle between zero-length vectors is undefined")
    c = float(np.dot(u, v)) / (nu * nv)
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def polygon_normal(vertices) -> np.ndarray:
    """Unit normal of a planar polygon by Newell's method (CCW positive)."""
    v = np.asarray(vertices, dtype=float).reshape(-1, 3)
    n = np.zeros(3)
    for i in range(v.shape[0]):
        a = v[i]
        b = v[(i + 1) % v.shape[0]]
        n[0] += (a[1] - b[1]) * (a[2] + b[2])
        n[1] += (a[2] - b[2]) * (a[0] + b[0])
        n[2] += (a[0] - b[0]) * (a[1] + b[1])
    norm = float(np.linalg.norm(n))
    if norm < _EPS:
        raise DegenerateInput("polygon has no area")
    return n / norm


def _min_area_rect_axes(coords: np.ndarray) -> np.ndarray:
    """Minimum-area bounding rectangle axes for 2D points (rotating calipers).

    Returns a 2x2 matrix whose columns are the rectangle axes.
    """
    from scipy.spatial import ConvexHull

    hull = coords[ConvexHull(coords).vertices]
    best_area = math.inf
    best = np.eye(2)
    m = hull.shape[0]
    for i in range(m):
        edge = hull[(i + 1) % m] - hull[i]
        norm = float(np.linalg.norm(edge))
        if norm < _EPS:
            continue
        e = edge / norm
        p = np.array([-e[1], e[0]])
        proj_e = hull @ e
        proj_p = hull @ p
        area = float((proj_e.max() - proj_e.min()) * (proj_p.max() - proj_p.min()))
        if area < best_area - 1e-15:
            best_area = area
            best = np.column_stack((e, p))
    return best


def _canonical_axes(axes: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: dominant component positive, right-handed."""
    out = axes.copy()
    for i in range(2):
        col = out[:, i]
        j = int(np.argmax(np.abs(col)))
        if col[j] < 0.0:
            out[:, i] = -col
    out[:, 2] = np.cross(out[:, 0], out[:, 1])
    return out


def obb_fit(points, min_extent: float = 0.0) -> Obb:
    """Oriented bounding box of a point set.

    Axes come from the principal directions of the centered covariance.  When
    the two cross-section eigenvalues are nearly equal (square sections) the
    principal directions are arbitrary, so the cross axes are taken from the
    minimum-area bounding rectangle of the projections instead.  Axis signs
    are canonicalized so identical inputs yield identical boxes.

    With ``min_extent`` > 0, planar inputs are allowed and the flat axis is
    floored at that extent; otherwise rank-deficient input raises
    DegenerateInput.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 4:
        raise DegenerateInput("obb fit needs at least 4 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    spread = s / math.sqrt(pts.shape[0])
    tol = 1e-7
    rank = int(np.sum(spread > tol))
    if rank < 2 or (rank < 3 and min_extent <= 0.0):
        raise DegenerateInput(f"obb fit input has rank {rank}")

    axes = vt.T
    eigvals = spread**2
    if rank == 3 and eigvals[1] > 0 and (eigvals[1] - eigvals[2]) < 0.2 * eigvals[1]:
        # Near-equal cross eigenvalues: PCA directions are unstable.
        plane_axes = axes[:, 1:]
        coords = centered @ plane_axes
        rect = _min_area_rect_axes(coords)
        axes = np.column_stack((axes[:, 0], plane_axes @ rect))
    if rank == 2:
        axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])

    axes = _canonical_axes(axes)
    local = centered @ axes
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    half = np.maximum((hi - lo) / 2.0, min_extent if min_extent > 0.0 else 0.0)
    center = centroid + axes @ ((hi + lo) / 2.0)

    order = np.argsort(-half, kind="stable")
    axes = _canonical_axes(axes[:, order])
    half = half[order]
    return Obb(center, axes, half)
