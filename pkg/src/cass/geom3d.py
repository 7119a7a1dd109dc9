"""Rigid poses and geometric metrics on point clouds and boxes.

Quaternions are (w, x, y, z) and canonicalized to ``w >= 0``.  Distances
are unsquared Euclidean, in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

EMD_MAX_POINTS = 256


@dataclass(frozen=True)
class Pose:
    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0 or not np.all(np.isfinite(t)):
            raise ValueError("pose needs a finite non-zero quaternion and finite translation")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle, t=(0.0, 0.0, 0.0)):
        return cls(axis_angle_to_quat(axis, angle), t)

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)):
        return cls(matrix_to_quat(R), t)

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def inverse(self):
        qi = self.q * np.array([1.0, -1, -1, -1])
        return Pose(qi, -quat_to_matrix(qi) @ self.t)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return Pose(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    def as_vector(self):
        return np.concatenate([self.q, self.t])


@dataclass
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    extents: np.ndarray   # half-lengths
    rotation: np.ndarray  # unit quaternion

    def __post_init__(self):
        ext = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not np.all(ext > 0):
            raise ValueError(f"box extents must be positive, got {ext}")
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "rotation", q / np.linalg.norm(q))

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def volume(self):
        return float(np.prod(2 * self.extents))

    def corners(self):
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return (signs * self.extents) @ self.R.T + self.center


# quaternion algebra

def quat_mul(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_matrix(q):
    """Rotation matrices for (..., 4) quaternions (normalized here)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    # Shepperd's method, choosing the numerically largest pivot
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = np.sqrt(1.0 + tr) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def random_quaternion(rng, size=None):
    """Uniform rotations: normalized 4D Gaussian samples, ``w >= 0``."""
    shape = (4,) if size is None else (size, 4)
    q = rng.standard_normal(shape)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q * np.where(q[..., :1] < 0, -1.0, 1.0)


def rotation_6d(R):
    """First two columns of R, flattened (continuous rotation encoding)."""
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def rotation_from_6d(v, primary=0):
    """Gram-Schmidt back to a rotation matrix; inverse of :func:`rotation_6d`.

    ``primary`` picks which of the two columns is kept exactly (up to scale);
    the other one is orthogonalized against it.
    """
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:6]
    if primary not in (0, 1):
        raise ValueError("primary must be 0 or 1")
    if primary == 1:
        a, b = b, a
    e1 = _unit(a)
    e2 = _unit(b - np.sum(e1 * b, axis=-1, keepdims=True) * e1)
    if primary == 1:
        # e1 is the second column here; keep the frame right-handed
        return np.stack([e2, e1, np.cross(e2, e1)], axis=-1)
    return np.stack([e1, e2, np.cross(e1, e2)], axis=-1)


# transforms

def apply_pose(pose, cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    out = pts @ pose.R.T + pose.t
    if isinstance(cloud, PointCloud):
        return PointCloud(out, None if cloud.colors is None else cloud.colors.copy())
    return out


def _points(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    return pts


# distances

def nn_distances(a, b):
    """For every point of ``a`` the distance to its nearest neighbor in ``b``."""
    a, b = _points(a), _points(b)
    d, _ = cKDTree(b).query(a, k=1)
    return d


def one_sided_chamfer(a, b):
    return float(nn_distances(a, b).mean())


def chamfer(a, b):
    """Sum of the two mean nearest-neighbor distances."""
    return one_sided_chamfer(a, b) + one_sided_chamfer(b, a)


def emd(a, b):
    """Mean matched distance under the optimal bijection."""
    a, b = _points(a), _points(b)
    if len(a) != len(b):
        raise ValueError(f"emd needs equal cardinality, got {len(a)} and {len(b)}")
    if len(a) > EMD_MAX_POINTS:
        raise ValueError(f"emd exact mode is capped at {EMD_MAX_POINTS} points")
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def aabb_size(cloud):
    pts = _points(cloud)
    return pts.max(axis=0) - pts.min(axis=0)


def aabb_center(cloud):
    pts = _points(cloud)
    return 0.5 * (pts.max(axis=0) + pts.min(axis=0))


# pose errors

def rotation_error(pred, gt, symmetry_axis=None):
    """Rotation error in degrees.

    With ``symmetry_axis`` (canonical frame) only the direction of that axis
    is compared, so any rotation about it is free.
    """
    # atan2 forms keep full precision near 0 and 180 degrees
    if symmetry_axis is not None:
        a = np.asarray(symmetry_axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        u, v = pred.R @ a, gt.R @ a
        return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v))))
    p, g = np.asarray(pred.q, dtype=np.float64), np.asarray(gt.q, dtype=np.float64)
    p, g = p / np.linalg.norm(p), g / np.linalg.norm(g)
    # relative rotation g^-1 p: scalar part is the dot product
    w = abs(np.dot(p, g))
    v = g[0] * p[1:] - p[0] * g[1:] - np.cross(g[1:], p[1:])
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(v), w)))


def translation_error(pred, gt):
    return float(np.linalg.norm(pred.t - gt.t))


def align_about_axis(R_pred, R_gt, axis):
    """Rotate ``R_pred`` about its canonical ``axis`` to be closest to ``R_gt``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    D = R_pred.T @ R_gt
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    c = np.trace(D) - a @ D @ a
    s = np.trace(K.T @ D)
    theta = np.arctan2(s, c)
    rot = np.cos(theta) * np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * np.outer(a, a)
    return R_pred @ rot


# boxes

def box_from_pose(pose, size, center_offset=None):
    """Oriented box of a canonical AABB (``size`` full lengths) placed by ``pose``."""
    c = np.zeros(3) if center_offset is None else np.asarray(center_offset, dtype=np.float64)
    return OrientedBox(pose.R @ c + pose.t, np.asarray(size, dtype=np.float64) / 2, pose.q)


def _same_rotation(a, b, tol=1e-12):
    return min(np.abs(a.rotation - b.rotation).max(), np.abs(a.rotation + b.rotation).max()) < tol


def _aligned_iou(a, b):
    R = a.R
    ca, cb = R.T @ a.center, R.T @ b.center
    lo = np.maximum(ca - a.extents, cb - b.extents)
    hi = np.minimum(ca + a.extents, cb + b.extents)
    inter = float(np.prod(np.clip(hi - lo, 0, None)))
    return inter / (a.volume() + b.volume() - inter)


def _inside(box, pts):
    local = (pts - box.center) @ box.R
    return np.all(np.abs(local) <= box.extents, axis=1)


def box_iou_3d(a, b, samples=100_000, seed=0):
    """3D IoU of two oriented boxes.

    Exact when both boxes share a rotation; otherwise a stratified Monte-Carlo
    estimate over the AABB enclosing both boxes (deterministic given seed).
    """
    if samples < 100_000:
        raise ValueError("box_iou_3d needs at least 1e5 samples")
    if _same_rotation(a, b):
        return _aligned_iou(a, b)
    corners = np.vstack([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    k = int(np.ceil(samples ** (1 / 3)))
    rng = np.random.default_rng(seed)
    cell = (hi - lo) / k
    grid = np.stack(np.meshgrid(*[np.arange(k)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = lo + (grid + rng.random(grid.shape)) * cell
    ina, inb = _inside(a, pts), _inside(b, pts)
    union = np.count_nonzero(ina | inb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ina & inb) / union
