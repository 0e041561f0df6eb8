"""Exact SE(3)/SO(3) math, rigid transforms of point sets, and Chamfer distance.

Rotations are stored as 3x3 matrices; axis-angle vectors appear only as the
optimization parameterization. Chamfer is the symmetric sum of mean squared
nearest-neighbor distances in both directions (fixed convention used across
training losses and acceptance checks).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: x -> R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self*other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def to_json(self) -> dict:
        return {"R": self.rotation.tolist(), "t": self.translation.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "Pose":
        return Pose(np.array(obj["R"], dtype=np.float64),
                    np.array(obj["t"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class AxisAngleParam:
    """Optimization parameterization: rotation_vec (rad*axis) + translation_vec (m)."""

    rotation_vec: np.ndarray
    translation_vec: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation_vec",
                           np.asarray(self.rotation_vec, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation_vec",
                           np.asarray(self.translation_vec, dtype=np.float64).reshape(3))


@dataclass(eq=False)
class PointCloud:
    """N x 3 point set in meters with an optional shape-instance tag."""

    points: np.ndarray
    source_id: str | None = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError("points must be an N x 3 array with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def rotation_from_axis_angle(w):
    """Rodrigues rotation matrix from axis-angle vector(s).

    Dual-mode: accepts an ndarray (3,) / (B,3) or an autodiff Tensor and
    returns matching (3,3) / (B,3,3). The zero-rotation limit uses the series
    expansion of sin(t)/t and (1-cos t)/t^2 below a switch point, so the map
    is smooth through the origin.
    """
    single = len(w.shape) == 1
    if single:
        w = ad.reshape(w, (1, 3))
    B = w.shape[0]
    t2 = ad.sum_(ad.mul(w, w), axis=1)  # theta^2, (B,)
    small = ad._data(t2) < 1e-12
    # Dead branch gets a well-conditioned dummy input so its backward pass
    # stays finite; the where-mask zeroes it out.
    t2s = ad.where(small, 1.0, t2)
    ts = ad.sqrt(t2s)
    # a = sin(t)/t, b = (1-cos t)/t^2 with series fallbacks near 0
    a = ad.where(small, 1.0 - t2 / 6.0, ad.div(ad.sin(ts), ts))
    b = ad.where(small, 0.5 - t2 / 24.0, ad.div(ad.sub(1.0, ad.cos(ts)), t2s))
    wx = w[:, 0]
    wy = w[:, 1]
    wz = w[:, 2]
    zero = ad.mul(wx, 0.0)
    # K = [w]_x rows; R = I + a*K + b*K^2
    K = ad.stack([
        ad.stack([zero, ad.neg(wz), wy], axis=1),
        ad.stack([wz, zero, ad.neg(wx)], axis=1),
        ad.stack([ad.neg(wy), wx, zero], axis=1),
    ], axis=1)  # (B,3,3)
    K2 = ad.matmul(K, K)
    eye = np.broadcast_to(np.eye(3), (B, 3, 3))
    R = eye + ad.mul(ad.reshape(a, (B, 1, 1)), K) + ad.mul(ad.reshape(b, (B, 1, 1)), K2)
    if single:
        R = ad.reshape(R, (3, 3))
    return R


def exp_map(p: AxisAngleParam) -> Pose:
    """Rigid transform with Rodrigues rotation of rotation_vec."""
    R = rotation_from_axis_angle(p.rotation_vec)
    return Pose(R, p.translation_vec)


def log_map(T: Pose) -> AxisAngleParam:
    """Inverse of exp_map; rotation angle returned in [0, pi].

    The angle-pi branch recovers the axis from the largest diagonal of
    R + I, which stays numerically stable where the standard skew formula
    degenerates.
    """
    R = T.rotation
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-10:
        # first-order: w ~ skew part
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return AxisAngleParam(w, T.translation)
    if np.pi - theta < 1e-6:
        # near pi: axis from R + I column with largest diagonal entry
        A = R + np.eye(3)
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / np.linalg.norm(A[:, k])
        # fix the sign so exp(theta*axis) reproduces R's skew part
        skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, skew) < 0:
            axis = -axis
        return AxisAngleParam(theta * axis, T.translation)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    w = theta / (2.0 * np.sin(theta)) * skew
    return AxisAngleParam(w, T.translation)


def transform_points(T: Pose, cloud: PointCloud) -> PointCloud:
    return PointCloud(T.apply(cloud.points), source_id=cloud.source_id)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_pose(rng: np.random.Generator, trans_scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-trans_scale, trans_scale, 3))


def chamfer(P, Q) -> float:
    """Symmetric sum of mean squared nearest-neighbor distances (m^2)."""
    p = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=np.float64)
    q = Q.points if isinstance(Q, PointCloud) else np.asarray(Q, dtype=np.float64)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("chamfer requires nonempty clouds")
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return float(np.mean(d_pq ** 2) + np.mean(d_qp ** 2))


def chamfer_rms(P, Q) -> float:
    """Root of the per-direction mean squared NN distance; meters."""
    return float(np.sqrt(chamfer(P, Q) / 2.0))


def chamfer_loss(points_t, target: np.ndarray):
    """Differentiable Chamfer between a Tensor point set and a fixed target.

    Nearest-neighbor correspondences are computed from the current values and
    held fixed inside the op, so gradients flow through the squared distances
    only (the standard piecewise-smooth treatment).
    """
    pts = ad._data(points_t)
    target = np.asarray(target, dtype=np.float64)
    _, idx_pq = cKDTree(target).query(pts)
    _, idx_qp = cKDTree(pts).query(target)
    d1 = points_t - target[idx_pq]
    fwd = ad.mean(ad.sum_(ad.mul(d1, d1), axis=1))
    d2 = ad.getitem(points_t, idx_qp) - target
    bwd = ad.mean(ad.sum_(ad.mul(d2, d2), axis=1))
    return fwd + bwd


# ---------------------------------------------------------------------------
# serialization


def cloud_to_ply(cloud: PointCloud) -> str:
    """ASCII PLY with 64-bit decimal vertex coordinates (round-trip exact)."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    for p in cloud.points:
        lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r}")
    return "\n".join(lines) + "\n"


def cloud_from_ply(text: str) -> PointCloud:
    lines = text.strip().split("\n")
    try:
        n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
        start = lines.index("end_header") + 1
    except (StopIteration, ValueError) as e:
        raise ValueError("malformed PLY header") from e
    pts = np.array([[float(v) for v in lines[start + i].split()[:3]] for i in range(n)])
    return PointCloud(pts)


def cloud_to_json(cloud: PointCloud) -> str:
    return json.dumps({"points": cloud.points.tolist()})


def cloud_from_json(text: str) -> PointCloud:
    return PointCloud(np.array(json.loads(text)["points"], dtype=np.float64))


def save_cloud_ply(path, cloud: PointCloud):
    with open(path, "w") as f:
        f.write(cloud_to_ply(cloud))


def load_cloud_ply(path) -> PointCloud:
    with open(path) as f:
        return cloud_from_ply(f.read())
