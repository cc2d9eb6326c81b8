"""Camera model and rotation algebra.

The camera is the 5-parameter model ``(R, t_x, s)``: a pixel with normalized
image coordinates ``(x, y)`` and depth ``z`` maps to the world point

    p = z * R @ (s*x, s*y, 1) + (t_x, 0, 0)

All functions broadcast over leading array dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

REFLECTION = np.diag([-1.0, 1.0, 1.0])


class GeometryError(ValueError):
    """Invalid geometric input (zero quaternion, non-positive depth, ...)."""


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion stored as (w, x, y, z), w being the real part."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=float)

    def normalized(self) -> "Quaternion":
        q = self.as_array()
        n = np.linalg.norm(q)
        if n == 0.0:
            raise GeometryError("zero quaternion")
        return Quaternion(*(q / n))

    @classmethod
    def from_rotation(cls, R: np.ndarray) -> "Quaternion":
        """Shepperd's method; the returned quaternion has w >= 0."""
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        if tr > 0:
            S = np.sqrt(tr + 1.0) * 2
            q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
        elif R[1, 1] > R[2, 2]:
            S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
        else:
            S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
        q = np.array(q)
        q /= np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        return cls(*q)


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ u == cross(v, u)``."""
    v = np.asarray(v)
    z = np.zeros(v.shape[:-1], dtype=v.dtype)
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], z, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def quat_to_rotation(q: Quaternion | Sequence[float]) -> np.ndarray:
    """Rotation matrix ``(1 - 2|q_n|^2) I + 2 q_n q_n^T + 2 q_r [q_n]x``."""
    if not isinstance(q, Quaternion):
        q = Quaternion(*np.asarray(q, dtype=float))
    qa = q.as_array()
    n = np.linalg.norm(qa)
    if n == 0.0:
        raise GeometryError("zero quaternion")
    if abs(n - 1.0) > 1e-12:
        qa = qa / n
    qr, qn = qa[0], qa[1:]
    return (1.0 - 2.0 * qn @ qn) * np.eye(3) + 2.0 * np.outer(qn, qn) + 2.0 * qr * skew(qn)


def exp_map(c: Sequence[float]) -> np.ndarray:
    """Rodrigues formula for ``exp([c]x)``."""
    c = np.asarray(c, dtype=float)
    theta = np.linalg.norm(c)
    K = skew(c)
    if theta < 1e-6:
        # Taylor terms up to theta^4 keep the error below 1e-24
        a = 1.0 - theta**2 / 6.0 + theta**4 / 120.0
        b = 0.5 - theta**2 / 24.0 + theta**4 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def log_map(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` (inverse of :func:`exp_map` for angles < pi)."""
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    theta = _angle(R)
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near a half turn the antisymmetric part vanishes; use the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def _angle(R: np.ndarray) -> float:
    # atan2 of (sin, cos) stays accurate near 0 where arccos of the trace does not
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of ``Ra @ Rb.T`` in degrees, in [0, 180]."""
    return float(np.degrees(_angle(np.asarray(Ra) @ np.asarray(Rb).T)))


@dataclass(frozen=True)
class CameraPose:
    """Camera ``(R, t_x, s)``; R maps camera-frame vectors to the world frame."""

    rotation: np.ndarray
    t_x: float = 0.0
    s: float = 1.0
    # quaternion the pose was built from, kept so serialisation round-trips exactly
    source_quaternion: Optional[tuple] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        R.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "t_x", float(self.t_x))
        object.__setattr__(self, "s", float(self.s))
        if not self.s > 0:
            raise GeometryError(f"camera scale s must be positive, got {self.s}")

    @classmethod
    def identity(cls, s: float = 1.0) -> "CameraPose":
        return cls(np.eye(3), 0.0, s)

    @classmethod
    def from_quaternion(cls, q, t_x: float = 0.0, s: float = 1.0) -> "CameraPose":
        qa = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=float)
        return cls(quat_to_rotation(qa), t_x, s, tuple(float(v) for v in qa))

    @property
    def quaternion(self) -> Quaternion:
        if self.source_quaternion is not None:
            return Quaternion(*self.source_quaternion)
        return Quaternion.from_rotation(self.rotation)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.t_x, 0.0, 0.0])

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def replace(self, rotation=None, t_x=None, s=None) -> "CameraPose":
        return CameraPose(
            self.rotation if rotation is None else rotation,
            self.t_x if t_x is None else t_x,
            self.s if s is None else s,
            self.source_quaternion if rotation is None else None,
        )

    def to_dict(self) -> dict:
        return {"quaternion": list(map(float, self.quaternion.as_array())), "t_x": self.t_x, "s": self.s}

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and self.t_x == other.t_x
            and self.s == other.s
        )

    __hash__ = None


def normalize_pixels(col, row, width: int, height: int):
    """Pixel (col, row) -> normalized (x, y); y points up, unit = max(W, H)/2."""
    m = float(max(width, height))
    x = (2.0 * (np.asarray(col, dtype=float) + 0.5) - width) / m
    y = (height - 2.0 * (np.asarray(row, dtype=float) + 0.5)) / m
    return x, y


def denormalize_pixels(x, y, width: int, height: int):
    """Inverse of :func:`normalize_pixels`."""
    m = float(max(width, height))
    col = (np.asarray(x, dtype=float) * m + width) / 2.0 - 0.5
    row = (height - np.asarray(y, dtype=float) * m) / 2.0 - 0.5
    return col, row


def pixel_normalization_matrix(width: int, height: int) -> np.ndarray:
    """3x3 matrix mapping homogeneous (col, row, 1) to normalized (x, y, 1)."""
    m = float(max(width, height))
    return np.array(
        [
            [2.0 / m, 0.0, (1.0 - width) / m],
            [0.0, -2.0 / m, (height - 1.0) / m],
            [0.0, 0.0, 1.0],
        ]
    )


def ray_direction(x, y, s: float) -> np.ndarray:
    """Unnormalized camera-frame ray ``(s*x, s*y, 1)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.stack([s * x, s * y, np.ones(np.broadcast(x, y).shape)], axis=-1)


def back_project(x, y, z, cam: CameraPose) -> np.ndarray:
    """World point of normalized pixel (x, y) at depth z."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise GeometryError("depth must be positive")
    ray = ray_direction(x, y, cam.s)
    return z[..., None] * (ray @ cam.rotation.T) + cam.translation


def project(points, cam: CameraPose):
    """World points -> normalized (x, y) and camera depth z (exact inverse of back_project)."""
    p_cam = (np.asarray(points, dtype=float) - cam.translation) @ cam.rotation
    z = p_cam[..., 2]
    return p_cam[..., 0] / (cam.s * z), p_cam[..., 1] / (cam.s * z), z


def reflect(p) -> np.ndarray:
    """Mirror across the world yz-plane."""
    p = np.array(p, dtype=float)
    p[..., 0] = -p[..., 0]
    return p


def ray_depth(x, y, z, s: float):
    """Distance from the camera center to the point: ``z * |(s*x, s*y, 1)|``."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise GeometryError("depth must be positive")
    return z * np.sqrt(1.0 + (s * np.asarray(x)) ** 2 + (s * np.asarray(y)) ** 2)


def axis_angle_quaternion(axis, angle: float) -> Quaternion:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return Quaternion(np.cos(h), *(np.sin(h) * axis))


def euler_rotation(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """``Ry(yaw) @ Rx(pitch) @ Rz(roll)`` with angles in radians."""
    return exp_map([0.0, yaw, 0.0]) @ exp_map([pitch, 0.0, 0.0]) @ exp_map([0.0, 0.0, roll])
