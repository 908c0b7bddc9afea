"""Rigid-body poses, quaternion math and pinhole camera projection.

Quaternions are stored as (w, x, y, z) and kept unit-norm; every Pose
construction and composition renormalizes so that drift over long
composition chains stays below 1e-6.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector v by unit quaternion q."""
    qv = q[1:]
    t = 2.0 * np.cross(qv, v)
    return v + q[0] * t + np.cross(qv, t)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = math.sqrt(float(axis @ axis))
    if n == 0.0:
        raise ValueError("zero-norm rotation axis")
    half = 0.5 * angle
    s = math.sin(half) / n
    return np.array([math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; stable for all rotation matrices."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of q, in [0, pi]."""
    v = math.sqrt(float(q[1] ** 2 + q[2] ** 2 + q[3] ** 2))
    return 2.0 * math.atan2(v, abs(float(q[0])))


def quat_angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Angle of the relative rotation taking b to a."""
    return quat_angle(quat_multiply(a, quat_conjugate(b)))


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of unit quaternion q."""
    w = float(q[0])
    v = q[1:]
    n = math.sqrt(float(v @ v))
    if n < 1e-12:
        return np.zeros(3)
    angle = 2.0 * math.atan2(n, w)
    if angle > math.pi:
        angle -= 2.0 * math.pi
    return v * (angle / n)


@dataclass
class Pose:
    """Rigid transform: rotation (unit quaternion, wxyz) then translation."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: QUAT_IDENTITY.copy())

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=float).reshape(4))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_position(cls, x: float, y: float, z: float) -> "Pose":
        return cls(position=np.array([x, y, z], dtype=float))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, position=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(position=np.asarray(position, dtype=float), orientation=quat_from_axis_angle(axis, angle))

    @classmethod
    def from_rpy(cls, position, rpy) -> "Pose":
        """Fixed-axis roll/pitch/yaw (x, y, z) convention."""
        r, p, y = rpy
        q = quat_multiply(
            quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), y),
            quat_multiply(
                quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), p),
                quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), r),
            ),
        )
        return cls(position=np.asarray(position, dtype=float), orientation=q)

    def compose(self, other: "Pose") -> "Pose":
        """self âˆ˜ other: apply other in self's frame."""
        return Pose(
            position=self.position + quat_rotate(self.orientation, other.position),
            orientation=quat_multiply(self.orientation, other.orientation),
        )

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.orientation)
        return Pose(position=-quat_rotate(q_inv, self.position), orientation=q_inv)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.position + quat_rotate(self.orientation, np.asarray(p, dtype=float))

    def transform_direction(self, d: np.ndarray) -> np.ndarray:
        return quat_rotate(self.orientation, np.asarray(d, dtype=float))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def copy(self) -> "Pose":
        return Pose(position=self.position.copy(), orientation=self.orientation.copy())

    def to_flat(self) -> list[float]:
        """[x, y, z, qw, qx, qy, qz] for serialization."""
        return [*map(float, self.position), *map(float, self.orientation)]

    @classmethod
    def from_flat(cls, flat) -> "Pose":
        flat = list(map(float, flat))
        return cls(position=np.array(flat[:3]), orientation=np.array(flat[3:7]))

    def almost_equal(self, other: "Pose", tol_pos: float = 1e-9, tol_rot: float = 1e-9) -> bool:
        return (
            float(np.max(np.abs(self.position - other.position))) <= tol_pos
            and quat_angle_between(self.orientation, other.orientation) <= tol_rot
        )


def pose_error(target: Pose, current: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(position error, rotation-vector error) taking current to target."""
    dp = target.position - current.position
    dq = quat_multiply(target.orientation, quat_conjugate(current.orientation))
    return dp, quat_to_axis_angle(dq)


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions (shortest arc)."""
    dot = float(a @ b)
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 0.9995:
        return quat_normalize(a + t * (b - a))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return quat_normalize((math.sin((1.0 - t) * theta) / s) * a + (math.sin(t * theta) / s) * b)


def interpolate_poses(start: Pose, goal: Pose, step_pos: float, step_rot: float = 0.2) -> list[Pose]:
    """Straight-line pose path (positions linear, orientations slerped); the
    last element is exactly the goal."""
    dist = float(np.linalg.norm(goal.position - start.position))
    ang = quat_angle_between(goal.orientation, start.orientation)
    n = max(1, math.ceil(dist / step_pos - 1e-12), math.ceil(ang / step_rot - 1e-12))
    out = []
    for k in range(1, n + 1):
        t = k / n
        out.append(
            Pose(
                position=start.position + t * (goal.position - start.position),
                orientation=quat_slerp(start.orientation, goal.orientation, t),
            )
        )
    out[-1] = goal.copy()
    return out


def look_at_orientation(eye: np.ndarray, target: np.ndarray, world_up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera orientation with +z pointing from eye toward target, +x right, +y down."""
    forward = np.asarray(target, dtype=float) - np.asarray(eye, dtype=float)
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValueError("look-at target coincides with eye")
    forward = forward / n
    up = np.asarray(world_up, dtype=float)
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # Degenerate straight-up/down view: pick an arbitrary horizontal right.
        right = np.array([1.0, 0.0, 0.0])
        rn = 1.0
    right = right / rn
    down = np.cross(forward, right)
    m = np.column_stack([right, down, forward])
    return quat_from_matrix(m)


@dataclass
class CameraModel:
    """Pinhole camera: +z forward, +x right, +y down in the camera frame."""

    pose: Pose
    vertical_fov: float  # degrees
    resolution: tuple[int, int]  # (width, height) pixels

    def __post_init__(self):
        w, h = self.resolution
        if not (0.0 < self.vertical_fov < 180.0):
            raise ValueError(f"vertical_fov out of range: {self.vertical_fov}")
        if w <= 0 or h <= 0:
            raise ValueError(f"non-positive resolution: {self.resolution}")
        self.resolution = (int(w), int(h))

    @property
    def focal_px(self) -> float:
        _, h = self.resolution
        return (h / 2.0) / math.tan(math.radians(self.vertical_fov) / 2.0)


def project_point(cam: CameraModel, world_point: np.ndarray) -> tuple[float, float] | None:
    """Project a world point to pixel (u, v); None if at or behind the image plane."""
    p = cam.pose.inverse().transform_point(world_point)
    if p[2] <= 0.0:
        return None
    f = cam.focal_px
    w, h = cam.resolution
    u = w / 2.0 + f * p[0] / p[2]
    v = h / 2.0 + f * p[1] / p[2]
    return (float(u), float(v))


def point_in_image(cam: CameraModel, world_point: np.ndarray, margin: float = 0.0) -> bool:
    """True if the point projects inside the image with a fractional border margin."""
    uv = project_point(cam, world_point)
    if uv is None:
        return False
    w, h = cam.resolution
    u, v = uv
    return (margin * w <= u <= (1.0 - margin) * w) and (margin * h <= v <= (1.0 - margin) * h)
