"""Kinematic chains: forward kinematics, geometric Jacobians, damped
least-squares inverse kinematics and joint-space interpolation.

A chain is an ordered list of joints.  Only the joints on ``tcp_path``
(base -> TCP serial path) move the tool frame; off-path joints (grippers,
head, a second arm) still occupy configuration slots so that sampling,
limits and action encoding cover the whole robot.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Pose, pose_error, quat_from_matrix

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
PLANAR_X = "planar-base-x"
PLANAR_Y = "planar-base-y"
PLANAR_YAW = "planar-base-yaw"

JOINT_KINDS = (REVOLUTE, PRISMATIC, PLANAR_X, PLANAR_Y, PLANAR_YAW)
_ROTATIONAL = {REVOLUTE, PLANAR_YAW}

PRESET_NAMES = ("franka_fr3", "rby1")


class KinematicsError(ValueError):
    pass


@dataclass
class JointSpec:
    name: str
    kind: str
    axis: np.ndarray
    origin: Pose
    limits: tuple[float, float]
    nominal: float = 0.0
    group: str = "arm"

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise KinematicsError(f"unknown joint kind: {self.kind}")
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = float(np.linalg.norm(self.axis))
        if abs(n - 1.0) > 1e-9:
            if n == 0.0:
                raise KinematicsError(f"joint {self.name}: zero axis")
            self.axis = self.axis / n
        lo, hi = self.limits
        self.limits = (float(lo), float(hi))
        if not (lo <= self.nominal <= hi):
            raise KinematicsError(
                f"joint {self.name}: nominal {self.nominal} outside limits {self.limits}"
            )

    @property
    def is_rotational(self) -> bool:
        return self.kind in _ROTATIONAL


@dataclass
class CollisionSphere:
    """Sphere rigidly attached to a link frame (-1 attaches to the chain base)."""

    link: int
    offset: np.ndarray
    radius: float

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        self.radius = float(self.radius)


def _rot_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    c = math.cos(angle)
    s = math.sin(angle)
    x, y, z = axis
    # Rodrigues, unit axis assumed.
    return np.array(
        [
            [c + x * x * (1 - c), x * y * (1 - c) - z * s, x * z * (1 - c) + y * s],
            [y * x * (1 - c) + z * s, c + y * y * (1 - c), y * z * (1 - c) - x * s],
            [z * x * (1 - c) - y * s, z * y * (1 - c) + x * s, c + z * z * (1 - c)],
        ]
    )


class KinematicChain:
    def __init__(
        self,
        joints: list[JointSpec],
        tcp_offset: Pose | None = None,
        base_pose: Pose | None = None,
        tcp_path: tuple[int, ...] | None = None,
        collision_spheres: list[CollisionSphere] | None = None,
        name: str = "chain",
        control_rate: float = 15.0,
    ):
        self.joints = list(joints)
        self.tcp_offset = tcp_offset or Pose.identity()
        self.base_pose = base_pose or Pose.identity()
        self.tcp_path = tuple(tcp_path) if tcp_path is not None else tuple(range(len(joints)))
        self.collision_spheres = collision_spheres or []
        self.name = name
        self.control_rate = float(control_rate)

        self.dof = len(self.joints)
        if any(i < 0 or i >= self.dof for i in self.tcp_path):
            raise KinematicsError("tcp_path index out of range")

        self._o_R = np.stack([j.origin.rotation_matrix() for j in self.joints]) if self.joints else np.zeros((0, 3, 3))
        self._o_p = np.stack([j.origin.position for j in self.joints]) if self.joints else np.zeros((0, 3))
        self._axes = np.stack([j.axis for j in self.joints]) if self.joints else np.zeros((0, 3))
        self._rotational = np.array([j.is_rotational for j in self.joints], dtype=bool)
        self._lo = np.array([j.limits[0] for j in self.joints])
        self._hi = np.array([j.limits[1] for j in self.joints])
        self._nominal = np.array([j.nominal for j in self.joints])
        self._base_R = self.base_pose.rotation_matrix()
        self._tcp_R = self.tcp_offset.rotation_matrix()

    # -- configuration helpers -------------------------------------------------

    @property
    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._lo, self._hi

    def nominal_config(self) -> np.ndarray:
        return self._nominal.copy()

    def clip(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self._lo, self._hi)

    def within_limits(self, q: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(q >= self._lo - tol) and np.all(q <= self._hi + tol))

    def check_config(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dof,):
            raise KinematicsError(f"config length {q.shape} != dof {self.dof}")
        return q

    def group_indices(self, group: str) -> list[int]:
        return [i for i, j in enumerate(self.joints) if j.group == group]

    def random_config(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self._lo, self._hi)

    # -- kinematics ------------------------------------------------------------

    def _fk_core(self, q: np.ndarray):
        """Walk the TCP path; returns TCP frame, per-path-joint anchor data and
        per-path-link frames (after joint motion)."""
        R = self._base_R
        p = self.base_pose.position
        k = len(self.tcp_path)
        jp = np.empty((k, 3))
        ja = np.empty((k, 3))
        frames_R = np.empty((k, 3, 3))
        frames_p = np.empty((k, 3))
        for out, idx in enumerate(self.tcp_path):
            p = p + R @ self._o_p[idx]
            R = R @ self._o_R[idx]
            axis_w = R @ self._axes[idx]
            jp[out] = p
            ja[out] = axis_w
            if self._rotational[idx]:
                R = R @ _rot_matrix(self._axes[idx], float(q[idx]))
            else:
                p = p + axis_w * float(q[idx])
            frames_R[out] = R
            frames_p[out] = p
        p_tcp = p + R @ self.tcp_offset.position
        R_tcp = R @ self._tcp_R
        return R_tcp, p_tcp, jp, ja, frames_R, frames_p


def forward_kinematics(chain: KinematicChain, q: np.ndarray) -> Pose:
    """World-frame TCP pose for configuration q."""
    q = chain.check_config(q)
    R_tcp, p_tcp, *_ = chain._fk_core(q)
    return Pose(position=p_tcp, orientation=quat_from_matrix(R_tcp))


def link_frames(chain: KinematicChain, q: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(R, p) world frames usable for collision-sphere placement.

    Index 0 is the chain base; index i+1 is path link i after its joint motion.
    """
    q = chain.check_config(q)
    _, _, _, _, frames_R, frames_p = chain._fk_core(q)
    out = [(chain._base_R, chain.base_pose.position)]
    out.extend((frames_R[i], frames_p[i]) for i in range(len(chain.tcp_path)))
    return out


def jacobian(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """Geometric Jacobian (6 x dof), linear rows stacked over angular, world frame.

    Off-path joints contribute zero columns.
    """
    q = chain.check_config(q)
    _, p_tcp, jp, ja, _, _ = chain._fk_core(q)
    J = np.zeros((6, chain.dof))
    for out, idx in enumerate(chain.tcp_path):
        axis = ja[out]
        if chain._rotational[idx]:
            J[:3, idx] = np.cross(axis, p_tcp - jp[out])
            J[3:, idx] = axis
        else:
            J[:3, idx] = axis
    return J


def lsq_project_twist(J: np.ndarray, twist: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares joint delta for a desired TCP twist.

    SVD-based solve, so rank-deficient Jacobians degrade gracefully.
    """
    J = np.asarray(J, dtype=float)
    twist = np.asarray(twist, dtype=float).reshape(-1)
    if J.ndim != 2 or J.shape[0] != twist.shape[0]:
        raise KinematicsError(f"Jacobian shape {J.shape} incompatible with twist {twist.shape}")
    dq, *_ = np.linalg.lstsq(J, twist, rcond=None)
    return dq


def interpolate_joint_path(
    start: np.ndarray, goal: np.ndarray, step_limit: float
) -> list[np.ndarray]:
    """Linear joint-space waypoints with per-joint deltas bounded by step_limit.

    The returned path excludes the start and ends at exactly the goal.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if start.shape != goal.shape:
        raise KinematicsError("start/goal dimension mismatch")
    if step_limit <= 0.0:
        raise KinematicsError("step_limit must be positive")
    span = float(np.max(np.abs(goal - start))) if start.size else 0.0
    n = max(1, math.ceil(span / step_limit - 1e-12))
    path = [start + (goal - start) * (k / n) for k in range(1, n + 1)]
    path[-1] = goal.copy()
    return path


def _matrix_error(R_t: np.ndarray, p_t: np.ndarray, R_c: np.ndarray, p_c: np.ndarray):
    """Position delta, rotation vector and rotation angle taking current to target."""
    dp = p_t - p_c
    R = R_t @ R_c.T
    cos_ang = max(-1.0, min(1.0, (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) * 0.5))
    ang = math.acos(cos_ang)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if ang < 1e-9:
        rotvec = 0.5 * w
    elif ang > math.pi - 1e-6:
        # Near-pi: the skew part vanishes; recover the axis from the diagonal.
        axis = np.sqrt(np.maximum((np.diag(R) + 1.0) * 0.5, 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0.0:
            for i in range(3):
                if i != k and R[k, i] + R[i, k] < 0.0:
                    axis[i] = -axis[i]
        rotvec = axis / max(np.linalg.norm(axis), 1e-12) * ang
    else:
        rotvec = w * (ang / (2.0 * math.sin(ang)))
    return dp, rotvec, ang


def ik_damped_ls(
    chain: KinematicChain,
    target: Pose,
    seed: np.ndarray,
    tol_pos: float = 1e-3,
    tol_rot: float = 1e-2,
    max_iters: int = 100,
    damping: float = 1e-2,
    n_seeds: int = 64,
    step_limit: float = 0.5,
    rot_weight: float = 0.3,
) -> np.ndarray | None:
    """Damped least-squares IK with adaptive damping and seed restarts.

    Tries the given seed first, then up to n_seeds - 1 perturbed seeds.
    Returns a configuration within limits whose FK matches the target within
    (tol_pos, tol_rot), or None if every restart fails.
    """
    if not np.all(np.isfinite(target.position)):
        raise KinematicsError("non-finite IK target")
    seed = chain.clip(chain.check_config(seed))
    lo, hi = chain.limits
    R_t = target.rotation_matrix()
    p_t = target.position
    path = chain.tcp_path
    rotational = chain._rotational
    eye6 = np.eye(6)
    rng = np.random.default_rng(0x1CEB00DA)  # fixed stream so restarts are deterministic

    def fk_mat(q):
        R, p, *_ = chain._fk_core(q)
        return R, p

    def solve_from(q0: np.ndarray) -> np.ndarray | None:
        q = q0.copy()
        lam = damping
        R_c, p_c, jp, ja, _, _ = chain._fk_core(q)
        dp, dr, ang = _matrix_error(R_t, p_t, R_c, p_c)
        cost = np.linalg.norm(dp) + rot_weight * np.linalg.norm(dr)
        for _ in range(max_iters):
            if np.linalg.norm(dp) <= tol_pos and ang <= tol_rot:
                return q
            J = np.zeros((6, chain.dof))
            for out, idx in enumerate(path):
                axis = ja[out]
                if rotational[idx]:
                    J[:3, idx] = np.cross(axis, p_c - jp[out])
                    J[3:, idx] = axis
                else:
                    J[:3, idx] = axis
            e = np.concatenate([dp, dr])
            improved = False
            for _ in range(8):
                A = J @ J.T + (lam * lam) * eye6
                dq = J.T @ np.linalg.solve(A, e)
                m = float(np.max(np.abs(dq)))
                if m > step_limit:
                    dq *= step_limit / m
                q_new = np.clip(q + dq, lo, hi)
                R_n, p_n, jp_n, ja_n, _, _ = chain._fk_core(q_new)
                dp_n, dr_n, ang_n = _matrix_error(R_t, p_t, R_n, p_n)
                cost_n = np.linalg.norm(dp_n) + rot_weight * np.linalg.norm(dr_n)
                if cost_n < cost:
                    q, cost = q_new, cost_n
                    R_c, p_c, jp, ja = R_n, p_n, jp_n, ja_n
                    dp, dr, ang = dp_n, dr_n, ang_n
                    lam = max(lam * 0.5, 1e-4)
                    improved = True
                    break
                lam *= 4.0
                if lam > 1e3:
                    break
            if not improved:
                return None
        if np.linalg.norm(dp) <= tol_pos and ang <= tol_rot:
            return q
        return None

    for attempt in range(max(1, n_seeds)):
        if attempt == 0:
            q0 = seed
        else:
            q0 = np.clip(seed + rng.uniform(-1.2, 1.2, chain.dof), lo, hi)
        result = solve_from(q0)
        if result is not None:
            return result
    return None


# -- presets -------------------------------------------------------------------


def _pose_from_dict(d: dict) -> Pose:
    pos = d.get("position", (0.0, 0.0, 0.0))
    if "rpy" in d:
        return Pose.from_rpy(pos, d["rpy"])
    return Pose(position=np.asarray(pos, dtype=float))


def chain_from_dict(data: dict) -> KinematicChain:
    joints = [
        JointSpec(
            name=j["name"],
            kind=j["kind"],
            axis=np.asarray(j["axis"], dtype=float),
            origin=_pose_from_dict(j.get("origin", {})),
            limits=tuple(j["limits"]),
            nominal=float(j.get("nominal", 0.0)),
            group=j.get("group", "arm"),
        )
        for j in data["joints"]
    ]
    spheres = [
        CollisionSphere(link=int(s[0]), offset=np.asarray(s[1], dtype=float), radius=float(s[2]))
        for s in data.get("collision_spheres", [])
    ]
    return KinematicChain(
        joints=joints,
        tcp_offset=_pose_from_dict(data.get("tcp_offset", {})),
        base_pose=_pose_from_dict(data.get("base_pose", {})),
        tcp_path=tuple(data["tcp_path"]) if "tcp_path" in data else None,
        collision_spheres=spheres,
        name=data.get("name", "chain"),
        control_rate=float(data.get("control_rate", 15.0)),
    )


def load_preset(name_or_path: str) -> KinematicChain:
    """Load a robot preset by name ('franka_fr3', 'rby1') or from a JSON file path."""
    if name_or_path in PRESET_NAMES:
        text = resources.files("demoforge").joinpath(f"presets/{name_or_path}.json").read_text()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise KinematicsError(f"unknown preset: {name_or_path}")
        text = path.read_text()
    return chain_from_dict(json.loads(text))
