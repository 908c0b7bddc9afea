"""Per-episode stochastic sampling: initial joint configurations, camera
rigs with visibility rejection, and domain parameters.

Every sampler is a pure function of its inputs and an rng handle; episode
workers derive independent streams from (base_seed, episode_index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import CameraModel, Pose, look_at_orientation
from .kinematics import KinematicChain

# Graduated arm noise magnitudes (rad), proximal -> distal.
FRANKA_ARM_NOISE = (0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175)
RBY1_ARM_NOISE = (0.05, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175)
RBY1_HEAD_NOISE = 0.2
RBY1_GRIPPER_NOISE = 0.01

CAMERA_SAMPLE_ATTEMPTS = 20
LOOKAT_NOISE = 0.10  # m

# Default dynamics-randomization ranges (multiplicative where noted).
DEFAULT_FRICTION_RANGE = (0.4, 1.2)
DEFAULT_MASS_SCALE_RANGE = (0.7, 1.3)
DEFAULT_DAMPING_SCALE_RANGE = (0.5, 2.0)
DEFAULT_LIGHT_COUNT_RANGE = (1, 4)


def episode_rng(base_seed: int, episode_index: int) -> np.random.Generator:
    """Independent, reproducible stream keyed by (base_seed, episode_index)."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(episode_index),))
    return np.random.default_rng(ss)


@dataclass
class NoiseProfile:
    per_joint_magnitude: np.ndarray

    def __post_init__(self):
        self.per_joint_magnitude = np.asarray(self.per_joint_magnitude, dtype=float)
        if np.any(self.per_joint_magnitude < 0.0):
            raise ValueError("noise magnitudes must be non-negative")

    @classmethod
    def for_chain(cls, chain: KinematicChain) -> "NoiseProfile":
        """Graduated arm magnitudes, head/gripper extras for the RB-Y1, zero
        for torso and base."""
        arm_noise = RBY1_ARM_NOISE if chain.name == "rby1" else FRANKA_ARM_NOISE
        r = np.zeros(chain.dof)
        arm_pos = 0
        for i, joint in enumerate(chain.joints):
            if joint.group == "arm":
                r[i] = arm_noise[arm_pos % len(arm_noise)]
                arm_pos += 1
            elif joint.group == "head":
                r[i] = RBY1_HEAD_NOISE
            elif joint.group == "gripper" and chain.name == "rby1":
                r[i] = RBY1_GRIPPER_NOISE
        return cls(per_joint_magnitude=r)


def sample_initial_config(
    chain: KinematicChain,
    profile: NoiseProfile,
    q0: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """q0 + delta with delta_i ~ U(-r_i, r_i), clipped to joint limits."""
    r = profile.per_joint_magnitude
    if r.shape != (chain.dof,):
        raise ValueError(f"profile length {r.shape} != dof {chain.dof}")
    delta = rng.uniform(-r, r)
    return chain.clip(np.asarray(q0, dtype=float) + delta)


@dataclass
class CameraRigSpec:
    kind: str
    fov_base: float  # degrees; for exocentric kinds the lower bound of the fov range
    fov_noise: float  # +/- degrees; for exocentric kinds the upper bound of the range
    pos_noise: tuple[float, float, float] = (0.0, 0.0, 0.0)  # m, per camera axis
    rot_noise: tuple[float, float, float] = (0.0, 0.0, 0.0)  # deg, roll/pitch/yaw
    distance_range: tuple[float, float] | None = None  # m, exocentric only
    height_range: tuple[float, float] | None = None  # m above workspace
    resolution: tuple[int, int] = (624, 352)
    post_crop: tuple[int, int] | None = None

    @property
    def exocentric(self) -> bool:
        return self.distance_range is not None

    def fov_range(self) -> tuple[float, float]:
        if self.exocentric:
            return (self.fov_base, self.fov_noise)
        return (self.fov_base - self.fov_noise, self.fov_base + self.fov_noise)


CAMERA_RIGS: dict[str, CameraRigSpec] = {
    "wrist": CameraRigSpec(
        kind="wrist",
        fov_base=52.0,
        fov_noise=4.0,
        pos_noise=(0.015, 0.005, 0.02),
        rot_noise=(8.0, 4.0, 4.0),
        resolution=(624, 352),
    ),
    "fixed-shoulder": CameraRigSpec(
        kind="fixed-shoulder",
        fov_base=71.0,
        fov_noise=0.0,
        pos_noise=(0.05, 0.05, 0.05),
        rot_noise=(8.0, 8.0, 8.0),
        resolution=(624, 352),
    ),
    "exo-zed2": CameraRigSpec(
        kind="exo-zed2",
        fov_base=64.0,
        fov_noise=72.0,
        distance_range=(0.2, 0.8),
        height_range=(0.05, 0.6),
        resolution=(624, 352),
    ),
    "exo-gopro": CameraRigSpec(
        kind="exo-gopro",
        fov_base=137.0,
        fov_noise=140.0,
        distance_range=(0.2, 0.5),
        height_range=(0.05, 0.6),
        resolution=(624, 352),
    ),
    "rby1-head": CameraRigSpec(
        kind="rby1-head",
        fov_base=139.0,
        fov_noise=3.0,
        pos_noise=(0.01, 0.01, 0.01),
        rot_noise=(4.0, 4.0, 4.0),
        resolution=(1024, 576),
        post_crop=(768, 576),
    ),
    "rby1-wrist": CameraRigSpec(
        kind="rby1-wrist",
        fov_base=58.0,
        fov_noise=4.0,
        pos_noise=(0.015, 0.005, 0.01),
        rot_noise=(8.0, 4.0, 4.0),
        resolution=(1024, 576),
    ),
}


def _perturbed_mount(rig: CameraRigSpec, anchor: Pose, rng: np.random.Generator) -> Pose:
    dp = rng.uniform(-np.asarray(rig.pos_noise), np.asarray(rig.pos_noise))
    dr = np.radians(rng.uniform(-np.asarray(rig.rot_noise), np.asarray(rig.rot_noise)))
    return anchor.compose(Pose.from_rpy(dp, dr))


def sample_camera(
    rig: CameraRigSpec,
    anchor: Pose,
    visibility: Callable[[CameraModel], bool],
    rng: np.random.Generator,
    workspace_center: np.ndarray | None = None,
    max_attempts: int = CAMERA_SAMPLE_ATTEMPTS,
) -> CameraModel | None:
    """Draw a camera from the rig; reject and resample while the visibility
    predicate fails, up to max_attempts.  None means the caller should
    resample the scene."""
    for _ in range(max_attempts):
        lo, hi = rig.fov_range()
        fov = float(rng.uniform(lo, hi))
        if rig.exocentric:
            if workspace_center is None:
                raise ValueError("exocentric rig needs a workspace center")
            center = np.asarray(workspace_center, dtype=float)
            distance = float(rng.uniform(*rig.distance_range))
            height = float(rng.uniform(*rig.height_range))
            azimuth = float(rng.uniform(0.0, 2.0 * math.pi))
            eye = center + np.array(
                [distance * math.cos(azimuth), distance * math.sin(azimuth), height]
            )
            lookat = center + rng.uniform(-LOOKAT_NOISE, LOOKAT_NOISE, 3)
            pose = Pose(position=eye, orientation=look_at_orientation(eye, lookat))
        else:
            pose = _perturbed_mount(rig, anchor, rng)
        cam = CameraModel(pose=pose, vertical_fov=fov, resolution=rig.resolution)
        if visibility(cam):
            return cam
    return None


@dataclass
class LightRecord:
    position: tuple[float, float, float]
    intensity: float
    color: tuple[float, float, float]
    directional: bool

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "intensity": self.intensity,
            "color": list(self.color),
            "directional": self.directional,
        }


@dataclass
class DomainParams:
    light_count: int
    light_records: list[LightRecord]
    texture_seeds: dict[str, int]
    friction: float
    mass_scale: float
    joint_damping: float

    def to_dict(self) -> dict:
        return {
            "light_count": self.light_count,
            "light_records": [l.to_dict() for l in self.light_records],
            "texture_seeds": dict(sorted(self.texture_seeds.items())),
            "friction": self.friction,
            "mass_scale": self.mass_scale,
            "joint_damping": self.joint_damping,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainParams":
        return cls(
            light_count=int(d["light_count"]),
            light_records=[
                LightRecord(tuple(l["position"]), l["intensity"], tuple(l["color"]), l["directional"])
                for l in d["light_records"]
            ],
            texture_seeds={k: int(v) for k, v in d["texture_seeds"].items()},
            friction=float(d["friction"]),
            mass_scale=float(d["mass_scale"]),
            joint_damping=float(d["joint_damping"]),
        )


@dataclass
class DomainRanges:
    friction: tuple[float, float] = DEFAULT_FRICTION_RANGE
    mass_scale: tuple[float, float] = DEFAULT_MASS_SCALE_RANGE
    joint_damping: tuple[float, float] = DEFAULT_DAMPING_SCALE_RANGE
    light_count: tuple[int, int] = DEFAULT_LIGHT_COUNT_RANGE

    def to_dict(self) -> dict:
        return {
            "friction": list(self.friction),
            "mass_scale": list(self.mass_scale),
            "joint_damping": list(self.joint_damping),
            "light_count": list(self.light_count),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainRanges":
        return cls(**{k: tuple(v) for k, v in d.items()})


def sample_domain_params(
    ranges: DomainRanges,
    rng: np.random.Generator,
    texture_keys: tuple[str, ...] = (),
) -> DomainParams:
    lo, hi = ranges.light_count
    if lo < 1:
        raise ValueError("light_count lower bound must be >= 1")
    count = int(rng.integers(lo, hi + 1))
    lights = []
    for _ in range(count):
        lights.append(
            LightRecord(
                position=tuple(map(float, rng.uniform([-2, -2, 1.5], [2, 2, 3.0]))),
                intensity=float(rng.uniform(0.3, 1.0)),
                color=tuple(map(float, rng.uniform(0.7, 1.0, 3))),
                directional=bool(rng.random() < 0.3),
            )
        )
    textures = {k: int(rng.integers(0, 2**31 - 1)) for k in texture_keys}
    return DomainParams(
        light_count=count,
        light_records=lights,
        texture_seeds=textures,
        friction=float(rng.uniform(*ranges.friction)),
        mass_scale=float(rng.uniform(*ranges.mass_scale)),
        joint_damping=float(rng.uniform(*ranges.joint_damping)),
    )
