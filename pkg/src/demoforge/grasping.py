"""Grasp candidate generation, ranking, filtering and selection.

Candidates are 6-DoF TCP poses with an approach axis.  The pipeline ranks
by a weighted geometric cost, keeps the top K, drops candidates whose
gripper sphere set collides with the scene, drops kinematically
unreachable ones via batched IK, and selects the best survivor.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, quat_angle_between, quat_from_matrix, quat_multiply, quat_from_axis_angle
from .kinematics import KinematicChain, ik_damped_ls
from .world import ArticulatedFixture, ObjectInstance, WorldState, aabb_overlap, sphere_box_distance

logger = logging.getLogger(__name__)

COLLISION_BATCH = 128
IK_BATCH = 256
DEFAULT_TOP_K = 128
GRIPPER_MAX_WIDTH = 0.085  # m, parallel jaw

# Phantom gripper geometry in the candidate TCP frame (+z = approach).
DEFAULT_GRIPPER_SPHERES = (
    (np.array([0.0, 0.0, -0.07]), 0.04),
    (np.array([0.0, 0.045, -0.02]), 0.02),
    (np.array([0.0, -0.045, -0.02]), 0.02),
)


class GraspError(ValueError):
    pass


@dataclass
class GraspCandidate:
    pose: Pose
    approach_axis: np.ndarray
    width: float
    flipped: bool = False
    cost: float | None = None
    joints: np.ndarray | None = None

    def __post_init__(self):
        self.approach_axis = np.asarray(self.approach_axis, dtype=float).reshape(3)
        n = float(np.linalg.norm(self.approach_axis))
        if abs(n - 1.0) > 1e-9:
            if n == 0.0:
                raise GraspError("zero approach axis")
            self.approach_axis = self.approach_axis / n
        if self.width < 0.0:
            raise GraspError("negative grasp width")


@dataclass
class GraspCostWeights:
    w_tcp: float = 1.0
    w_rot: float = 1.0
    w_vert: float = 1.0
    w_com: float = 1.0

    def __post_init__(self):
        for w in (self.w_tcp, self.w_rot, self.w_vert, self.w_com):
            if w < 0.0:
                raise GraspError("negative cost weight")
        if self.w_tcp == self.w_rot == self.w_vert == self.w_com == 0.0:
            raise GraspError("at least one cost weight must be positive")


def grasp_cost(
    cand: GraspCandidate, current_tcp: Pose, object_com: np.ndarray, weights: GraspCostWeights
) -> float:
    """TCP proximity + rotation similarity + vertical alignment + COM distance."""
    d_tcp = float(np.linalg.norm(cand.pose.position - current_tcp.position))
    theta = quat_angle_between(cand.pose.orientation, current_tcp.orientation)
    vert = 1.0 - abs(float(cand.approach_axis @ np.array([0.0, 0.0, -1.0])))
    d_com = float(np.linalg.norm(cand.pose.position - np.asarray(object_com, dtype=float)))
    return (
        weights.w_tcp * d_tcp + weights.w_rot * theta + weights.w_vert * vert + weights.w_com * d_com
    )


def rank_candidates(
    cands: list[GraspCandidate],
    current_tcp: Pose,
    object_com: np.ndarray,
    weights: GraspCostWeights | None = None,
) -> list[GraspCandidate]:
    """Ascending weighted cost; ties keep candidate order (stable sort)."""
    if not cands:
        raise GraspError("empty candidate list")
    weights = weights or GraspCostWeights()
    for c in cands:
        c.cost = grasp_cost(c, current_tcp, object_com, weights)
    return sorted(cands, key=lambda c: c.cost)


def _candidate_collides(
    cand: GraspCandidate,
    state: WorldState,
    gripper_spheres,
    target_id: str,
) -> bool:
    for offset, radius in gripper_spheres:
        center = cand.pose.transform_point(offset)
        for o in state.scene.obstacles:
            if sphere_box_distance(center, o.min_corner, o.max_corner) < radius:
                return True
        for obj in state.objects.values():
            if obj.id == target_id:
                continue  # the gripper is allowed (and expected) to touch the target
            omin, omax = obj.world_aabb()
            if sphere_box_distance(center, omin, omax) < radius:
                return True
    return False


def collision_filter(
    cands: list[GraspCandidate],
    state: WorldState,
    gripper_spheres=DEFAULT_GRIPPER_SPHERES,
    target_id: str = "",
    batch_size: int = COLLISION_BATCH,
) -> list[GraspCandidate]:
    """Drop candidates whose phantom gripper intersects obstacles or
    non-target objects; processed in batches of at most batch_size."""
    survivors: list[GraspCandidate] = []
    for start in range(0, len(cands), batch_size):
        batch = cands[start : start + batch_size]
        logger.debug("collision filter batch %d: %d candidates", start // batch_size, len(batch))
        survivors.extend(
            c for c in batch if not _candidate_collides(c, state, gripper_spheres, target_id)
        )
    return survivors


def ik_filter(
    cands: list[GraspCandidate],
    chain: KinematicChain,
    seed_config: np.ndarray,
    batch_size: int = IK_BATCH,
    tol_pos: float = 1e-3,
    tol_rot: float = 1e-2,
    max_iters: int = 60,
    n_seeds: int = 8,
) -> list[GraspCandidate]:
    """Keep candidates with an in-limits IK solution; attaches the solution."""
    survivors: list[GraspCandidate] = []
    for start in range(0, len(cands), batch_size):
        batch = cands[start : start + batch_size]
        logger.debug("ik filter batch %d: %d candidates", start // batch_size, len(batch))
        for c in batch:
            q = ik_damped_ls(
                chain,
                c.pose,
                seed_config,
                tol_pos=tol_pos,
                tol_rot=tol_rot,
                max_iters=max_iters,
                n_seeds=n_seeds,
            )
            if q is not None:
                c.joints = q
                survivors.append(c)
    return survivors


def select_grasp(cands: list[GraspCandidate]) -> GraspCandidate | None:
    """Highest-ranked feasible grasp, i.e. the head of the filtered ranking."""
    return cands[0] if cands else None


def grasp_pipeline(
    cands: list[GraspCandidate],
    state: WorldState,
    chain: KinematicChain,
    seed_config: np.ndarray,
    current_tcp: Pose,
    object_com: np.ndarray,
    weights: GraspCostWeights | None = None,
    gripper_spheres=DEFAULT_GRIPPER_SPHERES,
    target_id: str = "",
    top_k: int = DEFAULT_TOP_K,
    collision_batch: int = COLLISION_BATCH,
    ik_batch: int = IK_BATCH,
) -> tuple[GraspCandidate | None, list[GraspCandidate]]:
    """rank -> top-K -> collision filter -> IK filter -> select.

    Returns (selected, surviving candidates in rank order).
    """
    ranked = rank_candidates(cands, current_tcp, object_com, weights)[:top_k]
    free = collision_filter(ranked, state, gripper_spheres, target_id, collision_batch)
    feasible = ik_filter(free, chain, seed_config, ik_batch)
    return select_grasp(feasible), feasible


# -- candidate generation ----------------------------------------------------------


def _orient(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    return quat_from_matrix(np.column_stack([x, y, z]))


def generate_candidates(
    obj: ObjectInstance, max_width: float = GRIPPER_MAX_WIDTH
) -> list[GraspCandidate]:
    """Antipodal top and side grasps on the cuboid faces, with flipped variants."""
    yaw = obj.yaw
    c, s = math.cos(yaw), math.sin(yaw)
    ex = np.array([c, s, 0.0])
    ey = np.array([-s, c, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    hx, hy, hz = obj.half_extents
    center = obj.pose.position
    out: list[GraspCandidate] = []

    def add(position, approach, closing, width):
        if width > max_width:
            return
        z_t = approach
        for flip in (False, True):
            y_t = -closing if flip else closing
            x_t = np.cross(y_t, z_t)
            out.append(
                GraspCandidate(
                    pose=Pose(position=position.copy(), orientation=_orient(x_t, y_t, z_t)),
                    approach_axis=z_t,
                    width=width,
                    flipped=flip,
                )
            )

    # Top grasps: approach straight down, close across x or y.
    top = center + ez * hz
    add(top, -ez, ex, 2.0 * hx)
    add(top, -ez, ey, 2.0 * hy)
    # Side grasps from the four lateral faces.
    for sign in (1.0, -1.0):
        face_x = center + ex * (sign * hx)
        add(face_x, -sign * ex, ey, 2.0 * hy)
        add(face_x, -sign * ex, ez, 2.0 * hz)
        face_y = center + ey * (sign * hy)
        add(face_y, -sign * ey, ex, 2.0 * hx)
        add(face_y, -sign * ey, ez, 2.0 * hz)
    return out


def handle_candidates(fixture: ArticulatedFixture) -> list[GraspCandidate]:
    """Grasps for a fixture handle: the stored handle pose plus its flip."""
    base = fixture.handle_pose()
    approach = base.transform_direction(np.array([0.0, 0.0, 1.0]))
    flip = Pose(
        position=base.position,
        orientation=quat_multiply(base.orientation, quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), math.pi)),
    )
    return [
        GraspCandidate(pose=base, approach_axis=approach, width=0.02, flipped=False),
        GraspCandidate(pose=flip, approach_axis=approach, width=0.02, flipped=True),
    ]


# -- candidate files -----------------------------------------------------------------


def save_candidates(path: str | Path, per_object: dict[str, list[GraspCandidate]]) -> None:
    """One record per line: object id, position, quaternion (wxyz), approach axis, width."""
    lines = []
    for obj_id in sorted(per_object):
        for c in per_object[obj_id]:
            fields = [obj_id]
            fields += [repr(float(v)) for v in c.pose.position]
            fields += [repr(float(v)) for v in c.pose.orientation]
            fields += [repr(float(v)) for v in c.approach_axis]
            fields.append(repr(float(c.width)))
            lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_candidates(path: str | Path) -> dict[str, list[GraspCandidate]]:
    out: dict[str, list[GraspCandidate]] = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 12:
            raise GraspError(f"{path}:{ln}: expected 12 fields, got {len(parts)}")
        obj_id = parts[0]
        vals = list(map(float, parts[1:]))
        cand = GraspCandidate(
            pose=Pose(position=np.array(vals[0:3]), orientation=np.array(vals[3:7])),
            approach_axis=np.array(vals[7:10]),
            width=vals[10],
        )
        out.setdefault(obj_id, []).append(cand)
    return out
