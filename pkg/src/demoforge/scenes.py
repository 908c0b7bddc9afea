"""Bundled desk-scale scene generator.

Emits randomized manipulation scenes from a seed: a desk support surface,
task-role objects (pickup / receptacle / reference / distractor) and, for
the articulated tasks, a drawer or hinged-door fixture with a graspable
handle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, quat_from_matrix
from .kinematics import KinematicChain
from .world import (
    ArticulatedFixture,
    Cuboid,
    ObjectInstance,
    SceneSpec,
    SupportSurface,
    WorldState,
    place_object,
)

PICKUP_CATEGORIES = ("block", "can", "cup", "sponge", "bottle")
RECEPTACLE_CATEGORIES = ("plate", "tray", "bowl")
COLORS = ("red", "blue", "green", "yellow")

FRANKA_TABLE_HEIGHT = 0.58
RBY1_TABLE_HEIGHT = 0.72


@dataclass
class SceneGenParams:
    n_distractors_range: tuple[int, int] = (0, 2)
    pickup_half_lo: tuple[float, float, float] = (0.018, 0.018, 0.025)
    pickup_half_hi: tuple[float, float, float] = (0.032, 0.032, 0.05)
    receptacle_half_lo: tuple[float, float, float] = (0.08, 0.08, 0.012)
    receptacle_half_hi: tuple[float, float, float] = (0.12, 0.12, 0.025)
    place_margin: float = 0.01
    placement_attempts: int = 50
    table_size: tuple[float, float] = (0.5, 0.7)  # x depth, y width
    drawer_range: tuple[float, float] = (0.0, 0.25)
    door_range: tuple[float, float] = (0.0, 1.5707963267948966)

    def to_dict(self) -> dict:
        return {
            "n_distractors_range": list(self.n_distractors_range),
            "pickup_half_lo": list(self.pickup_half_lo),
            "pickup_half_hi": list(self.pickup_half_hi),
            "receptacle_half_lo": list(self.receptacle_half_lo),
            "receptacle_half_hi": list(self.receptacle_half_hi),
            "place_margin": self.place_margin,
            "placement_attempts": self.placement_attempts,
            "table_size": list(self.table_size),
            "drawer_range": list(self.drawer_range),
            "door_range": list(self.door_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenParams":
        kw = {}
        for key, val in d.items():
            kw[key] = tuple(val) if isinstance(val, list) else val
        return cls(**kw)


@dataclass
class GeneratedScene:
    state: WorldState
    target_id: str = ""
    receptacle_id: str = ""
    reference_id: str = ""
    color_attr: str = ""
    fixture_id: str = ""
    base_height: float = 0.0
    table_surface_id: str = "desk"


def _axes_orientation(x, y, z):
    return quat_from_matrix(np.column_stack([x, y, z]))


def _desk_scene(chain: KinematicChain, params: SceneGenParams) -> SceneSpec:
    if chain.name == "rby1":
        height = RBY1_TABLE_HEIGHT
        front = 0.55
    else:
        height = FRANKA_TABLE_HEIGHT
        front = 0.33
    dx, dy = params.table_size
    surface = SupportSurface(
        "desk", np.array([front, -dy / 2.0]), np.array([front + dx, dy / 2.0]), height
    )
    # the desk slab doubles as collision geometry; its top face sits 1 mm
    # below the support height so resting objects clear it even under
    # floating-point drift
    slab = Cuboid(
        "desk_slab",
        np.array([front + dx / 2.0, 0.0, height - 0.021]),
        np.array([dx / 2.0, dy / 2.0, 0.02]),
    )
    center = np.array([front + dx / 2.0, 0.0, height])
    return SceneSpec(surfaces=[surface], obstacles=[slab], workspace_center=center)


def _sample_object(rng, params: SceneGenParams, role: str, idx: int, category=None, color=None):
    if role == "receptacle":
        lo, hi = params.receptacle_half_lo, params.receptacle_half_hi
        category = category or str(rng.choice(RECEPTACLE_CATEGORIES))
    else:
        lo, hi = params.pickup_half_lo, params.pickup_half_hi
        category = category or str(rng.choice(PICKUP_CATEGORIES))
    half = rng.uniform(lo, hi)
    color = color if color is not None else str(rng.choice(COLORS))
    return ObjectInstance(
        id=f"{role}_{idx}",
        category=category,
        half_extents=half,
        pose=Pose.identity(),
        mass=float(rng.uniform(0.05, 0.5)),
        friction=float(rng.uniform(0.5, 1.0)),
        role=role,
        color=color,
    )


def _place_distractors(state, surface, rng, params, count, start_idx=0) -> bool:
    # distractors never duplicate a task object's (category, color) pair, so
    # referral expressions stay unambiguous
    taken = {(o.category, o.color) for o in state.objects.values()}
    for i in range(count):
        d = _sample_object(rng, params, "distractor", start_idx + i)
        for _ in range(10):
            if (d.category, d.color) not in taken:
                break
            d = _sample_object(rng, params, "distractor", start_idx + i)
        if place_object(state, d, surface, rng, params.placement_attempts, params.place_margin) is None:
            return False
    return True


def _drawer_fixture(height: float, rng, params: SceneGenParams) -> tuple[ArticulatedFixture, Cuboid]:
    y = float(rng.uniform(-0.15, 0.15))
    face_x = 1.0
    body = Cuboid("cabinet_body", np.array([face_x + 0.25, y, height / 2.0]), np.array([0.25, 0.3, height / 2.0]))
    handle_z = float(rng.uniform(0.55, 0.75) * height)
    handle_pos = np.array([face_x - 0.06, y, handle_z])
    # TCP at the handle: approach +x into the drawer face, fingers closing vertically.
    orientation = _axes_orientation(np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    fixture = ArticulatedFixture(
        id="drawer",
        joint_kind="prismatic",
        axis=np.array([-1.0, 0.0, 0.0]),
        anchor=np.array([face_x, y, handle_z]),
        range=params.drawer_range,
        value=0.0,
        handle_base=Pose(position=handle_pos, orientation=orientation),
        door_flag=False,
        category=str(rng.choice(["drawer", "cabinet"])),
    )
    return fixture, body


def _door_fixture(rng, params: SceneGenParams) -> ArticulatedFixture:
    hinge_y = -0.45
    width = 0.7
    handle_z = float(rng.uniform(0.85, 1.0))
    pull = bool(rng.random() < 0.5)
    axis = np.array([0.0, 0.0, 1.0]) if pull else np.array([0.0, 0.0, -1.0])
    handle_pos = np.array([1.0 - 0.05, hinge_y + width, handle_z])
    orientation = _axes_orientation(np.array([0.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    return ArticulatedFixture(
        id="door",
        joint_kind="revolute",
        axis=axis,
        anchor=np.array([1.0, hinge_y, 0.0]),
        range=params.door_range,
        value=0.0,
        handle_base=Pose(position=handle_pos, orientation=orientation),
        door_flag=True,
        category="door",
    )


def generate_scene(
    chain: KinematicChain,
    task_kind: str,
    rng: np.random.Generator,
    params: SceneGenParams | None = None,
    base_height: float | None = None,
) -> GeneratedScene | None:
    """Build a randomized scene for the given task kind; None when placement fails."""
    params = params or SceneGenParams()
    scene = _desk_scene(chain, params)
    out = GeneratedScene(state=None, base_height=base_height if base_height is not None else float(chain.base_pose.position[2]))

    if task_kind in ("open", "open_door"):
        if task_kind == "open":
            fixture, body = _drawer_fixture(RBY1_TABLE_HEIGHT + 0.4, rng, params)
            scene.obstacles.append(body)
        else:
            fixture = _door_fixture(rng, params)
        scene.surfaces = []  # articulated scenes are fixture-only
        scene.workspace_center = fixture.handle_base.position.copy()
        scene.fixtures.append(fixture)
        state = WorldState.from_scene(scene)
        out.state = state
        out.fixture_id = fixture.id
        return out

    surface = scene.surfaces[0]
    state = WorldState.from_scene(scene)
    n_distract = int(rng.integers(params.n_distractors_range[0], params.n_distractors_range[1] + 1))

    if task_kind == "pick":
        target = _sample_object(rng, params, "pickup", 0)
        if place_object(state, target, surface, rng, params.placement_attempts, params.place_margin) is None:
            return None
        if not _place_distractors(state, surface, rng, params, n_distract):
            return None
        out.target_id = target.id
    elif task_kind == "pick_and_place":
        recept = _sample_object(rng, params, "receptacle", 0)
        target = _sample_object(rng, params, "pickup", 0)
        if place_object(state, recept, surface, rng, params.placement_attempts, params.place_margin) is None:
            return None
        if place_object(state, target, surface, rng, params.placement_attempts, params.place_margin) is None:
            return None
        if not _place_distractors(state, surface, rng, params, n_distract):
            return None
        out.target_id = target.id
        out.receptacle_id = recept.id
    elif task_kind == "pnp_next_to":
        ref = _sample_object(rng, params, "reference", 0)
        target = _sample_object(rng, params, "pickup", 0)
        if place_object(state, ref, surface, rng, params.placement_attempts, params.place_margin) is None:
            return None
        if place_object(state, target, surface, rng, params.placement_attempts, params.place_margin) is None:
            return None
        if not _place_distractors(state, surface, rng, params, n_distract):
            return None
        out.target_id = target.id
        out.reference_id = ref.id
    elif task_kind == "pnp_color":
        colors = list(rng.choice(COLORS, size=2, replace=False))
        category = str(rng.choice(RECEPTACLE_CATEGORIES))
        half = rng.uniform(params.receptacle_half_lo, params.receptacle_half_hi)
        recepts = []
        for i, color in enumerate(colors):
            r = ObjectInstance(
                id=f"receptacle_{i}",
                category=category,
                half_extents=half.copy(),
                pose=Pose.identity(),
                mass=0.3,
                friction=0.8,
                role="receptacle",
                color=str(color),
            )
            if place_object(state, r, surface, rng, params.placement_attempts, params.place_margin) is None:
                return None
            recepts.append(r)
        target = _sample_object(rng, params, "pickup", 0)
        if place_object(state, target, surface, rng, params.placement_attempts, params.place_margin) is None:
            return None
        if not _place_distractors(state, surface, rng, params, n_distract):
            return None
        out.target_id = target.id
        out.receptacle_id = recepts[0].id  # the instructed (first-color) receptacle
        out.color_attr = str(colors[0])
    else:
        raise ValueError(f"unknown task kind: {task_kind}")

    out.state = state
    return out


def with_base_height(chain: KinematicChain, z: float) -> KinematicChain:
    """Copy of the chain with the root raised/lowered to height z."""
    base = Pose(position=np.array([chain.base_pose.position[0], chain.base_pose.position[1], z]),
                orientation=chain.base_pose.orientation.copy())
    return KinematicChain(
        joints=chain.joints,
        tcp_offset=chain.tcp_offset,
        base_pose=base,
        tcp_path=chain.tcp_path,
        collision_spheres=chain.collision_spheres,
        name=chain.name,
        control_rate=chain.control_rate,
    )
