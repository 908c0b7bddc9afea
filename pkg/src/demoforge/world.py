"""Quasi-static world model.

Objects are cuboids (AABB in their own frame, yaw-only orientation while
resting), fixtures are single-joint articulated handles, and the only
dynamics are: attached bodies follow the TCP rigidly, released bodies drop
straight down onto the highest support below, and fixtures move when their
grasped handle is pulled along the joint axis or arc.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, quat_from_axis_angle, quat_multiply
from .kinematics import KinematicChain, forward_kinematics, link_frames

# Asset size filters for task roles.
RECEPTACLE_MAX_SIDE = 0.50  # m, x and y
RECEPTACLE_MAX_HEIGHT = 0.15  # m
PICKUP_MAX_XY_DIAGONAL = RECEPTACLE_MAX_SIDE

# A grasped handle must move at least this far before the fixture registers motion.
FIXTURE_SLACK = 1e-3  # m

OBJECT_ROLES = ("pickup", "receptacle", "reference", "distractor")


class WorldError(ValueError):
    pass


@dataclass
class SupportSurface:
    id: str
    min_xy: np.ndarray
    max_xy: np.ndarray
    height: float

    def __post_init__(self):
        self.min_xy = np.asarray(self.min_xy, dtype=float).reshape(2)
        self.max_xy = np.asarray(self.max_xy, dtype=float).reshape(2)
        self.height = float(self.height)
        if np.any(self.max_xy <= self.min_xy):
            raise WorldError(f"degenerate surface {self.id}")

    def contains_xy(self, x: float, y: float) -> bool:
        return (
            self.min_xy[0] <= x <= self.max_xy[0] and self.min_xy[1] <= y <= self.max_xy[1]
        )


@dataclass
class Cuboid:
    """World-frame axis-aligned obstacle."""

    id: str
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(3)

    @property
    def min_corner(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def max_corner(self) -> np.ndarray:
        return self.center + self.half_extents


@dataclass
class ObjectInstance:
    id: str
    category: str
    half_extents: np.ndarray
    pose: Pose
    mass: float = 0.2
    friction: float = 0.8
    role: str = "distractor"
    color: str = ""

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=float).reshape(3)
        if self.role not in OBJECT_ROLES:
            raise WorldError(f"unknown object role: {self.role}")
        if self.role == "pickup":
            diag = 2.0 * math.hypot(self.half_extents[0], self.half_extents[1])
            if not diag < PICKUP_MAX_XY_DIAGONAL:
                raise WorldError(f"pickup object {self.id} fails graspable-size filter ({diag:.3f} m)")
        if self.role == "receptacle":
            if not (
                2.0 * self.half_extents[0] < RECEPTACLE_MAX_SIDE
                and 2.0 * self.half_extents[1] < RECEPTACLE_MAX_SIDE
                and 2.0 * self.half_extents[2] <= RECEPTACLE_MAX_HEIGHT
            ):
                raise WorldError(f"receptacle {self.id} fails size filter")

    def copy(self) -> "ObjectInstance":
        return ObjectInstance(
            id=self.id,
            category=self.category,
            half_extents=self.half_extents.copy(),
            pose=self.pose.copy(),
            mass=self.mass,
            friction=self.friction,
            role=self.role,
            color=self.color,
        )

    @property
    def yaw(self) -> float:
        w, x, y, z = self.pose.orientation
        return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))

    def bottom_z(self) -> float:
        return float(self.pose.position[2] - self.half_extents[2])

    def top_z(self) -> float:
        return float(self.pose.position[2] + self.half_extents[2])

    def footprint(self) -> np.ndarray:
        """XY corners (4, 2) of the yaw-rotated footprint, counter-clockwise."""
        hx, hy = self.half_extents[0], self.half_extents[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        corners = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return corners @ rot.T + self.pose.position[:2]

    def world_aabb(self) -> tuple[np.ndarray, np.ndarray]:
        """Enclosing world-frame AABB of the yaw-rotated cuboid."""
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        hx = c * self.half_extents[0] + s * self.half_extents[1]
        hy = s * self.half_extents[0] + c * self.half_extents[1]
        h = np.array([hx, hy, self.half_extents[2]])
        return self.pose.position - h, self.pose.position + h


@dataclass
class ArticulatedFixture:
    """Single-joint fixture; the handle follows the joint value rigidly."""

    id: str
    joint_kind: str  # revolute | prismatic
    axis: np.ndarray
    anchor: np.ndarray
    range: tuple[float, float]
    value: float
    handle_base: Pose  # handle pose at joint value 0
    door_flag: bool = False
    category: str = "fixture"

    def __post_init__(self):
        if self.joint_kind not in ("revolute", "prismatic"):
            raise WorldError(f"unknown fixture joint kind: {self.joint_kind}")
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = float(np.linalg.norm(self.axis))
        if n == 0.0:
            raise WorldError("zero fixture axis")
        self.axis = self.axis / n
        self.anchor = np.asarray(self.anchor, dtype=float).reshape(3)
        lo, hi = self.range
        self.range = (float(lo), float(hi))
        if not (lo <= self.value <= hi):
            raise WorldError(f"fixture {self.id} value outside range")

    def copy(self) -> "ArticulatedFixture":
        return ArticulatedFixture(
            id=self.id,
            joint_kind=self.joint_kind,
            axis=self.axis.copy(),
            anchor=self.anchor.copy(),
            range=self.range,
            value=self.value,
            handle_base=self.handle_base.copy(),
            door_flag=self.door_flag,
            category=self.category,
        )

    def handle_pose(self, value: float | None = None) -> Pose:
        v = self.value if value is None else float(value)
        if self.joint_kind == "prismatic":
            return Pose(
                position=self.handle_base.position + self.axis * v,
                orientation=self.handle_base.orientation,
            )
        q = quat_from_axis_angle(self.axis, v)
        rel = self.handle_base.position - self.anchor
        rot = Pose(position=np.zeros(3), orientation=q)
        return Pose(
            position=self.anchor + rot.transform_direction(rel),
            orientation=quat_multiply(q, self.handle_base.orientation),
        )

    def open_fraction(self) -> float:
        lo, hi = self.range
        if hi == lo:
            return 0.0
        return (self.value - lo) / (hi - lo)

    def swing_direction(self) -> np.ndarray:
        """Unit direction the handle moves when the joint value increases."""
        if self.joint_kind == "prismatic":
            return self.axis.copy()
        d = np.cross(self.axis, self.handle_base.position - self.anchor)
        n = float(np.linalg.norm(d))
        if n < 1e-9:
            raise WorldError(f"fixture {self.id}: handle lies on the hinge axis")
        return d / n


@dataclass
class SceneSpec:
    surfaces: list[SupportSurface] = field(default_factory=list)
    obstacles: list[Cuboid] = field(default_factory=list)
    fixtures: list[ArticulatedFixture] = field(default_factory=list)
    workspace_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.workspace_center = np.asarray(self.workspace_center, dtype=float).reshape(3)

    def surface(self, sid: str) -> SupportSurface:
        for s in self.surfaces:
            if s.id == sid:
                return s
        raise WorldError(f"no surface {sid}")

    def to_dict(self) -> dict:
        return {
            "surfaces": [
                {"id": s.id, "min_xy": list(map(float, s.min_xy)), "max_xy": list(map(float, s.max_xy)), "height": s.height}
                for s in self.surfaces
            ],
            "obstacles": [
                {"id": o.id, "center": list(map(float, o.center)), "half_extents": list(map(float, o.half_extents))}
                for o in self.obstacles
            ],
            "fixtures": [
                {
                    "id": f.id,
                    "joint_kind": f.joint_kind,
                    "axis": list(map(float, f.axis)),
                    "anchor": list(map(float, f.anchor)),
                    "range": list(f.range),
                    "value": f.value,
                    "handle_base": f.handle_base.to_flat(),
                    "door_flag": f.door_flag,
                    "category": f.category,
                }
                for f in self.fixtures
            ],
            "workspace_center": list(map(float, self.workspace_center)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            surfaces=[
                SupportSurface(s["id"], np.array(s["min_xy"]), np.array(s["max_xy"]), s["height"])
                for s in d.get("surfaces", [])
            ],
            obstacles=[
                Cuboid(o["id"], np.array(o["center"]), np.array(o["half_extents"]))
                for o in d.get("obstacles", [])
            ],
            fixtures=[
                ArticulatedFixture(
                    id=f["id"],
                    joint_kind=f["joint_kind"],
                    axis=np.array(f["axis"]),
                    anchor=np.array(f["anchor"]),
                    range=tuple(f["range"]),
                    value=f["value"],
                    handle_base=Pose.from_flat(f["handle_base"]),
                    door_flag=f.get("door_flag", False),
                    category=f.get("category", "fixture"),
                )
                for f in d.get("fixtures", [])
            ],
            workspace_center=np.array(d.get("workspace_center", [0.0, 0.0, 0.0])),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "SceneSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Attachment:
    entity_id: str
    entity_kind: str  # "object" | "fixture"
    grasp_transform: Pose  # TCP -> entity pose (or TCP -> handle for fixtures)


@dataclass
class WorldState:
    scene: SceneSpec
    objects: dict[str, ObjectInstance] = field(default_factory=dict)
    fixtures: dict[str, ArticulatedFixture] = field(default_factory=dict)
    attachments: dict[str, Attachment] = field(default_factory=dict)
    robot_config: np.ndarray | None = None

    @classmethod
    def from_scene(cls, scene: SceneSpec) -> "WorldState":
        return cls(scene=scene, fixtures={f.id: f.copy() for f in scene.fixtures})

    def clone(self) -> "WorldState":
        return WorldState(
            scene=self.scene,
            objects={k: v.copy() for k, v in self.objects.items()},
            fixtures={k: v.copy() for k, v in self.fixtures.items()},
            attachments={
                k: Attachment(a.entity_id, a.entity_kind, a.grasp_transform.copy())
                for k, a in self.attachments.items()
            },
            robot_config=None if self.robot_config is None else self.robot_config.copy(),
        )

    def attached_ids(self) -> set[str]:
        return {a.entity_id for a in self.attachments.values()}


# -- geometric primitives -------------------------------------------------------


def aabb_overlap(min_a, max_a, min_b, max_b) -> bool:
    """Strict interior overlap; touching faces do not count."""
    return bool(np.all(max_a > min_b) and np.all(max_b > min_a))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman intersection of convex polygons (CCW, (n, 2))."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            return np.zeros((0, 2))
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= -1e-12
        for cur in input_pts:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= -1e-12
            if cur_in != prev_in:
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = ex * dy - ey * dx
                if abs(denom) > 1e-15:
                    t = (ex * (a[1] - prev[1]) - ey * (a[0] - prev[0])) / denom
                    output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def sphere_box_distance(center: np.ndarray, box_min: np.ndarray, box_max: np.ndarray) -> float:
    closest = np.clip(center, box_min, box_max)
    return float(np.linalg.norm(center - closest))


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else max(0.0, min(1.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def polygon_gap(pa: np.ndarray, pb: np.ndarray) -> float:
    """Surface-to-surface XY distance between two convex polygons; 0 when they
    touch or overlap."""
    if polygon_area(clip_polygon(pa, pb)) > 0.0:
        return 0.0
    best = math.inf
    for poly_a, poly_b in ((pa, pb), (pb, pa)):
        n = len(poly_b)
        for p in poly_a:
            for i in range(n):
                best = min(best, _point_segment_distance(p, poly_b[i], poly_b[(i + 1) % n]))
    return best


# -- support and contact ----------------------------------------------------------


def support_fraction(obj: ObjectInstance, receptacle: ObjectInstance, contact_tol: float = 1e-6) -> float:
    """Fraction of the object's footprint overlapping the receptacle top face
    while the object rests on it (proxy for weight support)."""
    if not abs(obj.bottom_z() - receptacle.top_z()) <= contact_tol:
        return 0.0
    inter = clip_polygon(obj.footprint(), receptacle.footprint())
    area = polygon_area(obj.footprint())
    if area <= 0.0:
        return 0.0
    return polygon_area(inter) / area


def _xy_overlaps(obj: ObjectInstance, min_xy, max_xy) -> bool:
    omin, omax = obj.world_aabb()
    return bool(np.all(omax[:2] > np.asarray(min_xy)) and np.all(np.asarray(max_xy) > omin[:2]))


def supports_below(state: WorldState, obj: ObjectInstance) -> list[tuple[str, float]]:
    """(support id, top z) for every support under the object footprint."""
    out = [("floor", 0.0)]
    for s in state.scene.surfaces:
        if _xy_overlaps(obj, s.min_xy, s.max_xy):
            out.append((s.id, s.height))
    for o in state.scene.obstacles:
        if _xy_overlaps(obj, o.min_corner[:2], o.max_corner[:2]):
            out.append((o.id, float(o.max_corner[2])))
    for other in state.objects.values():
        if other.id == obj.id:
            continue
        omin, omax = other.world_aabb()
        if _xy_overlaps(obj, omin[:2], omax[:2]):
            out.append((other.id, other.top_z()))
    return out


def resting_support(state: WorldState, obj: ObjectInstance, contact_tol: float = 1e-6) -> str | None:
    """Id of the support the object is in vertical contact with, if any."""
    bottom = obj.bottom_z()
    best = None
    for sid, top in supports_below(state, obj):
        if abs(bottom - top) <= contact_tol:
            best = sid
    return best


def is_supported(state: WorldState, obj: ObjectInstance, contact_tol: float = 1e-6) -> bool:
    return resting_support(state, obj, contact_tol) is not None


# -- placement ---------------------------------------------------------------------


def place_object(
    state: WorldState,
    obj: ObjectInstance,
    surface: SupportSurface,
    rng: np.random.Generator,
    max_attempts: int = 50,
    margin: float = 0.0,
) -> Pose | None:
    """Rejection-sample a resting pose on the surface; adds the object on success."""
    for _ in range(max_attempts):
        yaw = rng.uniform(-math.pi, math.pi)
        c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
        hx = c * obj.half_extents[0] + s * obj.half_extents[1]
        hy = s * obj.half_extents[0] + c * obj.half_extents[1]
        lo_x, hi_x = surface.min_xy[0] + hx + margin, surface.max_xy[0] - hx - margin
        lo_y, hi_y = surface.min_xy[1] + hy + margin, surface.max_xy[1] - hy - margin
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        x = rng.uniform(lo_x, hi_x)
        y = rng.uniform(lo_y, hi_y)
        pose = Pose(
            position=np.array([x, y, surface.height + obj.half_extents[2]]),
            orientation=quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw),
        )
        candidate = obj.copy()
        candidate.pose = pose
        cmin, cmax = candidate.world_aabb()
        collision = False
        for o in state.scene.obstacles:
            if aabb_overlap(cmin, cmax, o.min_corner, o.max_corner):
                collision = True
                break
        if not collision:
            for other in state.objects.values():
                omin, omax = other.world_aabb()
                if aabb_overlap(cmin, cmax, omin, omax):
                    collision = True
                    break
        if not collision:
            obj.pose = pose
            state.objects[obj.id] = obj
            return pose
    return None


# -- robot collision ------------------------------------------------------------------


def collide_config(
    chain: KinematicChain,
    q: np.ndarray,
    state: WorldState,
    ignore_ids: frozenset | set = frozenset(),
) -> bool:
    """True iff any robot collision sphere intersects an obstacle cuboid or a
    non-ignored object AABB.  Tangent contact (distance == radius) is free."""
    frames = link_frames(chain, q)
    centers = np.array(
        [frames[s.link + 1][1] + frames[s.link + 1][0] @ s.offset for s in chain.collision_spheres]
    )
    radii = np.array([s.radius for s in chain.collision_spheres])
    boxes = [(o.min_corner, o.max_corner) for o in state.scene.obstacles]
    for obj in state.objects.values():
        if obj.id in ignore_ids or obj.id in state.attached_ids():
            continue
        boxes.append(obj.world_aabb())
    for bmin, bmax in boxes:
        for c, r in zip(centers, radii):
            if sphere_box_distance(c, bmin, bmax) < r:
                return True
    return False


# -- quasi-static stepping --------------------------------------------------------------


def _settle_object(state: WorldState, obj: ObjectInstance) -> None:
    bottom = obj.bottom_z()
    tops = [top for _, top in supports_below(state, obj) if top <= bottom + 1e-9]
    target = max(tops) if tops else 0.0
    if target < bottom - 1e-12:
        obj.pose = Pose(
            position=obj.pose.position + np.array([0.0, 0.0, target - bottom]),
            orientation=obj.pose.orientation,
        )


def _fixture_pull(fixture: ArticulatedFixture, desired_handle_pos: np.ndarray) -> float:
    """Joint value whose handle position is closest to the desired position."""
    lo, hi = fixture.range
    if fixture.joint_kind == "prismatic":
        v = float(np.dot(fixture.axis, desired_handle_pos - fixture.handle_base.position))
        return min(max(v, lo), hi)
    axis = fixture.axis
    r0 = fixture.handle_base.position - fixture.anchor
    r0p = r0 - np.dot(r0, axis) * axis
    u = desired_handle_pos - fixture.anchor
    up = u - np.dot(u, axis) * axis
    n0 = np.linalg.norm(r0p)
    nu = np.linalg.norm(up)
    if n0 < 1e-9 or nu < 1e-9:
        return fixture.value
    a = r0p / n0
    b = up / nu
    angle = math.atan2(float(np.dot(axis, np.cross(a, b))), float(np.dot(a, b)))
    return min(max(angle, lo), hi)


def step_quasistatic(
    state: WorldState, chain: KinematicChain, new_q: np.ndarray
) -> WorldState:
    """Advance the world to a new robot configuration.

    Attached objects track the TCP rigidly; a grasped fixture handle drags its
    joint value (with a 1 mm slack threshold); unsupported free objects drop
    onto the highest support below.
    """
    new_q = chain.check_config(new_q)
    out = state.clone()
    out.robot_config = new_q.copy()
    tcp = forward_kinematics(chain, new_q)
    for gripper, att in out.attachments.items():
        if att.entity_kind == "object":
            obj = out.objects[att.entity_id]
            obj.pose = tcp.compose(att.grasp_transform)
        else:
            fixture = out.fixtures[att.entity_id]
            desired = tcp.compose(att.grasp_transform).position
            v_new = _fixture_pull(fixture, desired)
            moved = np.linalg.norm(
                fixture.handle_pose(v_new).position - fixture.handle_pose(fixture.value).position
            )
            if moved >= FIXTURE_SLACK:
                fixture.value = v_new
    attached = out.attached_ids()
    for obj in out.objects.values():
        if obj.id not in attached:
            _settle_object(out, obj)
    return out


def attach(state: WorldState, gripper: str, entity_id: str, chain: KinematicChain) -> WorldState:
    """Grasp an object or fixture handle; records the rigid TCP -> entity transform."""
    out = state.clone()
    if out.robot_config is None:
        raise WorldError("cannot attach without a robot configuration")
    tcp = forward_kinematics(chain, out.robot_config)
    if entity_id in out.objects:
        rel = tcp.inverse().compose(out.objects[entity_id].pose)
        out.attachments[gripper] = Attachment(entity_id, "object", rel)
    elif entity_id in out.fixtures:
        rel = tcp.inverse().compose(out.fixtures[entity_id].handle_pose())
        out.attachments[gripper] = Attachment(entity_id, "fixture", rel)
    else:
        raise WorldError(f"no entity {entity_id}")
    return out


def detach(state: WorldState, gripper: str, chain: KinematicChain) -> WorldState:
    """Release; the freed object settles immediately."""
    out = state.clone()
    att = out.attachments.pop(gripper, None)
    if att is not None and att.entity_kind == "object":
        _settle_object(out, out.objects[att.entity_id])
    return out
