"""Episode/step schema, newline-delimited text serialization, validation and
statistics reporting.

One file per episode: a JSON header line followed by one JSON line per step.
All floats serialize as shortest-roundtrip decimals (Python repr), keys are
sorted, so identical records produce byte-identical files.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose
from .kinematics import forward_kinematics, load_preset
from .scenes import with_base_height
from .tasks import SuccessParams, TaskSpec, evaluate_success
from .world import ObjectInstance, SceneSpec, WorldState

SCHEMA_VERSION = "1.0"
MANIFEST_NAME = "manifest.jsonl"
ACTION_CONSISTENCY_TOL = 1e-9
TIMESTAMP_TOL = 1e-9


class SchemaError(ValueError):
    pass


def _floats(seq) -> list[float]:
    return [float(v) for v in seq]


@dataclass
class StepRecord:
    t: float
    joint_positions: list[float]
    joint_velocities: list[float]
    tcp_pose: list[float]  # 7
    base_pose: list[float]  # 7
    actions: dict  # abs_joint, delta_joint, ee_twist, ee_abs_pose, base_cmd
    gripper_command: str
    grasp_state: str  # attached entity id or ""
    phase: str
    retry_count: int
    replans: int
    noise_applied: list[float]  # 6
    object_poses: dict[str, list[float]]
    fixture_values: dict[str, float]
    task_success: bool
    object_points_2d: dict[str, dict[str, list[float] | None]]

    def to_dict(self) -> dict:
        return {
            "t": float(self.t),
            "joint_positions": _floats(self.joint_positions),
            "joint_velocities": _floats(self.joint_velocities),
            "tcp_pose": _floats(self.tcp_pose),
            "base_pose": _floats(self.base_pose),
            "actions": {
                "abs_joint": _floats(self.actions["abs_joint"]),
                "delta_joint": _floats(self.actions["delta_joint"]),
                "ee_twist": _floats(self.actions["ee_twist"]),
                "ee_abs_pose": _floats(self.actions["ee_abs_pose"]),
                "base_cmd": None if self.actions.get("base_cmd") is None else _floats(self.actions["base_cmd"]),
            },
            "gripper_command": self.gripper_command,
            "grasp_state": self.grasp_state,
            "phase": self.phase,
            "retry_count": int(self.retry_count),
            "replans": int(self.replans),
            "noise_applied": _floats(self.noise_applied),
            "object_poses": {k: _floats(v) for k, v in sorted(self.object_poses.items())},
            "fixture_values": {k: float(v) for k, v in sorted(self.fixture_values.items())},
            "task_success": bool(self.task_success),
            "object_points_2d": {
                cam: {oid: (None if uv is None else _floats(uv)) for oid, uv in sorted(pts.items())}
                for cam, pts in sorted(self.object_points_2d.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class CameraRecord:
    name: str
    kind: str
    pose: list[float]  # world pose at episode start (7)
    vertical_fov: float
    resolution: list[int]
    post_crop: list[int] | None
    mount_frame: str  # "world" | "tcp" | "base"
    mount_offset: list[float] | None  # 7, when mounted

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "pose": _floats(self.pose),
            "vertical_fov": float(self.vertical_fov),
            "resolution": [int(v) for v in self.resolution],
            "post_crop": None if self.post_crop is None else [int(v) for v in self.post_crop],
            "mount_frame": self.mount_frame,
            "mount_offset": None if self.mount_offset is None else _floats(self.mount_offset),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class EpisodeRecord:
    episode_id: str
    robot: str  # franka | rby1
    task: TaskSpec
    task_tag: str
    instruction: str
    scene_seed: list[int]  # (base_seed, episode_index)
    domain_params: dict
    camera_models: list[CameraRecord]
    scene: dict  # SceneSpec.to_dict()
    objects: list[dict]  # initial object instances
    object_start_goal_poses: dict[str, dict]
    expressions: dict[str, list[str]]
    initial_config: list[float]
    base_height: float
    control_rate: float
    retry_count: int
    success: bool
    steps: list[StepRecord]
    version: str = SCHEMA_VERSION

    def header_dict(self) -> dict:
        return {
            "version": self.version,
            "episode_id": self.episode_id,
            "robot": self.robot,
            "task": self.task.to_dict(),
            "task_tag": self.task_tag,
            "instruction": self.instruction,
            "scene_seed": [int(v) for v in self.scene_seed],
            "domain_params": self.domain_params,
            "camera_models": [c.to_dict() for c in self.camera_models],
            "scene": self.scene,
            "objects": self.objects,
            "object_start_goal_poses": self.object_start_goal_poses,
            "expressions": {k: list(v) for k, v in sorted(self.expressions.items())},
            "initial_config": _floats(self.initial_config),
            "base_height": float(self.base_height),
            "control_rate": float(self.control_rate),
            "retry_count": int(self.retry_count),
            "success": bool(self.success),
            "n_steps": len(self.steps),
        }


def _robot_preset_name(robot: str) -> str:
    return "franka_fr3" if robot in ("franka", "franka_fr3") else "rby1"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def validate_record(record: EpisodeRecord) -> list[str]:
    """Schema and cross-field checks; empty list means valid."""
    errs: list[str] = []
    if not record.success:
        errs.append("persisted episode must have success=true")
    if not 0 <= record.retry_count <= 3:
        errs.append(f"retry_count {record.retry_count} outside [0, 3]")
    if not record.steps:
        errs.append("episode has no steps")
        return errs
    chain = with_base_height(load_preset(_robot_preset_name(record.robot)), record.base_height)
    rate = record.control_rate
    q_prev = np.asarray(record.initial_config, dtype=float)
    for k, s in enumerate(record.steps):
        if abs(s.t - k / rate) > TIMESTAMP_TOL:
            errs.append(f"step {k}: timestamp {s.t} != {k / rate}")
        if not 0 <= s.retry_count <= 3:
            errs.append(f"step {k}: retry_count {s.retry_count} outside [0, 3]")
        abs_a = np.asarray(s.actions["abs_joint"], dtype=float)
        delta = np.asarray(s.actions["delta_joint"], dtype=float)
        if np.max(np.abs(delta - (abs_a - q_prev))) > ACTION_CONSISTENCY_TOL:
            errs.append(f"step {k}: delta_joint inconsistent with abs_joint")
        q_now = np.asarray(s.joint_positions, dtype=float)
        if np.max(np.abs(q_now - abs_a)) > ACTION_CONSISTENCY_TOL:
            errs.append(f"step {k}: joint_positions disagree with abs_joint command")
        pose = forward_kinematics(chain, q_now)
        ee = np.asarray(s.actions["ee_abs_pose"], dtype=float)
        if np.max(np.abs(ee[:3] - pose.position)) > ACTION_CONSISTENCY_TOL:
            errs.append(f"step {k}: ee_abs_pose inconsistent with FK")
        tcp = np.asarray(s.tcp_pose, dtype=float)
        if np.max(np.abs(tcp[:3] - pose.position)) > ACTION_CONSISTENCY_TOL:
            errs.append(f"step {k}: tcp_pose inconsistent with FK")
        prev_pose = forward_kinematics(chain, q_prev)
        twist = np.asarray(s.actions["ee_twist"], dtype=float)
        if np.max(np.abs(twist[:3] - (pose.position - prev_pose.position))) > ACTION_CONSISTENCY_TOL:
            errs.append(f"step {k}: ee_twist linear part inconsistent")
        if s.actions.get("base_cmd") is not None:
            base_idx = chain.group_indices("base")
            cmd = np.asarray(s.actions["base_cmd"], dtype=float)
            if np.max(np.abs(cmd - (abs_a[base_idx] - q_prev[base_idx]))) > ACTION_CONSISTENCY_TOL:
                errs.append(f"step {k}: base_cmd inconsistent with joint delta")
        q_prev = q_now
    if record.task.kind == "pnp_color":
        recs = [o for o in record.objects if o["role"] == "receptacle"]
        if len(recs) != 2:
            errs.append("pnp_color scene must contain exactly two receptacles")
        elif not (
            recs[0]["category"] == recs[1]["category"]
            and recs[0]["half_extents"] == recs[1]["half_extents"]
            and recs[0]["color"] != recs[1]["color"]
        ):
            errs.append("pnp_color receptacles must be identical except for color")
    return errs


def write_episode(record: EpisodeRecord, out_dir: str | Path) -> Path:
    """Write one episode file and append its manifest line atomically."""
    errs = validate_record(record)
    if errs:
        raise SchemaError("; ".join(errs))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{record.episode_id}.jsonl"
    lines = [_dumps(record.header_dict())]
    lines.extend(_dumps(s.to_dict()) for s in record.steps)
    path.write_text("\n".join(lines) + "\n")
    manifest_line = _dumps(
        {
            "episode_id": record.episode_id,
            "file": path.name,
            "robot": record.robot,
            "task_kind": record.task.kind,
            "task_tag": record.task_tag,
            "n_steps": len(record.steps),
            "control_rate": float(record.control_rate),
            "retry_count": int(record.retry_count),
        }
    )
    with open(out_dir / MANIFEST_NAME, "a") as fh:
        fh.write(manifest_line + "\n")
        fh.flush()
    return path


def read_episode(path: str | Path) -> EpisodeRecord:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SchemaError(f"empty episode file: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: bad header: {e}") from e
    major = str(header.get("version", "")).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"{path}: unsupported schema version {header.get('version')}")
    steps = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            steps.append(StepRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise SchemaError(f"{path}:{ln}: bad step record: {e}") from e
    if len(steps) != header.get("n_steps"):
        raise SchemaError(f"{path}: header claims {header.get('n_steps')} steps, found {len(steps)}")
    return EpisodeRecord(
        episode_id=header["episode_id"],
        robot=header["robot"],
        task=TaskSpec.from_dict(header["task"]),
        task_tag=header["task_tag"],
        instruction=header["instruction"],
        scene_seed=header["scene_seed"],
        domain_params=header["domain_params"],
        camera_models=[CameraRecord.from_dict(c) for c in header["camera_models"]],
        scene=header["scene"],
        objects=header["objects"],
        object_start_goal_poses=header["object_start_goal_poses"],
        expressions=header["expressions"],
        initial_config=header["initial_config"],
        base_height=header["base_height"],
        control_rate=header["control_rate"],
        retry_count=header["retry_count"],
        success=header["success"],
        steps=steps,
        version=header["version"],
    )


def load_manifest(dataset_dir: str | Path) -> list[dict]:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise SchemaError(f"no manifest at {path}")
    out = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}:{ln}: bad manifest line: {e}") from e
    return out


# -- statistics --------------------------------------------------------------------


@dataclass
class StatsRow:
    task: str
    robot: str
    episodes: int
    frames: int
    avg_length_s: float
    total_hours: float


def compute_stats(manifest: list[dict]) -> list[StatsRow]:
    """Per-(task, robot) episode/frame counts with
    avg length = frames / episodes / rate and hours = frames / rate / 3600."""
    groups: dict[tuple[str, str], dict] = {}
    for entry in manifest:
        key = (entry["task_kind"], entry["robot"])
        g = groups.setdefault(key, {"episodes": 0, "frames": 0, "rate": float(entry["control_rate"])})
        g["episodes"] += 1
        g["frames"] += int(entry["n_steps"])
    rows = []
    for (task, robot), g in sorted(groups.items()):
        rate = g["rate"]
        rows.append(
            StatsRow(
                task=task,
                robot=robot,
                episodes=g["episodes"],
                frames=g["frames"],
                avg_length_s=g["frames"] / g["episodes"] / rate,
                total_hours=g["frames"] / rate / 3600.0,
            )
        )
    return rows


# -- state reconstruction and dataset validation --------------------------------------


def reconstruct_states(record: EpisodeRecord) -> list[WorldState]:
    """Initial state plus one state per step, rebuilt from the stored scene
    geometry, per-step object poses and fixture values."""
    scene = SceneSpec.from_dict(record.scene)

    def build(obj_poses: dict[str, list[float]], fixture_values: dict[str, float], q) -> WorldState:
        state = WorldState.from_scene(scene)
        for spec in record.objects:
            pose = Pose.from_flat(obj_poses[spec["id"]])
            state.objects[spec["id"]] = ObjectInstance(
                id=spec["id"],
                category=spec["category"],
                half_extents=np.array(spec["half_extents"]),
                pose=pose,
                mass=spec["mass"],
                friction=spec["friction"],
                role=spec["role"],
                color=spec.get("color", ""),
            )
        for fid, value in fixture_values.items():
            state.fixtures[fid].value = float(value)
        state.robot_config = np.asarray(q, dtype=float)
        return state

    initial_poses = {spec["id"]: spec["start_pose"] for spec in record.objects}
    initial_fixtures = {f["id"]: f["value"] for f in record.scene.get("fixtures", [])}
    out = [build(initial_poses, initial_fixtures, record.initial_config)]
    for s in record.steps:
        out.append(build(s.object_poses, s.fixture_values, s.joint_positions))
    return out


@dataclass
class ValidationReport:
    episodes: int = 0
    steps: int = 0
    rechecked: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_dataset(
    dataset_dir: str | Path,
    recheck_fraction: float = 0.2,
    success_params: SuccessParams | None = None,
) -> ValidationReport:
    """Schema, action-consistency and timestamp checks over every episode,
    plus success re-verification on a deterministic sample fraction."""
    report = ValidationReport()
    dataset_dir = Path(dataset_dir)
    try:
        manifest = load_manifest(dataset_dir)
    except SchemaError as e:
        report.violations.append(str(e))
        return report
    recheck_every = max(1, int(round(1.0 / recheck_fraction))) if recheck_fraction > 0 else 0
    for i, entry in enumerate(manifest):
        path = dataset_dir / entry["file"]
        try:
            record = read_episode(path)
        except SchemaError as e:
            report.violations.append(str(e))
            continue
        report.episodes += 1
        report.steps += len(record.steps)
        for err in validate_record(record):
            report.violations.append(f"{record.episode_id}: {err}")
        if record.episode_id != entry["episode_id"]:
            report.violations.append(f"{path.name}: manifest/header episode id mismatch")
        if recheck_every and i % recheck_every == 0:
            report.rechecked += 1
            oracle_mode = "consecutive" if record.robot == "rby1" else "any"
            try:
                history = reconstruct_states(record)
                rep = evaluate_success(record.task, history, success_params, oracle_mode)
            except Exception as e:  # reconstruction failures are violations, not crashes
                report.violations.append(f"{record.episode_id}: re-verification failed: {e}")
                continue
            if not rep.oracle:
                report.violations.append(f"{record.episode_id}: success re-verification failed")
            flags = [s.task_success for s in record.steps]
            if flags != rep.per_step[1:]:
                report.violations.append(f"{record.episode_id}: stored per-step success flags disagree")
    return report
