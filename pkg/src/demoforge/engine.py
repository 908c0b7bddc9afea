"""Generation orchestration: seeded episode pipeline (scene -> task ->
randomization -> cameras -> expert -> evaluation -> persistence), a worker
pool whose output is independent of the worker count, statistics and
evaluation re-runs.
"""
from __future__ import annotations

import functools
import json
import logging
import math
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actions import MixtureSpec
from .dataset import (
    CameraRecord,
    EpisodeRecord,
    StepRecord,
    load_manifest,
    read_episode,
    reconstruct_states,
    write_episode,
)
from .geometry import CameraModel, Pose, look_at_orientation, point_in_image, project_point
from .kinematics import KinematicChain, forward_kinematics, load_preset
from .language import (
    build_context,
    door_verb,
    expression_probabilities,
    load_templates,
    render_instruction,
    sample_referring_expression,
)
from .planner import GRIPPER_NAME, PlannerConfig, run_episode
from .randomization import (
    CAMERA_RIGS,
    DomainRanges,
    NoiseProfile,
    episode_rng,
    sample_camera,
    sample_domain_params,
    sample_initial_config,
)
from .scenes import SceneGenParams, generate_scene, with_base_height
from .tasks import SuccessParams, TaskSpec, evaluate_success

logger = logging.getLogger(__name__)

VISIBILITY_MARGIN = 0.05
WRIST_MOUNT = Pose(position=np.array([0.0, -0.05, -0.06]))
SHOULDER_MOUNT = np.array([-0.20, 0.35, 0.45])  # offset from the robot base
RBY1_HEAD_MOUNT = np.array([0.05, 0.0, 1.45])

PNP_RANDOM_HEIGHT_RANGE = (0.43, 0.73)

TAG_TO_KIND = {"pnp_fixed": "pick_and_place", "pnp_random": "pick_and_place"}


class EngineError(RuntimeError):
    pass


def tag_kind(tag: str) -> str:
    return TAG_TO_KIND.get(tag, tag)


@dataclass
class EngineConfig:
    robot: str = "franka_fr3"
    episodes: int = 10
    base_seed: int = 0
    workers: int = 1
    out_dir: str = "dataset"
    noise: bool = True
    mixture: MixtureSpec | None = None
    scene: SceneGenParams = field(default_factory=SceneGenParams)
    planner: dict = field(default_factory=dict)
    domain: DomainRanges = field(default_factory=DomainRanges)
    context_scope: str = "scene"
    abort_window: int = 50

    def __post_init__(self):
        if self.robot not in ("franka_fr3", "rby1"):
            raise EngineError(f"unknown robot preset: {self.robot}")
        if self.episodes < 1:
            raise EngineError("episode count must be >= 1")
        if self.mixture is None:
            self.mixture = (
                MixtureSpec.rby1_default() if self.robot == "rby1" else MixtureSpec.franka_default()
            )
        for tag, _ in self.mixture.entries:
            kind = tag_kind(tag)
            if kind in ("open", "open_door") and self.robot != "rby1":
                raise EngineError(f"task {tag} requires the rby1 preset")

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        kw = dict(d)
        if "mixture" in kw and kw["mixture"] is not None:
            kw["mixture"] = MixtureSpec(entries=[(t, float(r)) for t, r in kw["mixture"].items()])
        if "scene" in kw and isinstance(kw["scene"], dict):
            kw["scene"] = SceneGenParams.from_dict(kw["scene"])
        if "domain" in kw and isinstance(kw["domain"], dict):
            kw["domain"] = DomainRanges.from_dict(kw["domain"])
        try:
            return cls(**kw)
        except TypeError as e:
            raise EngineError(f"bad config: {e}") from e

    @classmethod
    def from_file(cls, path: str | Path) -> "EngineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise EngineError(f"cannot read config {path}: {e}") from e


@functools.lru_cache(maxsize=8)
def _preset(name: str) -> KinematicChain:
    return load_preset(name)


def _base_pose_from_config(chain: KinematicChain, q: np.ndarray) -> Pose:
    base_idx = chain.group_indices("base")
    if not base_idx:
        return chain.base_pose.copy()
    from .geometry import quat_from_axis_angle

    x, y, yaw = (float(q[i]) for i in base_idx)
    return Pose(position=np.array([x, y, 0.0]), orientation=quat_from_axis_angle([0, 0, 1], yaw))


def _camera_plan(robot: str) -> list[tuple[str, str, str]]:
    """(name, rig kind, mount frame) per robot."""
    if robot == "rby1":
        return [("head", "rby1-head", "base"), ("wrist", "rby1-wrist", "tcp")]
    return [
        ("wrist", "wrist", "tcp"),
        ("shoulder", "fixed-shoulder", "base"),
        ("exo_zed2", "exo-zed2", "world"),
        ("exo_gopro", "exo-gopro", "world"),
    ]


def _interest_points(task: TaskSpec, state) -> dict[str, np.ndarray]:
    points: dict[str, np.ndarray] = {}
    if task.kind in ("open", "open_door"):
        points[task.fixture_id] = state.fixtures[task.fixture_id].handle_pose().position
        return points
    points[task.target_id] = state.objects[task.target_id].pose.position
    if task.receptacle_id:
        points[task.receptacle_id] = state.objects[task.receptacle_id].pose.position
    if task.reference_id:
        points[task.reference_id] = state.objects[task.reference_id].pose.position
    return points


def _sample_cameras(chain, task, state, rng) -> list[CameraRecord] | None:
    q0 = state.robot_config
    tcp0 = forward_kinematics(chain, q0)
    base0 = _base_pose_from_config(chain, q0)
    center = state.scene.workspace_center
    interest = _interest_points(task, state)

    def visible(cam: CameraModel) -> bool:
        for p in interest.values():
            if not point_in_image(cam, p, VISIBILITY_MARGIN):
                return False
        return point_in_image(cam, tcp0.position, VISIBILITY_MARGIN)

    records: list[CameraRecord] = []
    for name, kind, frame in _camera_plan(chain.name):
        rig = CAMERA_RIGS[kind]
        if frame == "tcp":
            anchor = tcp0.compose(WRIST_MOUNT)
            cam = sample_camera(rig, anchor, lambda c: True, rng)
        elif frame == "base":
            mount = RBY1_HEAD_MOUNT if chain.name == "rby1" else SHOULDER_MOUNT
            pos = base0.transform_point(mount)
            anchor = Pose(position=pos, orientation=look_at_orientation(pos, center))
            cam = sample_camera(rig, anchor, visible, rng)
        else:
            cam = sample_camera(rig, Pose.identity(), visible, rng, workspace_center=center)
        if cam is None:
            return None
        if frame == "tcp":
            mount_offset = tcp0.inverse().compose(cam.pose).to_flat()
        elif frame == "base":
            mount_offset = base0.inverse().compose(cam.pose).to_flat()
        else:
            mount_offset = None
        records.append(
            CameraRecord(
                name=name,
                kind=kind,
                pose=cam.pose.to_flat(),
                vertical_fov=cam.vertical_fov,
                resolution=list(cam.resolution),
                post_crop=None if rig.post_crop is None else list(rig.post_crop),
                mount_frame=frame,
                mount_offset=mount_offset,
            )
        )
    return records


def _camera_pose_at(rec: CameraRecord, chain, q: np.ndarray, tcp: Pose) -> Pose:
    if rec.mount_frame == "tcp":
        return tcp.compose(Pose.from_flat(rec.mount_offset))
    if rec.mount_frame == "base":
        return _base_pose_from_config(chain, q).compose(Pose.from_flat(rec.mount_offset))
    return Pose.from_flat(rec.pose)


def _build_instruction(task, state, rng, context_scope, base_xy) -> tuple[str, dict[str, list[str]]] | None:
    slots: dict[str, str] = {}
    referenced: list[str] = []
    if task.kind in ("open", "open_door"):
        referenced = [task.fixture_id]
    else:
        referenced = [task.target_id]
        if task.kind in ("pick_and_place",):
            referenced.append(task.receptacle_id)
        if task.kind == "pnp_next_to":
            referenced.append(task.reference_id)
    ctx = build_context(state, referenced, context_scope=context_scope)
    valid: dict[str, list[str]] = {}
    for oid in referenced:
        texts, _ = expression_probabilities(ctx, oid)
        if not texts:
            return None  # ambiguous referral: resample the scene
        valid[oid] = texts
    if task.kind == "open_door":
        slots["verb"] = task.push_or_pull
    elif task.kind == "open":
        slots["obj"] = sample_referring_expression(ctx, task.fixture_id, rng)
    else:
        slots["obj"] = sample_referring_expression(ctx, task.target_id, rng)
        if task.kind == "pick_and_place":
            slots["recept"] = sample_referring_expression(ctx, task.receptacle_id, rng)
        elif task.kind == "pnp_next_to":
            slots["ref"] = sample_referring_expression(ctx, task.reference_id, rng)
        elif task.kind == "pnp_color":
            slots["recept"] = state.objects[task.receptacle_id].category
            slots["color"] = task.color_attr
    if any(v is None for v in slots.values()):
        return None
    instruction = render_instruction(task, slots, load_templates(task.kind), rng)
    return instruction, valid


@dataclass
class EpisodeOutcome:
    index: int
    record: EpisodeRecord | None
    discard_reason: str
    setup_time: float
    rollout_time: float


def build_episode(config: EngineConfig, index: int) -> EpisodeOutcome:
    """Run the full per-index pipeline; a None record means a discard."""
    t_setup = time.perf_counter()
    rng = episode_rng(config.base_seed, index)
    chain = _preset(config.robot)
    tag = config.mixture.sample_tag(rng)
    kind = tag_kind(tag)

    base_height = float(chain.base_pose.position[2])
    if tag == "pnp_random":
        base_height = float(rng.uniform(*PNP_RANDOM_HEIGHT_RANGE))
        chain = with_base_height(chain, base_height)

    def discard(reason: str) -> EpisodeOutcome:
        return EpisodeOutcome(index, None, reason, time.perf_counter() - t_setup, 0.0)

    gen = generate_scene(chain, kind, rng, config.scene, base_height=base_height)
    if gen is None:
        return discard("scene placement failed")
    state = gen.state
    profile = NoiseProfile.for_chain(chain)
    state.robot_config = sample_initial_config(chain, profile, chain.nominal_config(), rng)
    domain = sample_domain_params(
        config.domain, rng, texture_keys=tuple(sorted(state.objects)) + ("desk",)
    )

    task_kwargs = {}
    if kind in ("open", "open_door"):
        task_kwargs["fixture_id"] = gen.fixture_id
        if kind == "open_door":
            base_xy = _base_pose_from_config(chain, state.robot_config).position[:2]
            task_kwargs["push_or_pull"] = door_verb(state.fixtures[gen.fixture_id], base_xy)
    else:
        task_kwargs["target_id"] = gen.target_id
        if gen.receptacle_id:
            task_kwargs["receptacle_id"] = gen.receptacle_id
        if gen.reference_id:
            task_kwargs["reference_id"] = gen.reference_id
        if gen.color_attr:
            task_kwargs["color_attr"] = gen.color_attr
    task = TaskSpec(kind=kind, **task_kwargs)

    built = _build_instruction(
        task, state, rng, config.context_scope, _base_pose_from_config(chain, state.robot_config).position[:2]
    )
    if built is None:
        return discard("ambiguous referral expressions")
    instruction, expressions = built

    cameras = _sample_cameras(chain, task, state, rng)
    if cameras is None:
        return discard("camera visibility rejection")

    cfg = PlannerConfig.for_robot(chain, **config.planner)
    initial_state = state.clone()
    setup_time = time.perf_counter() - t_setup

    t_roll = time.perf_counter()
    oracle_mode = "consecutive" if chain.name == "rby1" else "any"
    result = run_episode(task, state, chain, cfg, rng, noise=config.noise, oracle_mode=oracle_mode)
    rollout_time = time.perf_counter() - t_roll
    if result is None:
        return EpisodeOutcome(index, None, "expert failed or evaluation failed", setup_time, rollout_time)

    record = _assemble_record(
        config, index, tag, task, instruction, expressions, chain, cfg, domain, cameras,
        initial_state, result, base_height,
    )
    return EpisodeOutcome(index, record, "", setup_time, rollout_time)


def _assemble_record(
    config, index, tag, task, instruction, expressions, chain, cfg, domain, cameras,
    initial_state, result, base_height,
) -> EpisodeRecord:
    rate = cfg.control_rate
    q_prev = np.asarray(initial_state.robot_config, dtype=float)
    prev_pose = forward_kinematics(chain, q_prev)
    base_idx = chain.group_indices("base")
    steps: list[StepRecord] = []
    flags = result.report.per_step[1:]
    for k, (step, state) in enumerate(zip(result.steps, result.states)):
        q = np.asarray(step.joint_target, dtype=float)
        tcp = forward_kinematics(chain, q)
        delta = q - q_prev
        points: dict[str, dict] = {}
        interest = _interest_points(task, state)
        for cam_rec in cameras:
            cam = CameraModel(
                pose=_camera_pose_at(cam_rec, chain, q, tcp),
                vertical_fov=cam_rec.vertical_fov,
                resolution=tuple(cam_rec.resolution),
            )
            points[cam_rec.name] = {
                oid: (list(uv) if (uv := project_point(cam, p)) is not None else None)
                for oid, p in interest.items()
            }
        att = state.attachments.get(GRIPPER_NAME)
        steps.append(
            StepRecord(
                t=k / rate,
                joint_positions=list(map(float, q)),
                joint_velocities=list(map(float, (q - q_prev) * rate)),
                tcp_pose=tcp.to_flat(),
                base_pose=_base_pose_from_config(chain, q).to_flat(),
                actions={
                    "abs_joint": list(map(float, q)),
                    "delta_joint": list(map(float, delta)),
                    "ee_twist": list(map(float, np.concatenate([
                        tcp.position - prev_pose.position,
                        _rotvec_between(prev_pose, tcp),
                    ]))),
                    "ee_abs_pose": tcp.to_flat(),
                    "base_cmd": None if not base_idx else list(map(float, delta[base_idx])),
                },
                gripper_command=step.gripper_command,
                grasp_state="" if att is None else att.entity_id,
                phase=step.phase,
                retry_count=step.retry_count,
                replans=step.replans,
                noise_applied=list(map(float, step.noise_applied)),
                object_poses={oid: obj.pose.to_flat() for oid, obj in state.objects.items()},
                fixture_values={fid: float(f.value) for fid, f in state.fixtures.items()},
                task_success=bool(flags[k]),
                object_points_2d=points,
            )
        )
        q_prev = q
        prev_pose = tcp
    objects = [
        {
            "id": obj.id,
            "category": obj.category,
            "half_extents": list(map(float, obj.half_extents)),
            "mass": float(obj.mass),
            "friction": float(obj.friction),
            "role": obj.role,
            "color": obj.color,
            "start_pose": obj.pose.to_flat(),
        }
        for obj in initial_state.objects.values()
    ]
    start_goal = {}
    for obj in initial_state.objects.values():
        goal = None
        if obj.id == task.target_id and result.placement_goal is not None:
            goal = result.placement_goal.to_flat()
        start_goal[obj.id] = {"start": obj.pose.to_flat(), "goal": goal}
    return EpisodeRecord(
        episode_id=f"ep-{config.base_seed:08d}-{index:06d}",
        robot=chain.name,
        task=task,
        task_tag=tag,
        instruction=instruction,
        scene_seed=[config.base_seed, index],
        domain_params=domain.to_dict(),
        camera_models=cameras,
        scene=initial_state.scene.to_dict(),
        objects=objects,
        object_start_goal_poses=start_goal,
        expressions=expressions,
        initial_config=list(map(float, initial_state.robot_config)),
        base_height=base_height,
        control_rate=rate,
        retry_count=result.retry_count,
        success=True,
        steps=steps,
    )


def _rotvec_between(a: Pose, b: Pose) -> np.ndarray:
    from .geometry import pose_error

    _, dr = pose_error(b, a)
    return dr


@dataclass
class GenerationReport:
    successes: int = 0
    discards: int = 0
    discard_reasons: Counter = field(default_factory=Counter)
    setup_time: float = 0.0
    rollout_time: float = 0.0
    wall_time: float = 0.0
    last_index: int = -1

    def time_fractions(self) -> tuple[float, float]:
        total = self.setup_time + self.rollout_time
        if total == 0.0:
            return (0.0, 0.0)
        return (self.setup_time / total, self.rollout_time / total)

    def episodes_per_hour(self) -> float:
        if self.wall_time == 0.0:
            return 0.0
        return self.successes / self.wall_time * 3600.0


def _worker(args: tuple) -> EpisodeOutcome:
    config, index = args
    return build_episode(config, index)


def generate(config: EngineConfig) -> GenerationReport:
    """Generate episodes until the target success count, writing episode files
    and the manifest in index order (deterministic for any worker count)."""
    t0 = time.perf_counter()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    if manifest_path.exists():
        manifest_path.unlink()
    report = GenerationReport()
    consecutive_discards = 0
    next_index = 0

    def consume(outcome: EpisodeOutcome) -> bool:
        nonlocal consecutive_discards
        report.setup_time += outcome.setup_time
        report.rollout_time += outcome.rollout_time
        report.last_index = outcome.index
        if outcome.record is None:
            report.discards += 1
            report.discard_reasons[outcome.discard_reason] += 1
            consecutive_discards += 1
            if consecutive_discards >= config.abort_window:
                raise EngineError(
                    f"aborting: {config.abort_window} consecutive discards "
                    f"(last: {outcome.discard_reason}); recent reasons: "
                    f"{dict(report.discard_reasons)}"
                )
            return False
        consecutive_discards = 0
        write_episode(outcome.record, out_dir)
        report.successes += 1
        logger.info("episode %s persisted (%d/%d)", outcome.record.episode_id, report.successes, config.episodes)
        return report.successes >= config.episodes

    if config.workers <= 1:
        while report.successes < config.episodes:
            if consume(build_episode(config, next_index)):
                break
            next_index += 1
    else:
        block = config.workers * 2
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            done = False
            while not done:
                indices = list(range(next_index, next_index + block))
                next_index += block
                for outcome in pool.map(_worker, [(config, i) for i in indices]):
                    if consume(outcome):
                        done = True
                        break
    report.wall_time = time.perf_counter() - t0
    return report


# -- evaluation re-runs ----------------------------------------------------------------


@dataclass
class EvalRow:
    task: str
    robot: str
    episodes: int
    rate: float
    ci_low: float
    ci_high: float


def eval_rerun(
    dataset_dir: str | Path,
    metric: str = "oracle",
    n_bootstrap: int = 10_000,
    seed: int = 0,
    success_params: SuccessParams | None = None,
) -> list[EvalRow]:
    """Recompute the success evaluators from stored step states and report the
    per-task rate with a 95% CI from stratified bootstrapping over episodes."""
    if metric not in ("oracle", "at_end"):
        raise EngineError(f"unknown metric: {metric}")
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    strata: dict[tuple[str, str], list[bool]] = {}
    for entry in manifest:
        record = read_episode(dataset_dir / entry["file"])
        oracle_mode = "consecutive" if record.robot == "rby1" else "any"
        history = reconstruct_states(record)
        rep = evaluate_success(record.task, history, success_params, oracle_mode)
        verdict = rep.oracle if metric == "oracle" else rep.at_end
        strata.setdefault((record.task.kind, record.robot), []).append(bool(verdict))
    rng = np.random.default_rng(seed)
    rows = []
    for (task, robot), verdicts in sorted(strata.items()):
        arr = np.array(verdicts, dtype=float)
        n = len(arr)
        resampled = rng.integers(0, n, size=(n_bootstrap, n))
        means = arr[resampled].mean(axis=1)
        rows.append(
            EvalRow(
                task=task,
                robot=robot,
                episodes=n,
                rate=float(arr.mean()),
                ci_low=float(np.quantile(means, 0.025)),
                ci_high=float(np.quantile(means, 0.975)),
            )
        )
    return rows
