"""Phase-machine expert demonstrators.

Each task runs a fixed phase sequence; motion is planned per phase by
batched goal evaluation (IK + collision-checked joint interpolation,
least total joint displacement wins), executed at the control rate with
action-proportional noise, and guarded by mistake detection that resets
to the first phase.  More than `max_retries` resets discards the episode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Pose, interpolate_poses, pose_error
from .grasping import (
    GraspCandidate,
    generate_candidates,
    grasp_pipeline,
    handle_candidates,
)
from .kinematics import (
    KinematicChain,
    forward_kinematics,
    ik_damped_ls,
    interpolate_joint_path,
    jacobian,
    lsq_project_twist,
)
from .tasks import SuccessParams, SuccessReport, TaskSpec, evaluate_success
from .world import WorldState, attach, collide_config, detach, step_quasistatic

# Phases.
PREGRASP = "pregrasp"
GRASP = "grasp"
LIFT = "lift"
PREPLACE = "preplace"
PLACE = "place"
POSTPLACE = "postplace"
STOW = "stow"
ARTICULATE = "articulate"
POSTARTICULATE = "postarticulate"

PHASES = (PREGRASP, GRASP, LIFT, PREPLACE, PLACE, POSTPLACE, STOW, ARTICULATE, POSTARTICULATE)

# Arm noise: TCP-space truncated Gaussians, action-proportional.
ARM_POS_CLIP = 0.02  # m
ARM_ROT_CLIP = 0.1  # rad
ROT_SIGMA_FACTOR = 0.1
# Base noise: planar clipped Gaussians.
BASE_POS_CLIP = 0.02  # m
BASE_ROT_CLIP = 0.05  # rad
BASE_SIGMA_FACTOR = 0.1

GRIPPER_NAME = "gripper0"


class PlanningError(RuntimeError):
    pass


def phase_sequence(task_kind: str, robot: str) -> tuple[str, ...]:
    if task_kind == "pick":
        return (PREGRASP, GRASP, LIFT)
    if task_kind in ("pick_and_place", "pnp_next_to", "pnp_color"):
        if robot == "rby1":
            # merged preplace/place, no stow
            return (PREGRASP, GRASP, LIFT, PLACE, POSTPLACE)
        return (PREGRASP, GRASP, LIFT, PREPLACE, PLACE, POSTPLACE, STOW)
    if task_kind in ("open", "open_door"):
        return (PREGRASP, GRASP, ARTICULATE, POSTARTICULATE)
    raise ValueError(f"unknown task kind: {task_kind}")


@dataclass
class PlannerConfig:
    pregrasp_offset: float = 0.10  # m along the approach axis
    lift_height: float = 0.15  # m
    max_retries: int = 3
    gripper_close_time: float = 0.5  # s
    gripper_open_time: float = 0.25  # s
    settle_time: float = 0.1  # s (fixed-duration settle)
    settle_steps_cap: int = 5  # control steps (step-capped settle)
    goal_batch: int = 4
    max_goal_batches: int = 4
    replan_limit: int = 5
    noise_alpha: float = 0.1
    control_rate: float = 15.0  # Hz
    joint_step_limit: float = 0.08  # rad or m per control step
    horizon_pick: float = 20.0  # s
    horizon_long: float = 40.0  # s
    n_waypoints: int = 8
    open_fraction_target: float = 0.8
    grasp_tol_pos: float = 0.03  # m, TCP at grasp pose before attaching
    grasp_tol_rot: float = 0.5  # rad
    reach_tol_pos: float = 0.025  # m, goal reached check triggering replans
    place_tol_pos: float = 0.008  # m, tighter alignment before releasing
    place_clearance: float = 0.012  # m, release height above the support
    cartesian_step: float = 0.02  # m between straight-line TCP sub-goals
    stall_steps: int = 10
    stall_min_progress: float = 1e-4
    ik_tol_pos: float = 1e-3
    ik_tol_rot: float = 1e-2
    ik_max_iters: int = 80
    ik_seeds: int = 16
    linear_ik_seeds: int = 4
    settle_mode: str = "time"  # "time" (Franka) | "steps" (RB-Y1)

    @classmethod
    def for_robot(cls, chain: KinematicChain, **overrides) -> "PlannerConfig":
        kw = dict(control_rate=chain.control_rate)
        if chain.name == "rby1":
            kw["settle_mode"] = "steps"
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        import dataclasses

        return dataclasses.asdict(self)

    def close_steps(self) -> int:
        return math.ceil(self.gripper_close_time * self.control_rate)

    def open_steps(self) -> int:
        return math.ceil(self.gripper_open_time * self.control_rate)

    def settle_steps(self) -> int:
        if self.settle_mode == "steps":
            return self.settle_steps_cap
        return math.ceil(self.settle_time * self.control_rate)


@dataclass
class ExpertStep:
    joint_target: np.ndarray
    gripper_command: str  # hold | close | open
    base_command: np.ndarray | None
    phase: str
    retry_count: int
    noise_applied: np.ndarray  # 6-vector TCP-space noise
    replans: int = 0


@dataclass
class EpisodeHooks:
    """Test-harness fault injection."""

    veto_attach: Callable[[int], bool] | None = None  # attempt number (1-based)
    on_step: Callable[["ExpertRun"], None] | None = None


@dataclass
class EpisodeResult:
    steps: list[ExpertStep]
    states: list[WorldState]  # state after each step
    initial_state: WorldState
    report: SuccessReport
    retry_count: int
    grasp: GraspCandidate | None
    placement_goal: Pose | None
    discard_reason: str = ""


# -- articulation ---------------------------------------------------------------------


def articulation_waypoints(fixture, open_fraction_target: float, n_waypoints: int) -> list[Pose]:
    """Handle poses at equally spaced joint values from the current value to
    the target open fraction: an arc for revolute joints, a line for
    prismatic ones."""
    if n_waypoints < 1:
        raise ValueError("need at least one waypoint")
    if fixture.joint_kind == "revolute":
        fixture.swing_direction()  # raises when the handle sits on the hinge axis
    lo, hi = fixture.range
    target = lo + open_fraction_target * (hi - lo)
    values = np.linspace(fixture.value, target, n_waypoints + 1)[1:]
    return [fixture.handle_pose(v) for v in values]


# -- noise injection -------------------------------------------------------------------


def _truncated_gaussian(sigma: float, bound: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sampled N(0, sigma) truncated to [-bound, bound]; exact
    bound respect by construction."""
    if sigma <= 0.0:
        return np.zeros(n)
    out = rng.normal(0.0, sigma, n)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def inject_arm_noise(
    chain: KinematicChain,
    q: np.ndarray,
    dq: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    active: list[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """TCP-space action-proportional noise projected back to joint space.

    Returns (noisy dq clipped to limits, applied 6-vector TCP noise).
    A zero commanded displacement receives exactly zero noise.
    """
    dq = np.asarray(dq, dtype=float)
    J = jacobian(chain, q)
    if active is not None:
        J_act = J[:, active]
        dx = J_act @ dq[active]
    else:
        J_act = J
        dx = J @ dq
    sigma_pos = alpha * float(np.linalg.norm(dx[:3]))
    if sigma_pos == 0.0:
        return dq.copy(), np.zeros(6)
    eps = np.concatenate(
        [
            _truncated_gaussian(sigma_pos, ARM_POS_CLIP, 3, rng),
            _truncated_gaussian(ROT_SIGMA_FACTOR * sigma_pos, ARM_ROT_CLIP, 3, rng),
        ]
    )
    eps_q_act = lsq_project_twist(J_act, eps)
    eps_q = np.zeros(chain.dof)
    if active is not None:
        eps_q[active] = eps_q_act
    else:
        eps_q = eps_q_act
    lo, hi = chain.limits
    noisy = np.clip(dq + eps_q, lo - q, hi - q)
    return noisy, eps


def inject_base_noise(dp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Planar (dx, dy, dtheta) noise with sigma proportional to the commanded
    displacement, clipped to +/-2 cm and +/-0.05 rad."""
    dp = np.asarray(dp, dtype=float)
    if not np.all(np.isfinite(dp)):
        raise ValueError("non-finite base command")
    sigma_pos = BASE_SIGMA_FACTOR * float(np.linalg.norm(dp[:2]))
    sigma_rot = BASE_SIGMA_FACTOR * abs(float(dp[2]))
    noise = np.concatenate(
        [
            _truncated_gaussian(sigma_pos, BASE_POS_CLIP, 2, rng),
            _truncated_gaussian(sigma_rot, BASE_ROT_CLIP, 1, rng),
        ]
    )
    return dp + noise


# -- phase planning ---------------------------------------------------------------------


@dataclass
class PhasePlan:
    path: list[np.ndarray]
    goal_index: int
    displacement: float


def plan_phase(
    chain: KinematicChain,
    state: WorldState,
    goals: list[Pose],
    cfg: PlannerConfig,
    ignore_ids: frozenset | set = frozenset(),
) -> PhasePlan | None:
    """Evaluate candidate goals in batches of cfg.goal_batch (at most
    cfg.max_goal_batches); each goal is solved by IK and connected by a
    collision-checked joint interpolation.  The least-total-joint-
    displacement path among the first feasible batch wins."""
    if not goals:
        raise PlanningError("empty goal set")
    if state.robot_config is None:
        raise PlanningError("state has no robot configuration")
    q0 = state.robot_config
    for b in range(cfg.max_goal_batches):
        batch = goals[b * cfg.goal_batch : (b + 1) * cfg.goal_batch]
        if not batch:
            break
        plans: list[PhasePlan] = []
        for gi, goal in enumerate(batch):
            q_goal = ik_damped_ls(
                chain,
                goal,
                q0,
                tol_pos=cfg.ik_tol_pos,
                tol_rot=cfg.ik_tol_rot,
                max_iters=cfg.ik_max_iters,
                n_seeds=cfg.ik_seeds,
            )
            if q_goal is None:
                continue
            path = interpolate_joint_path(q0, q_goal, cfg.joint_step_limit)
            if any(collide_config(chain, wp, state, ignore_ids) for wp in path):
                continue
            deltas = np.diff(np.vstack([q0] + path), axis=0)
            plans.append(PhasePlan(path, b * cfg.goal_batch + gi, float(np.sum(np.abs(deltas)))))
        if plans:
            return min(plans, key=lambda p: (p.displacement, p.goal_index))
    return None


# -- episode execution --------------------------------------------------------------------


class ExpertRun:
    """Mutable episode execution context (exposed to test hooks)."""

    def __init__(self, task, state, chain, cfg, rng, noise, hooks, success_params, oracle_mode):
        self.task: TaskSpec = task
        self.chain: KinematicChain = chain
        self.cfg: PlannerConfig = cfg
        self.rng = rng
        self.noise_enabled = noise
        self.hooks = hooks or EpisodeHooks()
        self.success_params = success_params or SuccessParams()
        self.oracle_mode = oracle_mode

        self.initial_state = state.clone()
        self.state = state
        self.q = np.asarray(state.robot_config, dtype=float).copy()
        self.steps: list[ExpertStep] = []
        self.states: list[WorldState] = []
        self.retry = 0
        self.grasp_attempts = 0
        self.phase = PREGRASP
        self.replans_in_phase = 0
        self.mistake = False
        self.discard_reason = ""
        self.grasp: GraspCandidate | None = None
        self.placement_goal: Pose | None = None
        self.grasp_tcp: Pose | None = None
        self._place_tcp: Pose | None = None

        gr = chain.group_indices("gripper")
        self.gripper_joint = gr[0] if gr else None
        self.base_idx = chain.group_indices("base")
        self.arm_active = [i for i in chain.tcp_path if chain.joints[i].group != "base"]
        horizon = cfg.horizon_pick if task.kind == "pick" else cfg.horizon_long
        self.max_steps = int(round(horizon * cfg.control_rate))

    # -- helpers --

    @property
    def target_entity(self) -> str:
        return self.task.fixture_id if self.task.kind in ("open", "open_door") else self.task.target_id

    def tcp(self) -> Pose:
        return forward_kinematics(self.chain, self.q)

    def attached(self) -> bool:
        return GRIPPER_NAME in self.state.attachments

    def force_release(self) -> None:
        """Test-harness entry: drop whatever the gripper holds."""
        self.state = detach(self.state, GRIPPER_NAME, self.chain)

    def _fail(self, reason: str) -> None:
        self.discard_reason = reason

    def _emit(self, q_new: np.ndarray, gripper_command: str, noise6: np.ndarray) -> bool:
        """Apply one control step; False stops the current path."""
        base_cmd = None
        if self.base_idx:
            base_cmd = q_new[self.base_idx] - self.q[self.base_idx]
        self.state = step_quasistatic(self.state, self.chain, q_new)
        self.q = q_new
        self.steps.append(
            ExpertStep(
                joint_target=q_new.copy(),
                gripper_command=gripper_command,
                base_command=base_cmd,
                phase=self.phase,
                retry_count=self.retry,
                noise_applied=noise6,
                replans=self.replans_in_phase,
            )
        )
        self.states.append(self.state)
        if self.hooks.on_step is not None:
            self.hooks.on_step(self)
        if len(self.steps) > self.max_steps:
            self._fail("horizon exceeded")
            return False
        return True

    def _step_arm(self, waypoint: np.ndarray, gripper_command: str = "hold") -> bool:
        dq = waypoint - self.q
        noise6 = np.zeros(6)
        if self.noise_enabled:
            if self.base_idx:
                dq = dq.copy()
                dq[self.base_idx] = inject_base_noise(dq[self.base_idx], self.rng)
            dq, noise6 = inject_arm_noise(
                self.chain, self.q, dq, self.cfg.noise_alpha, self.rng, active=self.arm_active
            )
        lo, hi = self.chain.limits
        q_new = np.clip(self.q + dq, lo, hi)
        return self._emit(q_new, gripper_command, noise6)

    def _execute_path(self, path: list[np.ndarray], expect_attached: bool) -> bool:
        for wp in path:
            if not self._step_arm(wp):
                return False
            if expect_attached and not self.attached():
                self.mistake = True  # the grasp was lost mid-motion
                return False
        return True

    def _goto(self, goals: list[Pose], ignore_ids=frozenset(), expect_attached=False) -> int | None:
        """Plan and execute toward one of the candidate goals, replanning from
        the current configuration when noise drift leaves the goal unreached.
        Returns the chosen goal index, or None on failure."""
        plan = plan_phase(self.chain, self.state, goals, self.cfg, ignore_ids)
        if plan is None:
            self._fail(f"planning exhausted in {self.phase}")
            return None
        chosen = plan.goal_index
        goal = goals[chosen]
        for attempt in range(self.cfg.replan_limit + 1):
            if not self._execute_path(plan.path, expect_attached):
                return None
            dp, _ = pose_error(goal, self.tcp())
            if float(np.linalg.norm(dp)) <= self.cfg.reach_tol_pos:
                return chosen
            if attempt == self.cfg.replan_limit:
                break
            self.replans_in_phase += 1
            plan = plan_phase(self.chain, self.state, [goal], self.cfg, ignore_ids)
            if plan is None:
                self._fail(f"replanning exhausted in {self.phase}")
                return None
        self._fail(f"goal unreached after {self.cfg.replan_limit} replans in {self.phase}")
        return None

    def _solve_near(self, goal: Pose) -> np.ndarray | None:
        return ik_damped_ls(
            self.chain,
            goal,
            self.q,
            tol_pos=self.cfg.ik_tol_pos,
            tol_rot=self.cfg.ik_tol_rot,
            max_iters=self.cfg.ik_max_iters,
            n_seeds=self.cfg.linear_ik_seeds,
        )

    def _goto_linear(
        self,
        goal: Pose,
        expect_attached: bool = False,
        final_tol: float | None = None,
        check_collision: bool = False,
        ignore_ids=frozenset(),
    ) -> bool:
        """Straight-line TCP motion: IK-based interpolation seeded from the
        current configuration so the arm stays on its branch, with fine
        re-alignment replans when noise drift leaves the goal unreached."""
        for sub in interpolate_poses(self.tcp(), goal, self.cfg.cartesian_step):
            q_goal = self._solve_near(sub)
            if q_goal is None:
                self._fail(f"IK failed on linear motion in {self.phase}")
                return False
            if check_collision and collide_config(self.chain, q_goal, self.state, ignore_ids):
                self._fail(f"linear motion blocked in {self.phase}")
                return False
            for wp in interpolate_joint_path(self.q, q_goal, self.cfg.joint_step_limit):
                if not self._step_arm(wp):
                    return False
                if expect_attached and not self.attached():
                    self.mistake = True
                    return False
        tol = self.cfg.reach_tol_pos if final_tol is None else final_tol
        for _ in range(self.cfg.replan_limit):
            dp, _ = pose_error(goal, self.tcp())
            if float(np.linalg.norm(dp)) <= tol:
                return True
            self.replans_in_phase += 1
            q_goal = self._solve_near(goal)
            if q_goal is None:
                self._fail(f"IK failed re-aligning in {self.phase}")
                return False
            for wp in interpolate_joint_path(self.q, q_goal, self.cfg.joint_step_limit):
                if not self._step_arm(wp):
                    return False
                if expect_attached and not self.attached():
                    self.mistake = True
                    return False
        dp, _ = pose_error(goal, self.tcp())
        if float(np.linalg.norm(dp)) <= tol:
            return True
        self._fail(f"goal unreached after {self.cfg.replan_limit} replans in {self.phase}")
        return False

    def _gripper_ramp(self, command: str, n_steps: int, width_to: float) -> bool:
        """Hold the arm still while the gripper ramps to a width, then settle."""
        if self.gripper_joint is None:
            return True
        width_from = self.q[self.gripper_joint]
        for k in range(n_steps):
            q_new = self.q.copy()
            frac = (k + 1) / n_steps
            q_new[self.gripper_joint] = width_from + frac * (width_to - width_from)
            if not self._emit(q_new, command, np.zeros(6)):
                return False
        for _ in range(self.cfg.settle_steps()):
            if not self._emit(self.q.copy(), "hold", np.zeros(6)):
                return False
        return True

    # -- phases --

    def _pregrasp(self) -> bool:
        target = self.target_entity
        if self.task.kind in ("open", "open_door"):
            cands = handle_candidates(self.state.fixtures[target])
            com = self.state.fixtures[target].handle_pose().position
        else:
            obj = self.state.objects[target]
            cands = generate_candidates(obj)
            com = obj.pose.position
        selected, survivors = grasp_pipeline(
            cands,
            self.state,
            self.chain,
            self.q,
            self.tcp(),
            com,
            target_id=target,
        )
        if selected is None:
            self._fail("no feasible grasp")
            return False
        max_goals = self.cfg.goal_batch * self.cfg.max_goal_batches
        goals = []
        for c in survivors[:max_goals]:
            goals.append(
                Pose(
                    position=c.pose.position - c.approach_axis * self.cfg.pregrasp_offset,
                    orientation=c.pose.orientation,
                )
            )
        chosen = self._goto(goals, ignore_ids={target})
        if chosen is None:
            return False
        self.grasp = survivors[chosen]
        return True

    def _grasp(self) -> bool:
        assert self.grasp is not None
        if not self._goto_linear(self.grasp.pose):
            return False
        if not self._gripper_ramp("close", self.cfg.close_steps(), 0.0):
            return False
        self.grasp_attempts += 1
        vetoed = self.hooks.veto_attach is not None and self.hooks.veto_attach(self.grasp_attempts)
        dp, dr = pose_error(self.grasp.pose, self.tcp())
        reached = (
            float(np.linalg.norm(dp)) <= self.cfg.grasp_tol_pos
            and float(np.linalg.norm(dr)) <= self.cfg.grasp_tol_rot
        )
        if vetoed or not reached:
            self.mistake = True  # failed to acquire the grasp
            return False
        self.state = attach(self.state, GRIPPER_NAME, self.target_entity, self.chain)
        self.grasp_tcp = self.tcp()
        return True

    def _lift(self) -> bool:
        tcp = self.tcp()
        goal = Pose(position=tcp.position + np.array([0.0, 0.0, self.cfg.lift_height]), orientation=tcp.orientation)
        return self._goto_linear(goal, expect_attached=True)

    def _placement_goals(self) -> tuple[list[Pose], list[Pose]]:
        """(object placement poses, matching TCP goal poses)."""
        assert self.grasp_tcp is not None
        att = self.state.attachments[GRIPPER_NAME]
        obj = self.state.objects[self.task.target_id]
        # Keep the grasp-time TCP orientation so the object stays upright.
        r_grasp = self.grasp_tcp.orientation
        offset = self.grasp_tcp.transform_direction(att.grasp_transform.position)
        obj_goals: list[Pose] = []
        if self.task.kind in ("pick_and_place", "pnp_color"):
            recept = self.state.objects[self.task.receptacle_id]
            top = recept.top_z()
            jitter_scale = 0.25 * np.minimum(recept.half_extents[:2], 0.08)
            for k in range(self.cfg.goal_batch * self.cfg.max_goal_batches):
                jit = self.rng.uniform(-jitter_scale, jitter_scale) if k else np.zeros(2)
                pos = np.array(
                    [recept.pose.position[0] + jit[0], recept.pose.position[1] + jit[1], top + obj.half_extents[2] + self.cfg.place_clearance]
                )
                obj_goals.append(Pose(position=pos, orientation=obj.pose.orientation))
        else:  # pnp_next_to
            from .world import polygon_gap

            ref = self.state.objects[self.task.reference_id]
            rmin, rmax = ref.world_aabb()
            surface = self.state.scene.surfaces[0]
            omin, omax = obj.world_aabb()
            half_obj = (omax[:2] - omin[:2]) / 2.0
            half_ref = (rmax[:2] - rmin[:2]) / 2.0
            max_goals = self.cfg.goal_batch * self.cfg.max_goal_batches

            def gap_at(xy):
                probe = obj.copy()
                probe.pose = Pose(position=np.array([xy[0], xy[1], obj.pose.position[2]]), orientation=obj.pose.orientation)
                return polygon_gap(probe.footprint(), ref.footprint())

            for _ in range(max_goals * 3):
                if len(obj_goals) >= max_goals:
                    break
                ang = self.rng.uniform(0.0, 2.0 * math.pi)
                d = np.array([math.cos(ang), math.sin(ang)])
                target_gap = self.rng.uniform(0.01, 0.035)
                xy = ref.pose.position[:2] + d * (np.linalg.norm(half_ref) + np.linalg.norm(half_obj) + target_gap)
                # the gap is linear in translation along d for separated convex
                # footprints, so a couple of corrections suffice
                for _ in range(3):
                    xy = xy + d * (target_gap - gap_at(xy))
                if abs(gap_at(xy) - target_gap) > 0.004:
                    continue
                if not surface.contains_xy(xy[0], xy[1]):
                    continue
                clash = False
                for other in self.state.objects.values():
                    if other.id == obj.id:
                        continue
                    oomin, oomax = other.world_aabb()
                    if np.all(np.abs(0.5 * (oomin[:2] + oomax[:2]) - xy) < (oomax[:2] - oomin[:2]) / 2.0 + half_obj + 0.002):
                        clash = True
                        break
                if not clash:
                    pos = np.array([xy[0], xy[1], surface.height + obj.half_extents[2] + self.cfg.place_clearance])
                    obj_goals.append(Pose(position=pos, orientation=obj.pose.orientation))
            if not obj_goals:
                self._fail("no valid next-to placement")
                return [], []
        tcp_goals = [Pose(position=g.position - offset, orientation=r_grasp) for g in obj_goals]
        return obj_goals, tcp_goals

    def _preplace(self) -> bool:
        obj_goals, tcp_goals = self._placement_goals()
        if not tcp_goals:
            return False
        above = [
            Pose(position=g.position + np.array([0.0, 0.0, self.cfg.lift_height]), orientation=g.orientation)
            for g in tcp_goals
        ]
        chosen = self._goto(above, expect_attached=True)
        if chosen is None:
            return False
        self.placement_goal = obj_goals[chosen]
        self._place_tcp = tcp_goals[chosen]
        return True

    def _place(self) -> bool:
        if self.chain.name == "rby1" and self.placement_goal is None:
            # merged preplace/place: transit above the chosen placement, then lower
            obj_goals, tcp_goals = self._placement_goals()
            if not tcp_goals:
                return False
            above = [
                Pose(position=g.position + np.array([0.0, 0.0, self.cfg.lift_height]), orientation=g.orientation)
                for g in tcp_goals
            ]
            chosen = self._goto(above, expect_attached=True)
            if chosen is None:
                return False
            self.placement_goal = obj_goals[chosen]
            self._place_tcp = tcp_goals[chosen]
        if not self._goto_linear(self._place_tcp, expect_attached=True, final_tol=self.cfg.place_tol_pos):
            return False
        if not self._gripper_ramp("open", self.cfg.open_steps(), self._open_width()):
            return False
        self.state = detach(self.state, GRIPPER_NAME, self.chain)
        return True

    def _open_width(self) -> float:
        if self.gripper_joint is None:
            return 0.0
        return float(self.chain.joints[self.gripper_joint].limits[1])

    def _postplace(self) -> bool:
        tcp = self.tcp()
        goal = Pose(position=tcp.position + np.array([0.0, 0.0, self.cfg.lift_height]), orientation=tcp.orientation)
        return self._goto_linear(goal)

    def _stow(self) -> bool:
        q_home = np.asarray(self.initial_state.robot_config, dtype=float).copy()
        if self.gripper_joint is not None:
            q_home[self.gripper_joint] = self.q[self.gripper_joint]
        path = interpolate_joint_path(self.q, q_home, self.cfg.joint_step_limit)
        if any(collide_config(self.chain, wp, self.state) for wp in path):
            self._fail("stow path blocked")
            return False
        return self._execute_path(path, expect_attached=False)

    def _articulate(self) -> bool:
        fixture = self.state.fixtures[self.task.fixture_id]
        waypoints = articulation_waypoints(fixture, self.cfg.open_fraction_target, self.cfg.n_waypoints)
        grip = fixture.handle_pose().inverse().compose(self.tcp())
        stall_run = 0
        last_value = fixture.value
        for wp in waypoints:
            tcp_goal = wp.compose(grip)
            q_goal = ik_damped_ls(
                self.chain,
                tcp_goal,
                self.q,
                tol_pos=self.cfg.ik_tol_pos,
                tol_rot=self.cfg.ik_tol_rot,
                max_iters=self.cfg.ik_max_iters,
                n_seeds=self.cfg.ik_seeds,
            )
            if q_goal is None:
                self._fail("articulation waypoint unreachable")
                return False
            for q_wp in interpolate_joint_path(self.q, q_goal, self.cfg.joint_step_limit):
                if not self._step_arm(q_wp):
                    return False
                if not self.attached():
                    self.mistake = True
                    return False
                value = self.state.fixtures[self.task.fixture_id].value
                if abs(value - last_value) < self.cfg.stall_min_progress:
                    stall_run += 1
                    if stall_run >= self.cfg.stall_steps:
                        self.mistake = True  # articulation stalled
                        return False
                else:
                    stall_run = 0
                last_value = value
        return True

    def _postarticulate(self) -> bool:
        if not self._gripper_ramp("open", self.cfg.open_steps(), self._open_width()):
            return False
        self.state = detach(self.state, GRIPPER_NAME, self.chain)
        tcp = self.tcp()
        back = tcp.transform_direction(np.array([0.0, 0.0, -1.0]))
        goal = Pose(position=tcp.position + 0.12 * back, orientation=tcp.orientation)
        return self._goto_linear(goal)

    _PHASE_FNS = {
        PREGRASP: _pregrasp,
        GRASP: _grasp,
        LIFT: _lift,
        PREPLACE: _preplace,
        PLACE: _place,
        POSTPLACE: _postplace,
        STOW: _stow,
        ARTICULATE: _articulate,
        POSTARTICULATE: _postarticulate,
    }

    def run(self) -> EpisodeResult | None:
        seq = phase_sequence(self.task.kind, self.chain.name)
        idx = 0
        while idx < len(seq):
            self.phase = seq[idx]
            self.replans_in_phase = 0
            ok = self._PHASE_FNS[self.phase](self)
            if self.discard_reason:
                return None
            if self.mistake:
                self.mistake = False
                self.retry += 1
                if self.retry > self.cfg.max_retries:
                    return None  # terminated and discarded
                if self.attached():
                    self.state = detach(self.state, GRIPPER_NAME, self.chain)
                self.grasp = None
                self.placement_goal = None
                self._place_tcp = None
                idx = 0
                continue
            if not ok:
                return None
            idx += 1
        history = [self.initial_state] + self.states
        report = evaluate_success(self.task, history, self.success_params, self.oracle_mode)
        if not report.oracle:
            return None
        return EpisodeResult(
            steps=self.steps,
            states=self.states,
            initial_state=self.initial_state,
            report=report,
            retry_count=self.retry,
            grasp=self.grasp,
            placement_goal=self.placement_goal,
        )


def run_episode(
    task: TaskSpec,
    state: WorldState,
    chain: KinematicChain,
    cfg: PlannerConfig,
    rng: np.random.Generator,
    noise: bool = True,
    hooks: EpisodeHooks | None = None,
    success_params: SuccessParams | None = None,
    oracle_mode: str | None = None,
) -> EpisodeResult | None:
    """Execute the expert for one episode; None means the episode is discarded
    (>3 retries, planning exhaustion, horizon exceeded, or failed evaluation)."""
    if oracle_mode is None:
        oracle_mode = "consecutive" if chain.name == "rby1" else "any"
    run = ExpertRun(task, state, chain, cfg, rng, noise, hooks, success_params, oracle_mode)
    return run.run()
