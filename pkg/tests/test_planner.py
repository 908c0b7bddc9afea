import math

import numpy as np
import pytest

from demoforge.geometry import Pose, quat_from_axis_angle
from demoforge.kinematics import forward_kinematics, jacobian, load_preset, lsq_project_twist
from demoforge.planner import (
    ARM_POS_CLIP,
    ARM_ROT_CLIP,
    BASE_POS_CLIP,
    BASE_ROT_CLIP,
    EpisodeHooks,
    ExpertStep,
    PlannerConfig,
    articulation_waypoints,
    inject_arm_noise,
    inject_base_noise,
    phase_sequence,
    plan_phase,
    run_episode,
)
from demoforge.randomization import NoiseProfile, episode_rng, sample_initial_config
from demoforge.scenes import generate_scene
from demoforge.tasks import TaskSpec
from demoforge.world import ArticulatedFixture, Cuboid, SceneSpec, WorldState


def franka():
    return load_preset("franka_fr3")


def make_episode(kind="pick", seed=0, robot="franka_fr3", **cfg_overrides):
    ch = load_preset(robot)
    cfg = PlannerConfig.for_robot(ch, **cfg_overrides)
    rng = episode_rng(7000 + seed, 0)
    g = generate_scene(ch, kind, rng)
    assert g is not None
    state = g.state
    profile = NoiseProfile.for_chain(ch)
    state.robot_config = sample_initial_config(ch, profile, ch.nominal_config(), rng)
    task_kwargs = dict(target_id=g.target_id)
    if g.receptacle_id:
        task_kwargs["receptacle_id"] = g.receptacle_id
    if g.reference_id:
        task_kwargs["reference_id"] = g.reference_id
    if g.color_attr:
        task_kwargs["color_attr"] = g.color_attr
    if g.fixture_id:
        task_kwargs = dict(fixture_id=g.fixture_id)
        if kind == "open_door":
            task_kwargs["push_or_pull"] = "pull"
    task = TaskSpec(kind=kind, **task_kwargs)
    return ch, cfg, task, state, rng


# -- configuration constants -----------------------------------------------------


def test_config_defaults_carry_published_constants():
    cfg = PlannerConfig()
    assert cfg.max_retries == 3
    assert cfg.gripper_close_time == 0.5
    assert cfg.gripper_open_time == 0.25
    assert cfg.settle_time == 0.1
    assert cfg.settle_steps_cap == 5
    assert cfg.goal_batch == 4
    assert cfg.max_goal_batches == 4
    assert cfg.replan_limit == 5
    assert cfg.noise_alpha == 0.1


def test_control_rates_per_robot():
    assert PlannerConfig.for_robot(load_preset("franka_fr3")).control_rate == 15.0
    assert PlannerConfig.for_robot(load_preset("rby1")).control_rate == 10.0


def test_phase_sequences():
    assert phase_sequence("pick", "franka_fr3") == ("pregrasp", "grasp", "lift")
    assert phase_sequence("pick_and_place", "franka_fr3") == (
        "pregrasp", "grasp", "lift", "preplace", "place", "postplace", "stow",
    )
    assert phase_sequence("pick_and_place", "rby1") == (
        "pregrasp", "grasp", "lift", "place", "postplace",
    )
    assert phase_sequence("open", "rby1") == ("pregrasp", "grasp", "articulate", "postarticulate")


# -- articulation waypoints --------------------------------------------------------


def hinge_fixture(radius=1.0):
    return ArticulatedFixture(
        id="door",
        joint_kind="revolute",
        axis=np.array([0.0, 0.0, 1.0]),
        anchor=np.zeros(3),
        range=(0.0, math.pi / 2),
        value=0.0,
        handle_base=Pose.from_position(radius, 0.0, 0.0),
    )


def test_revolute_waypoints_rotation_oracle():
    scipy_rot = pytest.importorskip("scipy.spatial.transform").Rotation
    fixture = hinge_fixture()
    wps = articulation_waypoints(fixture, 1.0, 3)  # target 90 deg, 3 waypoints
    for k, wp in enumerate(wps, start=1):
        theta = k * math.pi / 6  # 30, 60, 90 deg
        expected = scipy_rot.from_rotvec([0, 0, theta]).apply([1.0, 0.0, 0.0])
        assert np.allclose(wp.position, expected, atol=1e-9)


def test_prismatic_waypoints_linear():
    fixture = ArticulatedFixture(
        id="drawer",
        joint_kind="prismatic",
        axis=np.array([1.0, 0.0, 0.0]),
        anchor=np.zeros(3),
        range=(0.0, 0.3),
        value=0.0,
        handle_base=Pose.from_position(0.0, 0.0, 0.0),
    )
    wps = articulation_waypoints(fixture, 1.0, 3)
    assert [round(w.position[0], 9) for w in wps] == [0.1, 0.2, 0.3]


def test_revolute_waypoints_constant_radius():
    fixture = hinge_fixture(radius=0.73)
    for wp in articulation_waypoints(fixture, 0.9, 8):
        assert abs(np.linalg.norm(wp.position[:2]) - 0.73) < 1e-9


def test_zero_radius_handle_errors():
    fixture = ArticulatedFixture(
        id="bad",
        joint_kind="revolute",
        axis=np.array([0.0, 0.0, 1.0]),
        anchor=np.zeros(3),
        range=(0.0, 1.0),
        value=0.0,
        handle_base=Pose.from_position(0.0, 0.0, 0.0),
    )
    with pytest.raises(Exception):
        articulation_waypoints(fixture, 1.0, 4)


# -- plan_phase ----------------------------------------------------------------------


def test_plan_phase_reaches_goal():
    ch = franka()
    state = WorldState.from_scene(SceneSpec())
    state.robot_config = ch.nominal_config()
    cfg = PlannerConfig.for_robot(ch)
    tcp = forward_kinematics(ch, state.robot_config)
    goal = Pose(position=tcp.position + np.array([0.05, 0.1, -0.1]), orientation=tcp.orientation)
    plan = plan_phase(ch, state, [goal], cfg)
    assert plan is not None
    q_end = plan.path[-1]
    end = forward_kinematics(ch, q_end)
    assert np.linalg.norm(end.position - goal.position) <= cfg.ik_tol_pos + 1e-9


def test_plan_phase_prefers_smaller_displacement():
    ch = franka()
    state = WorldState.from_scene(SceneSpec())
    state.robot_config = ch.nominal_config()
    cfg = PlannerConfig.for_robot(ch)
    tcp = forward_kinematics(ch, state.robot_config)
    near = Pose(position=tcp.position + np.array([0.0, 0.02, 0.0]), orientation=tcp.orientation)
    far = Pose(position=tcp.position + np.array([0.25, -0.3, -0.2]), orientation=tcp.orientation)
    plan = plan_phase(ch, state, [far, near], cfg)
    assert plan is not None
    assert plan.goal_index == 1
    # explicit displacement comparison
    plan_far = plan_phase(ch, state, [far], cfg)
    assert plan_far.displacement > plan.displacement


def test_plan_phase_goal_inside_obstacle_fails():
    ch = franka()
    tcp = forward_kinematics(ch, ch.nominal_config())
    goal_pos = tcp.position + np.array([0.0, 0.15, -0.1])
    scene = SceneSpec(obstacles=[Cuboid("block", goal_pos, np.array([0.12, 0.12, 0.12]))])
    state = WorldState.from_scene(scene)
    state.robot_config = ch.nominal_config()
    cfg = PlannerConfig.for_robot(ch)
    goals = [Pose(position=goal_pos, orientation=tcp.orientation)] * (cfg.goal_batch * cfg.max_goal_batches + 4)
    plan = plan_phase(ch, state, goals, cfg)
    assert plan is None


# -- noise injection ---------------------------------------------------------------------


def test_arm_noise_zero_command_exact_zero():
    ch = franka()
    q = ch.nominal_config()
    rng = episode_rng(1, 0)
    noisy, eps = inject_arm_noise(ch, q, np.zeros(ch.dof), 0.1, rng)
    assert np.array_equal(noisy, np.zeros(ch.dof))
    assert np.array_equal(eps, np.zeros(6))


def test_arm_noise_sigma_formula():
    # alpha = 0.1 and |dx_pos| = 0.1 m -> sigma_pos = 0.01 m
    ch = franka()
    q = ch.nominal_config()
    J = jacobian(ch, q)
    dq = lsq_project_twist(J, np.array([0.1, 0.0, 0.0, 0.0, 0.0, 0.0]))
    dx = J @ dq
    assert np.linalg.norm(dx[:3]) == pytest.approx(0.1, abs=1e-9)
    truncnorm = pytest.importorskip("scipy.stats").truncnorm
    rng = episode_rng(2, 0)
    n = 20_000
    eps = np.array([inject_arm_noise(ch, q, dq, 0.1, rng)[1] for _ in range(n)])
    sigma = 0.01
    b = ARM_POS_CLIP / sigma
    expected_std = truncnorm.std(-b, b, scale=sigma)
    for k in range(3):
        assert abs(eps[:, k].std() - expected_std) / expected_std < 0.03
    assert np.all(np.abs(eps[:, :3]) <= ARM_POS_CLIP)
    assert np.all(np.abs(eps[:, 3:]) <= ARM_ROT_CLIP)
    # rotation noise: sigma_rot = 0.1 * sigma_pos, far from its clip bound
    sigma_rot = 0.001
    br = ARM_ROT_CLIP / sigma_rot
    expected_rot_std = truncnorm.std(-br, br, scale=sigma_rot)
    for k in range(3, 6):
        assert abs(eps[:, k].std() - expected_rot_std) / expected_rot_std < 0.03


def test_arm_noise_respects_joint_limits():
    ch = franka()
    lo, hi = ch.limits
    rng = episode_rng(3, 0)
    for _ in range(300):
        q = ch.clip(ch.random_config(rng))
        dq = rng.uniform(-0.2, 0.2, ch.dof)
        noisy, _ = inject_arm_noise(ch, q, dq, 0.1, rng)
        q_new = q + noisy
        assert np.all(q_new >= lo - 1e-12) and np.all(q_new <= hi + 1e-12)


def test_base_noise_zero_and_sigma():
    rng = episode_rng(4, 0)
    assert np.array_equal(inject_base_noise(np.zeros(3), rng), np.zeros(3))
    # sigma = 0.1 * |dp_pos| = 0.02 for a 0.2 m command
    n = 50_000
    dp = np.array([0.2, 0.0, 0.0])
    out = np.array([inject_base_noise(dp, rng) for _ in range(n)])
    noise = out - dp
    truncnorm = pytest.importorskip("scipy.stats").truncnorm
    sigma = 0.02
    b = BASE_POS_CLIP / sigma
    expected_std = truncnorm.std(-b, b, scale=sigma)
    assert abs(noise[:, 0].std() - expected_std) / expected_std < 0.03
    assert np.all(np.abs(noise[:, :2]) <= BASE_POS_CLIP)
    assert np.all(np.abs(noise[:, 2]) <= BASE_ROT_CLIP)
    # zero heading command -> zero heading noise (proportional rule)
    assert np.all(noise[:, 2] == 0.0)


# -- run_episode ----------------------------------------------------------------------------


def test_easy_pick_succeeds_without_retry():
    ch, cfg, task, state, rng = make_episode("pick", seed=1)
    res = run_episode(task, state, ch, cfg, rng, noise=True)
    assert res is not None
    assert res.retry_count == 0
    assert res.report.oracle and res.report.at_end
    assert all(s.retry_count == 0 for s in res.steps)


def test_forced_release_mid_lift_triggers_retry():
    ch, cfg, task, state, rng = make_episode("pick", seed=2)
    released = {"done": False}

    def on_step(run):
        if run.phase == "lift" and run.attached() and not released["done"]:
            released["done"] = True
            run.force_release()

    res = run_episode(task, state, ch, cfg, rng, noise=True, hooks=EpisodeHooks(on_step=on_step))
    assert res is not None
    assert res.retry_count == 1
    phases = [s.phase for s in res.steps]
    # after the reset there is a second pregrasp following the first lift
    first_lift = phases.index("lift")
    assert "pregrasp" in phases[first_lift:]
    assert max(s.retry_count for s in res.steps) == 1


def test_four_grasp_failures_discard_episode():
    ch, cfg, task, state, rng = make_episode("pick", seed=3)
    res = run_episode(
        task, state, ch, cfg, rng, noise=True, hooks=EpisodeHooks(veto_attach=lambda attempt: attempt <= 4)
    )
    assert res is None


def test_three_failures_then_success_keeps_episode():
    ch, cfg, task, state, rng = make_episode("pick", seed=4)
    res = run_episode(
        task, state, ch, cfg, rng, noise=True, hooks=EpisodeHooks(veto_attach=lambda attempt: attempt <= 3)
    )
    assert res is not None
    assert res.retry_count == 3


def test_gripper_close_timing_exact():
    ch, cfg, task, state, rng = make_episode("pick", seed=5)
    res = run_episode(task, state, ch, cfg, rng, noise=False)
    assert res is not None
    n_close = sum(1 for s in res.steps if s.gripper_command == "close")
    assert n_close == math.ceil(0.5 * cfg.control_rate)
    # settle: arm stationary 'hold' steps right after the close
    close_end = max(i for i, s in enumerate(res.steps) if s.gripper_command == "close")
    settle = res.steps[close_end + 1 : close_end + 1 + cfg.settle_steps()]
    assert len(settle) == math.ceil(0.1 * cfg.control_rate)
    for k, s in enumerate(settle):
        assert s.gripper_command == "hold"
        prev = res.steps[close_end + k]
        arm = ch.group_indices("arm")
        assert np.array_equal(s.joint_target[arm], prev.joint_target[arm])


def test_noise_disabled_deterministic_and_zero():
    ch, cfg, task, state, rng = make_episode("pick", seed=6)
    res1 = run_episode(task, state.clone(), ch, cfg, episode_rng(777, 0), noise=False)
    res2 = run_episode(task, state.clone(), ch, cfg, episode_rng(777, 0), noise=False)
    assert res1 is not None and res2 is not None
    assert len(res1.steps) == len(res2.steps)
    for a, b in zip(res1.steps, res2.steps):
        assert np.array_equal(a.joint_target, b.joint_target)
        assert np.array_equal(a.noise_applied, np.zeros(6))
        assert a.phase == b.phase


def test_phase_walk_is_prefix_respecting():
    ch, cfg, task, state, rng = make_episode("pick_and_place", seed=7)
    res = run_episode(task, state, ch, cfg, rng, noise=True)
    assert res is not None
    seq = phase_sequence(task.kind, ch.name)
    order = {p: i for i, p in enumerate(seq)}
    prev = 0
    for s in res.steps:
        cur = order[s.phase]
        assert cur >= prev or cur == 0  # forward progress or reset to pregrasp
        prev = cur


def test_arm_noise_never_exceeds_limits_in_episode():
    ch, cfg, task, state, rng = make_episode("pick_and_place", seed=8)
    res = run_episode(task, state, ch, cfg, rng, noise=True)
    assert res is not None
    lo, hi = ch.limits
    for s in res.steps:
        assert np.all(s.joint_target >= lo - 1e-12) and np.all(s.joint_target <= hi + 1e-12)


def test_open_episode_drives_fixture_past_two_thirds():
    ch, cfg, task, state, rng = make_episode("open", seed=9, robot="rby1")
    res = run_episode(task, state, ch, cfg, rng, noise=True)
    assert res is not None
    fixture = res.states[-1].fixtures[task.fixture_id]
    assert fixture.open_fraction() >= 0.67
    assert res.report.oracle


def test_emitted_trajectories_always_pass_evaluator():
    # by construction: run_episode discards failures
    for seed in range(10, 14):
        ch, cfg, task, state, rng = make_episode("pick", seed=seed)
        res = run_episode(task, state, ch, cfg, rng, noise=True)
        if res is not None:
            assert res.report.oracle
