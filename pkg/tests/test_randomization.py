import math

import numpy as np
import pytest

from demoforge.geometry import Pose
from demoforge.kinematics import load_preset
from demoforge.randomization import (
    CAMERA_RIGS,
    FRANKA_ARM_NOISE,
    RBY1_ARM_NOISE,
    DomainRanges,
    NoiseProfile,
    episode_rng,
    sample_camera,
    sample_domain_params,
    sample_initial_config,
)


# -- initial configuration -----------------------------------------------------


def test_zero_profile_returns_q0():
    ch = load_preset("franka_fr3")
    profile = NoiseProfile(np.zeros(ch.dof))
    q0 = ch.nominal_config()
    q = sample_initial_config(ch, profile, q0, episode_rng(0, 0))
    assert np.array_equal(q, q0)


def test_uniform_bounds_and_mean():
    ch = load_preset("franka_fr3")
    profile = NoiseProfile.for_chain(ch)
    q0 = ch.nominal_config()
    rng = episode_rng(1, 0)
    n = 100_000
    samples = np.array([sample_initial_config(ch, profile, q0, rng) for _ in range(n)])
    r = profile.per_joint_magnitude
    lo, hi = ch.limits
    for i in range(ch.dof):
        lo_i = max(q0[i] - r[i], lo[i])
        hi_i = min(q0[i] + r[i], hi[i])
        assert samples[:, i].min() >= lo_i - 1e-12
        assert samples[:, i].max() <= hi_i + 1e-12
        if r[i] > 0 and lo_i == q0[i] - r[i] and hi_i == q0[i] + r[i]:
            assert abs(samples[:, i].mean() - q0[i]) < 0.01 * r[i]


def test_franka_graduated_spread():
    ch = load_preset("franka_fr3")
    profile = NoiseProfile.for_chain(ch)
    arm = ch.group_indices("arm")
    q0 = ch.nominal_config()
    rng = episode_rng(2, 0)
    samples = np.array([sample_initial_config(ch, profile, q0, rng) for _ in range(20_000)])
    spread_first = samples[:, arm[0]].max() - samples[:, arm[0]].min()
    spread_last = samples[:, arm[6]].max() - samples[:, arm[6]].min()
    assert spread_last > spread_first


def test_profile_values_match_published_vectors():
    fr = NoiseProfile.for_chain(load_preset("franka_fr3"))
    ch = load_preset("franka_fr3")
    assert tuple(fr.per_joint_magnitude[ch.group_indices("arm")]) == FRANKA_ARM_NOISE
    assert fr.per_joint_magnitude[ch.group_indices("gripper")[0]] == 0.0

    rb = load_preset("rby1")
    pr = NoiseProfile.for_chain(rb)
    arm = rb.group_indices("arm")
    assert tuple(pr.per_joint_magnitude[arm[:7]]) == RBY1_ARM_NOISE
    assert tuple(pr.per_joint_magnitude[arm[7:]]) == RBY1_ARM_NOISE
    for i in rb.group_indices("head"):
        assert pr.per_joint_magnitude[i] == 0.2
    for i in rb.group_indices("gripper"):
        assert pr.per_joint_magnitude[i] == 0.01
    for i in rb.group_indices("base") + rb.group_indices("torso"):
        assert pr.per_joint_magnitude[i] == 0.0


def test_graduated_monotonicity():
    for name in ("franka_fr3", "rby1"):
        ch = load_preset(name)
        profile = NoiseProfile.for_chain(ch)
        arm = ch.group_indices("arm")
        per_arm = [arm[:7]] if name == "franka_fr3" else [arm[:7], arm[7:]]
        for idxs in per_arm:
            r = profile.per_joint_magnitude[list(idxs)]
            assert np.all(np.diff(r) >= 0.0)


# -- cameras ---------------------------------------------------------------------


def test_camera_always_visible_first_attempt():
    rig = CAMERA_RIGS["wrist"]
    calls = []
    cam = sample_camera(rig, Pose.identity(), lambda c: calls.append(1) or True, episode_rng(3, 0))
    assert cam is not None
    assert len(calls) == 1


def test_camera_never_visible_exhausts_attempts():
    rig = CAMERA_RIGS["wrist"]
    calls = []
    cam = sample_camera(rig, Pose.identity(), lambda c: calls.append(1) and False, episode_rng(4, 0))
    assert cam is None
    assert len(calls) == 20


def test_exo_zed2_ranges_and_quadrants():
    rig = CAMERA_RIGS["exo-zed2"]
    center = np.array([0.5, 0.0, 0.6])
    rng = episode_rng(5, 0)
    quadrants = set()
    for _ in range(10_000):
        cam = sample_camera(rig, Pose.identity(), lambda c: True, rng, workspace_center=center)
        assert 64.0 <= cam.vertical_fov <= 72.0
        d = cam.pose.position - center
        dist = math.hypot(d[0], d[1])
        assert 0.2 - 1e-9 <= dist <= 0.8 + 1e-9
        assert 0.05 - 1e-9 <= d[2] <= 0.6 + 1e-9
        quadrants.add((d[0] > 0, d[1] > 0))
    assert len(quadrants) == 4


def test_exo_gopro_ranges():
    rig = CAMERA_RIGS["exo-gopro"]
    center = np.zeros(3)
    rng = episode_rng(6, 0)
    for _ in range(2000):
        cam = sample_camera(rig, Pose.identity(), lambda c: True, rng, workspace_center=center)
        assert 137.0 <= cam.vertical_fov <= 140.0
        d = cam.pose.position - center
        assert 0.2 - 1e-9 <= math.hypot(d[0], d[1]) <= 0.5 + 1e-9


def test_mounted_rig_noise_bounds():
    rig = CAMERA_RIGS["wrist"]
    anchor = Pose.from_position(1.0, 2.0, 3.0)
    rng = episode_rng(7, 0)
    for _ in range(2000):
        cam = sample_camera(rig, anchor, lambda c: True, rng)
        assert 48.0 <= cam.vertical_fov <= 56.0
        dp = cam.pose.position - anchor.position
        assert abs(dp[0]) <= 0.015 + 1e-12
        assert abs(dp[1]) <= 0.005 + 1e-12
        assert abs(dp[2]) <= 0.02 + 1e-12


def test_rig_preset_catalog():
    assert set(CAMERA_RIGS) == {
        "wrist",
        "fixed-shoulder",
        "exo-zed2",
        "exo-gopro",
        "rby1-head",
        "rby1-wrist",
    }
    head = CAMERA_RIGS["rby1-head"]
    assert head.resolution == (1024, 576)
    assert head.post_crop == (768, 576)
    assert CAMERA_RIGS["rby1-wrist"].fov_base == 58.0
    assert CAMERA_RIGS["fixed-shoulder"].fov_base == 71.0


# -- domain parameters -------------------------------------------------------------


def test_degenerate_range_exact():
    ranges = DomainRanges(friction=(0.7, 0.7), mass_scale=(1.0, 1.0), joint_damping=(1.0, 1.0), light_count=(2, 2))
    p = sample_domain_params(ranges, episode_rng(8, 0))
    assert p.friction == 0.7
    assert p.mass_scale == 1.0
    assert p.joint_damping == 1.0
    assert p.light_count == 2


def test_default_ranges_respected():
    ranges = DomainRanges()
    rng = episode_rng(9, 0)
    for _ in range(10_000):
        p = sample_domain_params(ranges, rng)
        assert 0.4 <= p.friction <= 1.2
        assert 0.7 <= p.mass_scale <= 1.3
        assert 0.5 <= p.joint_damping <= 2.0
        assert 1 <= p.light_count <= 4
        assert len(p.light_records) == p.light_count


def test_domain_params_deterministic():
    ranges = DomainRanges()
    a = sample_domain_params(ranges, episode_rng(10, 5), texture_keys=("desk", "obj"))
    b = sample_domain_params(ranges, episode_rng(10, 5), texture_keys=("desk", "obj"))
    assert a.to_dict() == b.to_dict()


def test_episode_rng_streams_independent():
    a = episode_rng(42, 0).random(8)
    b = episode_rng(42, 1).random(8)
    c = episode_rng(42, 0).random(8)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)
