import json
import math
from pathlib import Path

import numpy as np
import pytest

from demoforge.actions import MixtureSpec
from demoforge.dataset import (
    MANIFEST_NAME,
    SchemaError,
    StatsRow,
    compute_stats,
    load_manifest,
    read_episode,
    reconstruct_states,
    validate_dataset,
    validate_record,
    write_episode,
)
from demoforge.engine import EngineConfig, build_episode, generate
from demoforge.tasks import evaluate_success


@pytest.fixture(scope="module")
def pick_record():
    cfg = EngineConfig(robot="franka_fr3", episodes=1, base_seed=77, out_dir="unused",
                       mixture=MixtureSpec(entries=[("pick", 1.0)]))
    for index in range(20):
        outcome = build_episode(cfg, index)
        if outcome.record is not None:
            return outcome.record
    raise RuntimeError("no successful episode in 20 attempts")


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = EngineConfig(
        robot="franka_fr3",
        episodes=4,
        base_seed=31,
        out_dir=str(out),
        mixture=MixtureSpec(entries=[("pick", 0.6), ("pnp_fixed", 0.4)]),
    )
    generate(cfg)
    return out


# -- write/read ------------------------------------------------------------------


def test_write_read_roundtrip(pick_record, tmp_path):
    path = write_episode(pick_record, tmp_path)
    loaded = read_episode(path)
    assert loaded.header_dict() == pick_record.header_dict()
    assert len(loaded.steps) == len(pick_record.steps)
    for a, b in zip(loaded.steps, pick_record.steps):
        assert a.to_dict() == b.to_dict()


def test_write_twice_byte_identical(pick_record, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    pa = write_episode(pick_record, a)
    pb = write_episode(pick_record, b)
    assert pa.read_bytes() == pb.read_bytes()
    assert (a / MANIFEST_NAME).read_bytes() == (b / MANIFEST_NAME).read_bytes()


def test_mismatched_actions_rejected(pick_record, tmp_path):
    import copy

    bad = copy.deepcopy(pick_record)
    bad.steps[3].actions["delta_joint"] = [v + 0.5 for v in bad.steps[3].actions["delta_joint"]]
    with pytest.raises(SchemaError):
        write_episode(bad, tmp_path)


def test_failed_episode_rejected(pick_record, tmp_path):
    import copy

    bad = copy.deepcopy(pick_record)
    bad.success = False
    with pytest.raises(SchemaError):
        write_episode(bad, tmp_path)


def test_unknown_major_version_rejected(pick_record, tmp_path):
    path = write_episode(pick_record, tmp_path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["version"] = "2.0"
    path.write_text("\n".join([json.dumps(header, sort_keys=True)] + lines[1:]) + "\n")
    with pytest.raises(SchemaError):
        read_episode(path)


def test_reconstructed_states_reproduce_success(pick_record):
    history = reconstruct_states(pick_record)
    rep = evaluate_success(pick_record.task, history)
    assert rep.oracle
    assert [s.task_success for s in pick_record.steps] == rep.per_step[1:]


# -- statistics ----------------------------------------------------------------------


def synthetic_manifest(task, robot, episodes, frames, rate):
    base = frames // episodes
    rem = frames - base * episodes
    out = []
    for i in range(episodes):
        out.append(
            {
                "episode_id": f"{task}-{i}",
                "file": f"{task}-{i}.jsonl",
                "robot": robot,
                "task_kind": task,
                "task_tag": task,
                "n_steps": base + (1 if i < rem else 0),
                "control_rate": rate,
                "retry_count": 0,
            }
        )
    return out


def test_stats_door_open_row():
    # Door-open: 79.0k episodes, 15.4M frames at 10 Hz
    manifest = synthetic_manifest("open_door", "rby1", 79_000, 15_400_000, 10.0)
    rows = compute_stats(manifest)
    assert len(rows) == 1
    r = rows[0]
    assert r.episodes == 79_000 and r.frames == 15_400_000
    assert abs(r.avg_length_s - 19.6) < 0.2
    assert abs(r.total_hours - 429.0) / 429.0 < 0.01


def test_stats_franka_pick_row():
    # Franka Pick: 781.8k episodes, 56.9M frames at 15 Hz
    manifest = synthetic_manifest("pick", "franka", 781_800, 56_900_000, 15.0)
    r = compute_stats(manifest)[0]
    assert abs(r.avg_length_s - 4.8) < 0.2
    # arithmetic identity: hours = frames / rate / 3600
    assert r.total_hours == pytest.approx(56_900_000 / 15.0 / 3600.0)


def test_stats_single_episode():
    manifest = synthetic_manifest("pick", "franka", 1, 10, 10.0)
    r = compute_stats(manifest)[0]
    assert r.avg_length_s == pytest.approx(1.0)


def test_stats_empty_manifest():
    assert compute_stats([]) == []


def test_stats_groups_by_task_and_robot():
    manifest = synthetic_manifest("pick", "franka", 3, 30, 15.0) + synthetic_manifest(
        "pick", "rby1", 2, 40, 10.0
    )
    rows = compute_stats(manifest)
    assert len(rows) == 2
    assert {(r.task, r.robot) for r in rows} == {("pick", "franka"), ("pick", "rby1")}


# -- dataset validation -----------------------------------------------------------------


def test_validate_fresh_dataset_clean(small_dataset):
    report = validate_dataset(small_dataset, recheck_fraction=1.0)
    assert report.ok, report.violations
    assert report.episodes == 4
    assert report.rechecked == 4


def test_validate_flags_corrupt_retry_count(small_dataset, tmp_path):
    import shutil

    ds = tmp_path / "corrupt"
    shutil.copytree(small_dataset, ds)
    entry = load_manifest(ds)[0]
    path = ds / entry["file"]
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["retry_count"] = 5
    path.write_text("\n".join([json.dumps(header, sort_keys=True)] + lines[1:]) + "\n")
    report = validate_dataset(ds, recheck_fraction=0.0)
    assert any("retry_count" in v for v in report.violations)


def test_validate_flags_truncated_file(small_dataset, tmp_path):
    import shutil

    ds = tmp_path / "trunc"
    shutil.copytree(small_dataset, ds)
    entry = load_manifest(ds)[1]
    path = ds / entry["file"]
    text = path.read_text()
    path.write_text(text[: len(text) - 40])  # cut into the final record
    report = validate_dataset(ds, recheck_fraction=0.0)
    assert any("bad step record" in v or "steps" in v for v in report.violations)


def test_validate_missing_manifest(tmp_path):
    report = validate_dataset(tmp_path)
    assert not report.ok
