"""Task specifications and success evaluation.

Thresholds follow the task definitions exactly: boundary wording is read
literally ("at least" -> inclusive minimum, "within" -> inclusive maximum,
"more than" -> strict violation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_angle_between
from .world import WorldState, is_supported, polygon_gap, resting_support, support_fraction

TASK_KINDS = ("pick", "pick_and_place", "pnp_next_to", "pnp_color", "open", "open_door")

_REQUIRED_FIELDS = {
    "pick": ("target_id",),
    "pick_and_place": ("target_id", "receptacle_id"),
    "pnp_next_to": ("target_id", "reference_id"),
    "pnp_color": ("target_id", "receptacle_id", "color_attr"),
    "open": ("fixture_id",),
    "open_door": ("fixture_id", "push_or_pull"),
}


class TaskError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str
    target_id: str = ""
    receptacle_id: str = ""
    reference_id: str = ""
    color_attr: str = ""
    fixture_id: str = ""
    push_or_pull: str = ""

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind: {self.kind}")
        for name in _REQUIRED_FIELDS[self.kind]:
            if not getattr(self, name):
                raise TaskError(f"{self.kind} task requires {name}")
        if self.push_or_pull and self.push_or_pull not in ("push", "pull"):
            raise TaskError(f"bad push_or_pull: {self.push_or_pull}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_id": self.target_id,
            "receptacle_id": self.receptacle_id,
            "reference_id": self.reference_id,
            "color_attr": self.color_attr,
            "fixture_id": self.fixture_id,
            "push_or_pull": self.push_or_pull,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**{k: d.get(k, "") for k in (
            "kind", "target_id", "receptacle_id", "reference_id", "color_attr", "fixture_id", "push_or_pull"
        )})


@dataclass
class SuccessParams:
    lift_min: float = 0.01  # m
    support_min: float = 0.5
    recept_disp_max: float = 0.10  # m
    recept_rot_max: float = 45.0  # deg
    next_to_range: tuple[float, float] = (0.0, 0.05)  # m
    reference_disp_max: float = 0.15  # m
    open_fraction: float = 0.67
    consecutive_success_steps: int = 5


@dataclass
class SuccessReport:
    per_step: list[bool]
    oracle: bool
    at_end: bool


def _get_object(state: WorldState, oid: str):
    obj = state.objects.get(oid)
    if obj is None:
        raise TaskError(f"missing object {oid}")
    return obj


def _get_fixture(state: WorldState, fid: str):
    fixture = state.fixtures.get(fid)
    if fixture is None:
        raise TaskError(f"missing fixture {fid}")
    return fixture


def _step_success(task: TaskSpec, state: WorldState, initial: WorldState, params: SuccessParams) -> bool:
    if task.kind == "pick":
        obj = _get_object(state, task.target_id)
        initial_obj = _get_object(initial, task.target_id)
        gain = float(obj.pose.position[2] - initial_obj.pose.position[2])
        return (not is_supported(state, obj)) and gain >= params.lift_min

    if task.kind in ("pick_and_place", "pnp_color"):
        obj = _get_object(state, task.target_id)
        recept = _get_object(state, task.receptacle_id)
        recept0 = _get_object(initial, task.receptacle_id)
        frac = support_fraction(obj, recept)
        disp = float(np.linalg.norm(recept.pose.position - recept0.pose.position))
        rot = math.degrees(quat_angle_between(recept.pose.orientation, recept0.pose.orientation))
        return (
            frac >= params.support_min
            and not disp > params.recept_disp_max
            and not rot > params.recept_rot_max
        )

    if task.kind == "pnp_next_to":
        obj = _get_object(state, task.target_id)
        ref = _get_object(state, task.reference_id)
        ref0 = _get_object(initial, task.reference_id)
        support_obj = resting_support(state, obj)
        support_ref = resting_support(state, ref)
        if support_obj is None or support_obj != support_ref:
            return False
        gap = polygon_gap(obj.footprint(), ref.footprint())
        lo, hi = params.next_to_range
        ref_disp = float(np.linalg.norm(ref.pose.position - ref0.pose.position))
        return lo <= gap <= hi and ref_disp <= params.reference_disp_max

    if task.kind in ("open", "open_door"):
        fixture = _get_fixture(state, task.fixture_id)
        return fixture.open_fraction() >= params.open_fraction

    raise TaskError(f"unknown task kind: {task.kind}")


def _has_consecutive(flags: list[bool], n: int) -> bool:
    run = 0
    for f in flags:
        run = run + 1 if f else 0
        if run >= n:
            return True
    return False


def evaluate_success(
    task: TaskSpec,
    history: list[WorldState],
    params: SuccessParams | None = None,
    oracle_mode: str = "any",
) -> SuccessReport:
    """Per-step success flags plus the oracle and at-end verdicts.

    oracle_mode "any": success at any timestep; "consecutive": requires
    params.consecutive_success_steps successive true steps (the RB-Y1
    evaluation convention).
    """
    if not history:
        raise TaskError("empty state history")
    if oracle_mode not in ("any", "consecutive"):
        raise TaskError(f"unknown oracle mode: {oracle_mode}")
    params = params or SuccessParams()
    initial = history[0]
    flags = [_step_success(task, state, initial, params) for state in history]
    if oracle_mode == "any":
        oracle = any(flags)
    else:
        oracle = _has_consecutive(flags, params.consecutive_success_steps)
    return SuccessReport(per_step=flags, oracle=oracle, at_end=flags[-1])
