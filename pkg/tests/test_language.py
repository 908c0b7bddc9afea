import math

import numpy as np
import pytest

from demoforge.geometry import Pose
from demoforge.language import (
    ExpressionCandidate,
    InstructionContext,
    LanguageError,
    build_context,
    candidate_expressions,
    context_from_similarity,
    door_verb,
    expression_probabilities,
    load_similarity_file,
    load_templates,
    render_instruction,
    sample_referring_expression,
    text_similarity,
)
from demoforge.tasks import TaskSpec
from demoforge.world import ArticulatedFixture, ObjectInstance, SceneSpec, WorldState


def ctx_from(cands):
    return InstructionContext(expressions={"t": cands})


def ec(text, sim, sims_ctx=()):
    return ExpressionCandidate(text=text, sim_target=sim, sims_context=np.array(sims_ctx, dtype=float))


# -- sampling -------------------------------------------------------------------


def test_single_valid_candidate_probability_one():
    ctx = ctx_from([ec("the mug", 0.8, [0.2])])
    texts, probs = expression_probabilities(ctx, "t")
    assert texts == ["the mug"]
    assert probs[0] == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    assert sample_referring_expression(ctx, "t", rng) == "the mug"


def test_softmax_direct_evaluation():
    # margins [0.05, 0.03] at tau=0.02 -> probs [e^2.5, e^1.5] / Z
    ctx = ctx_from([ec("a", 0.5, [0.45]), ec("b", 0.5, [0.47])])
    texts, probs = expression_probabilities(ctx, "t")
    z = math.exp(2.5) + math.exp(1.5)
    assert probs[texts.index("a")] == pytest.approx(math.exp(2.5) / z, abs=1e-9)
    assert probs[texts.index("b")] == pytest.approx(math.exp(1.5) / z, abs=1e-9)
    assert probs[texts.index("a")] == pytest.approx(0.7310585786300049, abs=1e-9)


def test_low_absolute_similarity_never_sampled():
    ctx = ctx_from([ec("good", 0.5, [0.2]), ec("weak", 0.09, [0.0])])
    texts, probs = expression_probabilities(ctx, "t")
    assert "weak" not in texts
    rng = np.random.default_rng(1)
    for _ in range(20_000):
        assert sample_referring_expression(ctx, "t", rng) != "weak"


def test_margin_filter():
    ctx = ctx_from([ec("ambiguous", 0.8, [0.78]), ec("clear", 0.8, [0.5])])
    texts, _ = expression_probabilities(ctx, "t")
    assert texts == ["clear"]
    # margin exactly at the threshold is kept ("falls below 0.03" drops)
    ctx2 = ctx_from([ec("edge", 0.5, [0.47])])
    texts2, _ = expression_probabilities(ctx2, "t")
    assert texts2 == ["edge"]


def test_all_filtered_returns_failure():
    ctx = ctx_from([ec("a", 0.5, [0.49]), ec("b", 0.05, [0.0])])
    assert sample_referring_expression(ctx, "t", np.random.default_rng(2)) is None


def test_empirical_frequencies_match_analytic():
    ctx = ctx_from([ec("a", 0.5, [0.45]), ec("b", 0.5, [0.46]), ec("c", 0.5, [0.47])])
    texts, probs = expression_probabilities(ctx, "t")
    rng = np.random.default_rng(3)
    n = 100_000
    counts = {t: 0 for t in texts}
    for _ in range(n):
        counts[sample_referring_expression(ctx, "t", rng)] += 1
    for t, p in zip(texts, probs):
        se = math.sqrt(p * (1 - p) / n)
        assert abs(counts[t] / n - p) < 4 * se + 1e-12


# -- bundled embedder ----------------------------------------------------------------


def test_embedder_deterministic_and_discriminative():
    assert text_similarity("red mug", "red mug") == pytest.approx(1.0)
    same = text_similarity("red mug", "red mug")
    again = text_similarity("red mug", "red mug")
    assert same == again
    partial = text_similarity("red mug", "blue mug")
    assert 0.0 < partial < 1.0
    assert text_similarity("red mug", "green door") < partial


def test_build_context_color_discrimination():
    state = WorldState.from_scene(SceneSpec())
    state.objects["r0"] = ObjectInstance("r0", "plate", np.array([0.1, 0.1, 0.02]), Pose.identity(), role="receptacle", color="red")
    state.objects["r1"] = ObjectInstance("r1", "plate", np.array([0.1, 0.1, 0.02]), Pose.identity(), role="receptacle", color="blue")
    ctx = build_context(state, ["r0"])
    texts, probs = expression_probabilities(ctx, "r0")
    assert texts, "color-bearing expressions must survive"
    for t in texts:
        assert "red" in t  # bare 'plate' is ambiguous against the blue plate


def test_candidate_expressions_unique():
    obj = ObjectInstance("o", "cup", np.array([0.02, 0.02, 0.03]), Pose.identity(), role="pickup", color="green")
    cands = candidate_expressions(obj)
    assert len(cands) == len(set(cands))
    assert "cup" in cands and "green cup" in cands


# -- similarity files ---------------------------------------------------------------


def test_similarity_file_roundtrip(tmp_path):
    p = tmp_path / "sims.txt"
    p.write_text("mug red_mug cup\nobj_a 0.8 0.9 0.7\nobj_b 0.6 0.3 0.65\n")
    expressions, rows = load_similarity_file(p)
    assert expressions == ["mug", "red_mug", "cup"]
    ctx = context_from_similarity(expressions, rows, "obj_a", ["obj_b"])
    texts, probs = expression_probabilities(ctx, "obj_a")
    # margins: mug 0.2, red_mug 0.6, cup 0.05 -> all kept
    assert set(texts) == {"mug", "red_mug", "cup"}
    assert probs[texts.index("red_mug")] > probs[texts.index("mug")]


def test_similarity_file_malformed(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("a b\nrow 0.5\n")
    with pytest.raises(LanguageError):
        load_similarity_file(p)


# -- rendering -------------------------------------------------------------------------


def test_render_fills_template():
    task = TaskSpec(kind="pick", target_id="o")
    out = render_instruction(task, {"obj": "banana"}, ["pick up the {obj}"], np.random.default_rng(4))
    assert out == "pick up the banana"


def test_render_deterministic_single():
    task = TaskSpec(kind="pick", target_id="o")
    outs = {
        render_instruction(task, {"obj": "banana"}, ["lift the {obj}"], np.random.default_rng(i))
        for i in range(10)
    }
    assert outs == {"lift the banana"}


def test_render_biases_short_expressions():
    task = TaskSpec(kind="pick", target_id="o")
    rng = np.random.default_rng(5)
    counts = {"mug": 0, "large ceramic coffee mug": 0}
    for _ in range(5000):
        out = render_instruction(
            task, {"obj": ["mug", "large ceramic coffee mug"]}, ["pick up the {obj}"], rng
        )
        for k in counts:
            if out == f"pick up the {k}":
                counts[k] += 1
    # weights 1 vs 1/4 -> 80/20 split
    assert counts["mug"] / 5000 == pytest.approx(0.8, abs=0.03)


def test_render_unresolved_placeholder_errors():
    task = TaskSpec(kind="pick", target_id="o")
    with pytest.raises(LanguageError):
        render_instruction(task, {"obj": "banana"}, ["put the {obj} in the {recept}"], np.random.default_rng(6))


def test_templates_shipped_for_all_kinds():
    for kind in ("pick", "pick_and_place", "pnp_next_to", "pnp_color", "open", "open_door"):
        templates = load_templates(kind)
        assert len(templates) >= 5


def test_door_verb_sides():
    fixture = ArticulatedFixture(
        id="door",
        joint_kind="revolute",
        axis=np.array([0.0, 0.0, 1.0]),
        anchor=np.array([1.0, -0.5, 0.0]),
        range=(0.0, 1.5),
        value=0.0,
        handle_base=Pose.from_position(0.95, 0.2, 0.9),
        door_flag=True,
    )
    # swing = z x (handle - anchor): handle toward -x side when opening
    swing = fixture.swing_direction()
    robot_on_swing_side = fixture.handle_base.position[:2] + swing[:2]
    robot_opposite = fixture.handle_base.position[:2] - swing[:2]
    assert door_verb(fixture, robot_on_swing_side) == "pull"
    assert door_verb(fixture, robot_opposite) == "push"


def test_door_instruction_renders_verb():
    task = TaskSpec(kind="open_door", fixture_id="door", push_or_pull="pull")
    out = render_instruction(task, {"verb": "pull"}, load_templates("open_door"), np.random.default_rng(7))
    assert out.startswith("pull")
