"""Referring-expression sampling and instruction rendering.

Expressions are chosen by a softmax (temperature 0.02) over similarity
margins against the context objects, after dropping candidates whose
margin is below 0.03 or whose absolute target similarity is below 0.1.
Similarities come either from a precomputed matrix file or from the
bundled deterministic bag-of-words embedder.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tasks import TaskSpec
from .world import WorldState

TEMPERATURE = 0.02
MARGIN_MIN = 0.03
ABS_SIM_MIN = 0.1

EMBED_DIM = 64

SYNONYMS = {
    "block": ["cube", "brick"],
    "can": ["tin can"],
    "cup": ["mug"],
    "sponge": ["scrub sponge"],
    "bottle": ["flask"],
    "plate": ["dish"],
    "tray": ["serving tray"],
    "bowl": ["basin"],
    "drawer": ["sliding drawer"],
    "cabinet": ["cupboard"],
    "door": ["hinged door"],
}


class LanguageError(ValueError):
    pass


@dataclass
class ExpressionCandidate:
    text: str
    sim_target: float
    sims_context: np.ndarray  # similarity to each context (distractor) object

    def __post_init__(self):
        self.sims_context = np.asarray(self.sims_context, dtype=float).reshape(-1)


@dataclass
class InstructionContext:
    expressions: dict[str, list[ExpressionCandidate]]
    temperature: float = TEMPERATURE
    margin_min: float = MARGIN_MIN
    abs_sim_min: float = ABS_SIM_MIN


def _margin(cand: ExpressionCandidate) -> float:
    if cand.sims_context.size == 0:
        return cand.sim_target
    return cand.sim_target - float(np.max(cand.sims_context))


def filtered_candidates(ctx: InstructionContext, target_id: str) -> list[tuple[ExpressionCandidate, float]]:
    cands = ctx.expressions.get(target_id)
    if not cands:
        raise LanguageError(f"no expression candidates for {target_id}")
    out = []
    for c in cands:
        m = _margin(c)
        if m >= ctx.margin_min and c.sim_target >= ctx.abs_sim_min:
            out.append((c, m))
    return out


def expression_probabilities(ctx: InstructionContext, target_id: str) -> tuple[list[str], np.ndarray]:
    """Softmax over similarity margins of the surviving candidates."""
    kept = filtered_candidates(ctx, target_id)
    if not kept:
        return [], np.zeros(0)
    margins = np.array([m for _, m in kept])
    logits = margins / ctx.temperature
    logits -= logits.max()  # overflow guard; cancels in the normalization
    weights = np.exp(logits)
    return [c.text for c, _ in kept], weights / weights.sum()


def sample_referring_expression(
    ctx: InstructionContext, target_id: str, rng: np.random.Generator
) -> str | None:
    """One expression drawn from the margin softmax; None when every
    candidate was filtered (caller resamples the scene)."""
    texts, probs = expression_probabilities(ctx, target_id)
    if not texts:
        return None
    return texts[int(rng.choice(len(texts), p=probs))]


# -- bundled deterministic embedder --------------------------------------------------


def _token_vector(token: str) -> np.ndarray:
    digest = hashlib.blake2s(token.encode("utf-8"), digest_size=8).digest()
    idx = int.from_bytes(digest[:4], "little") % EMBED_DIM
    sign = 1.0 if digest[4] % 2 == 0 else -1.0
    v = np.zeros(EMBED_DIM)
    v[idx] = sign
    return v


def embed_text(text: str) -> np.ndarray:
    """Hashed bag-of-words embedding; deterministic across processes."""
    tokens = text.lower().split()
    if not tokens:
        return np.zeros(EMBED_DIM)
    v = np.zeros(EMBED_DIM)
    for t in tokens:
        v += _token_vector(t)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def text_similarity(a: str, b: str) -> float:
    return float(embed_text(a) @ embed_text(b))


def object_description(obj) -> str:
    return f"{obj.color} {obj.category}".strip()


def candidate_expressions(obj) -> list[str]:
    cands = [obj.category, f"{obj.color} {obj.category}".strip()]
    for syn in SYNONYMS.get(obj.category, []):
        cands.append(syn)
        cands.append(f"{obj.color} {syn}".strip())
    seen = set()
    out = []
    for c in cands:
        if c and c not in seen:
            seen.add(c)
            out.append(c)
    return out


def build_context(
    state: WorldState,
    target_ids: list[str],
    context_scope: str = "scene",
    surface_id: str = "",
) -> InstructionContext:
    """Similarity context from the bundled embedder.

    context_scope "scene" contrasts against every other object in the scene;
    "surface" restricts the distractor set to objects resting on surface_id.
    """
    entities = dict(state.objects)
    for f in state.fixtures.values():
        entities[f.id] = f
    expressions: dict[str, list[ExpressionCandidate]] = {}
    for tid in target_ids:
        if tid not in entities:
            raise LanguageError(f"no entity {tid}")
        target = entities[tid]
        others = [e for oid, e in entities.items() if oid != tid]
        if context_scope == "surface":
            from .world import resting_support  # local import to keep module load light

            others = [
                e
                for e in others
                if not hasattr(e, "joint_kind") and resting_support(state, e) == surface_id
            ]
        target_desc = object_description(target) if not hasattr(target, "joint_kind") else target.category
        cands = []
        texts = candidate_expressions(target) if not hasattr(target, "joint_kind") else (
            [target.category] + SYNONYMS.get(target.category, [])
        )
        for text in texts:
            sims = [
                text_similarity(text, object_description(o) if not hasattr(o, "joint_kind") else o.category)
                for o in others
            ]
            cands.append(
                ExpressionCandidate(
                    text=text,
                    sim_target=text_similarity(text, target_desc),
                    sims_context=np.array(sims),
                )
            )
        expressions[tid] = cands
    return InstructionContext(expressions=expressions)


# -- similarity matrix files ----------------------------------------------------------


def load_similarity_file(path: str | Path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Header row of expressions, then one row per object id with decimal
    similarities."""
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines:
        raise LanguageError(f"empty similarity file: {path}")
    expressions = lines[0].split()
    rows: dict[str, np.ndarray] = {}
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != len(expressions) + 1:
            raise LanguageError(f"{path}:{ln}: expected {len(expressions) + 1} fields")
        rows[parts[0]] = np.array(list(map(float, parts[1:])))
    return expressions, rows


def context_from_similarity(
    expressions: list[str],
    rows: dict[str, np.ndarray],
    target_id: str,
    context_ids: list[str],
) -> InstructionContext:
    if target_id not in rows:
        raise LanguageError(f"no similarity row for {target_id}")
    cands = []
    for j, text in enumerate(expressions):
        sims = [float(rows[cid][j]) for cid in context_ids if cid in rows]
        cands.append(
            ExpressionCandidate(text=text, sim_target=float(rows[target_id][j]), sims_context=np.array(sims))
        )
    return InstructionContext(expressions={target_id: cands})


# -- templates and rendering ------------------------------------------------------------


def load_templates(kind: str) -> list[str]:
    text = resources.files("demoforge").joinpath(f"templates/{kind}.txt").read_text()
    templates = [l.strip() for l in text.splitlines() if l.strip()]
    if not templates:
        raise LanguageError(f"no templates for task kind {kind}")
    return templates


def door_verb(fixture, robot_xy: np.ndarray) -> str:
    """'pull' when the door swings toward the robot's start position."""
    swing = fixture.swing_direction()
    to_robot = np.asarray(robot_xy, dtype=float)[:2] - fixture.handle_base.position[:2]
    return "pull" if float(swing[:2] @ to_robot) > 0.0 else "push"


def render_instruction(
    task: TaskSpec,
    expressions: dict[str, str | list[str]],
    templates: list[str],
    rng: np.random.Generator,
) -> str:
    """Uniformly sampled template filled with expressions; when a slot offers
    several candidates, shorter ones are preferred (weight 1/word count)."""
    if not templates:
        raise LanguageError("no templates")
    template = templates[int(rng.integers(0, len(templates)))]
    values: dict[str, str] = {}
    for slot, value in expressions.items():
        if isinstance(value, str):
            values[slot] = value
        else:
            if not value:
                raise LanguageError(f"empty expression list for slot {slot}")
            weights = np.array([1.0 / max(1, len(v.split())) for v in value])
            values[slot] = value[int(rng.choice(len(value), p=weights / weights.sum()))]
    try:
        return template.format(**values)
    except (KeyError, IndexError) as e:
        raise LanguageError(f"unresolved placeholder in template {template!r}: {e}") from e
