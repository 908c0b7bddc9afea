"""Action representations, quantile-binning tokenizer, flow-matching sample
construction, chunk extraction and weighted training-step sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, pose_error
from .kinematics import KinematicChain, forward_kinematics

REPRESENTATIONS = ("abs_joint", "delta_joint", "ee_twist", "ee_abs_pose")

CHUNK_LEN = 16  # H: actions predicted per chunk
EXECUTE_LEN = 8  # prefix executed before re-querying
FLOW_TIMESTEPS = 8  # T: flow timesteps sampled per example
N_BINS = 256
P_LOW = 0.01
P_HIGH = 0.99

# Training-step upsampling multipliers; they compose multiplicatively.
RETRY_WEIGHT = 3.0
PICK_SUCCESS_WEIGHT = 2.0
COMPLETION_WEIGHT = 2.0


class ActionError(ValueError):
    pass


@dataclass
class ActionChunk:
    values: np.ndarray  # (H, D)
    representation: str = "abs_joint"
    base_part: np.ndarray | None = None  # (H, 3) linear/angular base offsets

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ActionError(f"chunk must be 2-D, got shape {self.values.shape}")
        if self.representation not in REPRESENTATIONS:
            raise ActionError(f"unknown representation: {self.representation}")
        if self.base_part is not None:
            self.base_part = np.asarray(self.base_part, dtype=float)
            if self.base_part.shape != (self.values.shape[0], 3):
                raise ActionError("base_part must be (H, 3)")


def ee_pose_row(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    pose = forward_kinematics(chain, q)
    return np.array(pose.to_flat())


def twist_between(a: Pose, b: Pose) -> np.ndarray:
    """6-vector (linear, angular rotation-vector) taking pose a to pose b."""
    dp, dr = pose_error(b, a)
    return np.concatenate([dp, dr])


def convert_representation(
    chunk: ActionChunk,
    to: str,
    chain: KinematicChain | None = None,
    q_context: np.ndarray | None = None,
) -> ActionChunk:
    """abs_joint <-> delta_joint are exact inverses given q_context; the
    end-effector representations are computed by FK along the chunk."""
    if to not in REPRESENTATIONS:
        raise ActionError(f"unknown representation: {to}")
    rep = chunk.representation
    if rep == to:
        return ActionChunk(chunk.values.copy(), to, None if chunk.base_part is None else chunk.base_part.copy())

    if rep in ("ee_twist", "ee_abs_pose"):
        raise ActionError(f"cannot convert from {rep}")
    if q_context is None:
        raise ActionError("q_context required for chunk conversion")
    q_context = np.asarray(q_context, dtype=float)

    if rep == "abs_joint":
        abs_vals = chunk.values
    else:  # delta_joint
        abs_vals = q_context[None, :] + np.cumsum(chunk.values, axis=0)

    if to == "abs_joint":
        out = abs_vals.copy()
    elif to == "delta_joint":
        prev = np.vstack([q_context[None, :], abs_vals[:-1]])
        out = abs_vals - prev
    elif to == "ee_abs_pose":
        if chain is None:
            raise ActionError("chain required for end-effector conversions")
        out = np.stack([ee_pose_row(chain, q) for q in abs_vals])
    else:  # ee_twist
        if chain is None:
            raise ActionError("chain required for end-effector conversions")
        poses = [forward_kinematics(chain, q_context)] + [forward_kinematics(chain, q) for q in abs_vals]
        out = np.stack([twist_between(poses[h], poses[h + 1]) for h in range(len(abs_vals))])
    return ActionChunk(out, to, None if chunk.base_part is None else chunk.base_part.copy())


# -- quantile tokenizer -------------------------------------------------------------


@dataclass
class QuantileTokenizer:
    p1: np.ndarray  # (D,)
    p99: np.ndarray  # (D,)
    bin_edges: np.ndarray  # (D, N_BINS - 1) interior edges in normalized space
    representatives: np.ndarray  # (D, N_BINS) raw-space decode values
    degenerate: np.ndarray  # (D,) bool
    n_bins: int = N_BINS

    @property
    def dims(self) -> int:
        return self.p1.shape[0]

    def normalize(self, values: np.ndarray, dim: int) -> np.ndarray:
        if self.degenerate[dim]:
            return np.zeros_like(np.asarray(values, dtype=float))
        span = self.p99[dim] - self.p1[dim]
        z = 2.0 * (np.asarray(values, dtype=float) - self.p1[dim]) / span - 1.0
        return np.clip(z, -1.0, 1.0)

    def encode(self, values, dim: int = 0) -> np.ndarray:
        """Bin indices in [0, 255]; everything at or below p1 lands in bin 0,
        at or above p99 in bin 255."""
        arr = np.atleast_1d(np.asarray(values, dtype=float))
        if self.degenerate[dim]:
            out = np.zeros(arr.shape, dtype=np.int64)
        else:
            z = self.normalize(arr, dim)
            out = np.searchsorted(self.bin_edges[dim], z, side="right").astype(np.int64)
            out = np.clip(out, 0, self.n_bins - 1)
            out[z <= -1.0] = 0  # clipped low values land in bin 0 even with duplicate edges
        return out if np.ndim(values) else int(out[0])

    def decode(self, indices, dim: int = 0) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        if np.any(arr < 0) or np.any(arr >= self.n_bins):
            raise ActionError("bin index out of range")
        out = self.representatives[dim][arr]
        return out if np.ndim(indices) else float(out[0])

    def bin_width(self, index: int, dim: int = 0) -> float:
        """Raw-space width of a bin interval."""
        if self.degenerate[dim]:
            return 0.0
        edges = np.concatenate([[-1.0], self.bin_edges[dim], [1.0]])
        span = self.p99[dim] - self.p1[dim]
        return float((edges[index + 1] - edges[index]) * span / 2.0)


def fit_tokenizer(samples: np.ndarray, eps: float = 1e-12) -> QuantileTokenizer:
    """Fit per-dimension p1/p99 and k/256 quantile bin edges.

    Edges are the empirical k/256 quantiles of the normalized in-range data,
    so bins are approximately uniformly populated.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < N_BINS:
        raise ActionError(f"need >= {N_BINS} samples per dim, got {n}")
    p1 = np.empty(d)
    p99 = np.empty(d)
    edges = np.zeros((d, N_BINS - 1))
    reps = np.zeros((d, N_BINS))
    degenerate = np.zeros(d, dtype=bool)
    qs = np.arange(1, N_BINS) / N_BINS
    for j in range(d):
        vals = samples[:, j]
        p1[j], p99[j] = np.quantile(vals, [P_LOW, P_HIGH])
        if p99[j] - p1[j] < eps:
            degenerate[j] = True
            reps[j, :] = p1[j]
            continue
        in_range = vals[(vals >= p1[j]) & (vals <= p99[j])]
        z = 2.0 * (in_range - p1[j]) / (p99[j] - p1[j]) - 1.0
        edges[j] = np.quantile(z, qs)
        # decode representatives: per-bin median of the in-range training
        # values (keeps decode inside the bin interval even for the boundary
        # bins), midpoint of the bin interval when a bin is empty
        bins = np.clip(np.searchsorted(edges[j], z, side="right"), 0, N_BINS - 1)
        bins[z <= -1.0] = 0
        full_edges = np.concatenate([[-1.0], edges[j], [1.0]])
        for b in range(N_BINS):
            members = in_range[bins == b]
            if members.size:
                reps[j, b] = np.median(members)
            else:
                mid = 0.5 * (full_edges[b] + full_edges[b + 1])
                reps[j, b] = p1[j] + (mid + 1.0) * (p99[j] - p1[j]) / 2.0
    return QuantileTokenizer(p1=p1, p99=p99, bin_edges=edges, representatives=reps, degenerate=degenerate)


def save_tokenizer(tok: QuantileTokenizer, path: str | Path) -> None:
    lines = [f"quantile-tokenizer v1 dims {tok.dims} bins {tok.n_bins}"]
    for j in range(tok.dims):
        lines.append(
            f"dim {j} p1 {float(tok.p1[j])!r} p99 {float(tok.p99[j])!r} degenerate {int(tok.degenerate[j])}"
        )
        lines.append("edges " + " ".join(repr(float(e)) for e in tok.bin_edges[j]))
        lines.append("reps " + " ".join(repr(float(r)) for r in tok.representatives[j]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_tokenizer(path: str | Path) -> QuantileTokenizer:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    if header[:2] != ["quantile-tokenizer", "v1"]:
        raise ActionError(f"not a tokenizer file: {path}")
    dims = int(header[3])
    n_bins = int(header[5])
    p1 = np.empty(dims)
    p99 = np.empty(dims)
    edges = np.zeros((dims, n_bins - 1))
    reps = np.zeros((dims, n_bins))
    degenerate = np.zeros(dims, dtype=bool)
    for j in range(dims):
        head = lines[1 + 3 * j].split()
        p1[j] = float(head[3])
        p99[j] = float(head[5])
        degenerate[j] = bool(int(head[7]))
        edges[j] = np.array([float(x) for x in lines[2 + 3 * j].split()[1:]])
        reps[j] = np.array([float(x) for x in lines[3 + 3 * j].split()[1:]])
    return QuantileTokenizer(p1=p1, p99=p99, bin_edges=edges, representatives=reps, degenerate=degenerate, n_bins=n_bins)


# -- flow matching ---------------------------------------------------------------------


@dataclass
class FlowSample:
    t: float
    noised_chunk: np.ndarray
    velocity_target: np.ndarray
    noise: np.ndarray


def flow_sample(chunk: np.ndarray, t: float, noise: np.ndarray) -> FlowSample:
    """Linear path from noise (t=0) to data (t=1); velocity = data - noise."""
    chunk = np.asarray(chunk, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if chunk.shape != noise.shape:
        raise ActionError("chunk/noise shape mismatch")
    noised = (1.0 - t) * noise + t * chunk
    return FlowSample(t=float(t), noised_chunk=noised, velocity_target=chunk - noise, noise=noise)


def make_flow_samples(
    chunk: np.ndarray, T: int = FLOW_TIMESTEPS, rng: np.random.Generator | None = None
) -> list[FlowSample]:
    """T independent (t, noise) draws for one action chunk."""
    if T < 1:
        raise ActionError("T must be >= 1")
    rng = rng or np.random.default_rng()
    chunk = np.asarray(chunk, dtype=float)
    return [
        flow_sample(chunk, float(rng.uniform(0.0, 1.0)), rng.standard_normal(chunk.shape))
        for _ in range(T)
    ]


# -- chunk extraction ---------------------------------------------------------------------


def extract_chunks(
    actions: np.ndarray, H: int = CHUNK_LEN, stride: int = EXECUTE_LEN
) -> list[tuple[int, np.ndarray]]:
    """(anchor index, H x D chunk) pairs with stride between anchors; the
    trailing rows pad by repeating the final action."""
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions[:, None]
    n = actions.shape[0]
    if n == 0:
        raise ActionError("empty trajectory")
    out = []
    for anchor in range(0, n, stride):
        chunk = actions[anchor : anchor + H]
        if chunk.shape[0] < H:
            pad = np.repeat(actions[-1][None, :], H - chunk.shape[0], axis=0)
            chunk = np.vstack([chunk, pad])
        out.append((anchor, chunk))
    return out


# -- data mixtures -----------------------------------------------------------------------


@dataclass
class StepWeights:
    retry: float = RETRY_WEIGHT
    pick_success: float = PICK_SUCCESS_WEIGHT
    completion: float = COMPLETION_WEIGHT


@dataclass
class MixtureSpec:
    entries: list[tuple[str, float]]
    step_weights: StepWeights = field(default_factory=StepWeights)

    def __post_init__(self):
        total = sum(r for _, r in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ActionError(f"mixture ratios sum to {total}, expected 1")
        self._tags = [t for t, _ in self.entries]
        self._cum = np.cumsum([r for _, r in self.entries])

    @classmethod
    def franka_default(cls) -> "MixtureSpec":
        return cls(
            entries=[
                ("pick", 0.20),
                ("pnp_fixed", 0.10),
                ("pnp_random", 0.35),
                ("pnp_next_to", 0.20),
                ("pnp_color", 0.15),
            ]
        )

    @classmethod
    def rby1_default(cls) -> "MixtureSpec":
        return cls(
            entries=[
                ("open", 0.20),
                ("open_door", 0.20),
                ("pick", 0.30),
                ("pick_and_place", 0.30),
            ]
        )

    def sample_tag(self, rng: np.random.Generator) -> str:
        return self._tags[int(np.searchsorted(self._cum, rng.random(), side="right"))]


def step_sampling_weights(
    retry_flags: np.ndarray,
    pick_flags: np.ndarray,
    completion_flags: np.ndarray,
    weights: StepWeights | None = None,
) -> np.ndarray:
    """Base weight 1 per step; retry/pick-success/completion multipliers compose."""
    weights = weights or StepWeights()
    w = np.ones(len(retry_flags))
    w *= np.where(np.asarray(retry_flags, dtype=bool), weights.retry, 1.0)
    w *= np.where(np.asarray(pick_flags, dtype=bool), weights.pick_success, 1.0)
    w *= np.where(np.asarray(completion_flags, dtype=bool), weights.completion, 1.0)
    return w


class DatasetIndex:
    """Step-sampling index: per task tag, episodes with cumulative step weights."""

    def __init__(self):
        self.by_tag: dict[str, list[tuple[str, np.ndarray]]] = {}

    def add_episode(
        self,
        tag: str,
        episode_key: str,
        retry_flags,
        pick_flags,
        completion_flags,
        weights: StepWeights | None = None,
    ) -> None:
        w = step_sampling_weights(retry_flags, pick_flags, completion_flags, weights)
        self.by_tag.setdefault(tag, []).append((episode_key, np.cumsum(w)))


def sample_training_step(
    index: DatasetIndex, mixture: MixtureSpec, rng: np.random.Generator
) -> tuple[str, str, int]:
    """(task tag, episode key, step index): tag by mixture ratio, episode
    uniform within the tag, step by composed upsampling weights."""
    tag = mixture.sample_tag(rng)
    episodes = index.by_tag.get(tag)
    if not episodes:
        raise ActionError(f"no episodes indexed for tag {tag}")
    key, cum = episodes[int(rng.integers(0, len(episodes)))]
    step = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return tag, key, min(step, len(cum) - 1)
