"""Swarm-interception benchmark environment.

A team of defender agents protects ground bases from invaders descending
through a cubic arena. An invader slows down once enough defenders track it
and turns back for good when the tracker count reaches the task threshold.
The team reward is sparse: +1 when every base survives the episode, -1 the
moment any base is destroyed, 0 otherwise.

Tasks are named ``CSI-<N>/<k>/<m>``: N defenders, k trackers needed to turn
an invader back, m invaders.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class TaskNameError(ValueError):
    """Raised when a task name does not match the CSI-<N>/<k>/<m> grammar."""


class PrimitiveSet(Enum):
    """Which primitive move actions exist as graph targets.

    NONE keeps the graph free of primitive targets; agents then move only
    through cooperative-command translation, which falls back to the six
    axis directions.
    """

    NONE = "none"
    SIX = "six"
    FOURTEEN = "fourteen"

    @classmethod
    def from_name(cls, name: str) -> "PrimitiveSet":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown primitive set {name!r}; expected none|six|fourteen") from None


_AXIS_DIRS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.float64,
)
_DIAG_DIRS = (
    np.array(
        [
            [1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1],
            [-1, 1, 1], [-1, 1, -1], [-1, -1, 1], [-1, -1, -1],
        ],
        dtype=np.float64,
    )
    / math.sqrt(3.0)
)
_FOURTEEN_DIRS = np.concatenate([_AXIS_DIRS, _DIAG_DIRS], axis=0)


def primitive_directions(primitive_set: PrimitiveSet) -> np.ndarray:
    """Unit move directions exposed as primitive graph targets (may be empty)."""
    if primitive_set is PrimitiveSet.NONE:
        return np.zeros((0, 3), dtype=np.float64)
    if primitive_set is PrimitiveSet.SIX:
        return _AXIS_DIRS.copy()
    return _FOURTEEN_DIRS.copy()


def move_directions(primitive_set: PrimitiveSet) -> np.ndarray:
    """Physical action directions the environment accepts.

    With ``NONE`` the graph exposes no primitive targets, but cooperative
    commands still have to be translated into some motion; the six axis
    directions serve as that fallback action space.
    """
    if primitive_set is PrimitiveSet.NONE:
        return _AXIS_DIRS.copy()
    return primitive_directions(primitive_set)


def parse_task_name(name: str) -> tuple[int, int, int]:
    """Parse ``CSI-<N>/<k>/<m>`` into (n_agents, k_threshold, m_invaders)."""
    m = re.fullmatch(r"CSI-([^/]*)/([^/]*)/([^/]*)", name)
    if m is None:
        raise TaskNameError(f"task {name!r} does not match CSI-<N>/<k>/<m>")
    fields = ("defender count N", "turn-back threshold k", "invader count m")
    values = []
    for label, text in zip(fields, m.groups()):
        if not re.fullmatch(r"\d+", text):
            raise TaskNameError(f"task {name!r}: {label} is not a positive integer (got {text!r})")
        values.append(int(text))
    n, k, mm = values
    if n < 1 or k < 1 or mm < 1:
        bad = fields[values.index(min(values))]
        raise TaskNameError(f"task {name!r}: {bad} must be >= 1")
    return n, k, mm


@dataclass(frozen=True)
class EnvConfig:
    """Environment parameters; defaults give a solvable default physics.

    Invariants enforced at construction: k_threshold >= slow_count >= 1 and
    v_def > v_inv * slow_fraction, so a slowed invader is always catchable.
    """

    n_agents: int
    k_threshold: int
    m_invaders: int
    n_bases: int = 4
    world_extent: float = 100.0
    v_def: float = 1.0
    v_inv: float = 0.8
    r_track: float = 5.0
    r_destroy: float = 2.0
    slow_fraction: float = 0.5
    slow_count: int = 0  # 0 -> ceil(k_threshold / 2)
    t_max: int = 200
    primitive_set: PrimitiveSet = PrimitiveSet.SIX
    seed: int = 0

    def __post_init__(self):
        if self.slow_count == 0:
            object.__setattr__(self, "slow_count", max(1, math.ceil(self.k_threshold / 2)))
        if not (self.k_threshold >= self.slow_count >= 1):
            raise ValueError(
                f"need k_threshold >= slow_count >= 1, got k={self.k_threshold}, slow_count={self.slow_count}"
            )
        if not self.v_def > self.v_inv * self.slow_fraction:
            raise ValueError("v_def must exceed v_inv * slow_fraction or slowed invaders escape")
        if self.r_track <= 0 or self.t_max < 1 or self.n_bases < 1 or self.world_extent <= 0:
            raise ValueError("r_track, t_max, n_bases, world_extent must be positive")

    @property
    def move_dirs(self) -> np.ndarray:
        return move_directions(self.primitive_set)

    @property
    def n_move_actions(self) -> int:
        return self.move_dirs.shape[0]


def config_for_task(task: str, **overrides) -> EnvConfig:
    """EnvConfig for a CSI task name, with keyword overrides on top."""
    n, k, m = parse_task_name(task)
    cfg = EnvConfig(n_agents=n, k_threshold=k, m_invaders=m)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class EnvState:
    """Full simulator state. Treated as immutable; step() returns a new one."""

    t: int
    agent_pos: np.ndarray       # (N, 3)
    invader_pos: np.ndarray     # (m, 3)
    invader_target: np.ndarray  # (m,) base index
    invader_active: np.ndarray  # (m,) bool; False = neutralized (absorbing)
    invader_heading: np.ndarray  # (m, 3) frozen retreat heading once neutralized
    base_pos: np.ndarray        # (n_bases, 3)
    base_alive: np.ndarray      # (n_bases,) bool

    @property
    def base_centroid(self) -> np.ndarray:
        return self.base_pos.mean(axis=0)


@dataclass
class StepOutcome:
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def reset(config: EnvConfig, rng: np.random.Generator | None = None) -> EnvState:
    """Spawn a fresh episode; deterministic given the generator state.

    Bases sit on the ground face with pairwise separation of at least a
    quarter of the arena, defenders spawn in a box around the base centroid,
    invaders enter on the top face with uniform (x, y) and a uniformly
    chosen target base.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    ext = config.world_extent

    base_pos = np.zeros((config.n_bases, 3), dtype=np.float64)
    lo, hi = 0.15 * ext, 0.85 * ext
    for i in range(config.n_bases):
        for _ in range(10000):
            xy = rng.uniform(lo, hi, size=2)
            if i == 0 or np.min(np.linalg.norm(base_pos[:i, :2] - xy, axis=1)) >= ext / 4:
                base_pos[i, :2] = xy
                break
        else:
            raise RuntimeError("could not place bases with the required separation")

    centroid = base_pos.mean(axis=0)
    half = 0.15 * ext
    agent_pos = np.empty((config.n_agents, 3), dtype=np.float64)
    agent_pos[:, 0] = rng.uniform(centroid[0] - half, centroid[0] + half, size=config.n_agents)
    agent_pos[:, 1] = rng.uniform(centroid[1] - half, centroid[1] + half, size=config.n_agents)
    agent_pos[:, 2] = rng.uniform(0.0, 0.1 * ext, size=config.n_agents)
    agent_pos = np.clip(agent_pos, 0.0, ext)

    invader_pos = np.empty((config.m_invaders, 3), dtype=np.float64)
    invader_pos[:, 0] = rng.uniform(0.0, ext, size=config.m_invaders)
    invader_pos[:, 1] = rng.uniform(0.0, ext, size=config.m_invaders)
    invader_pos[:, 2] = ext
    invader_target = rng.integers(0, config.n_bases, size=config.m_invaders)

    return EnvState(
        t=0,
        agent_pos=agent_pos,
        invader_pos=invader_pos,
        invader_target=invader_target.astype(np.int64),
        invader_active=np.ones(config.m_invaders, dtype=bool),
        invader_heading=np.zeros((config.m_invaders, 3), dtype=np.float64),
        base_pos=base_pos,
        base_alive=np.ones(config.n_bases, dtype=bool),
    )


def step(state: EnvState, actions: np.ndarray, config: EnvConfig) -> tuple[EnvState, StepOutcome]:
    """Advance one step given a primitive action id per agent.

    Order: agents move, invaders update (neutralize / slow / advance),
    base destruction check, then the success check at all-neutralized or the
    step cap. Positions stay clamped to the arena.
    """
    actions = np.asarray(actions)
    if actions.shape != (config.n_agents,):
        raise ValueError(f"need one action per agent, got shape {actions.shape}")
    dirs = config.move_dirs
    if actions.min() < 0 or actions.max() >= len(dirs):
        raise ValueError(f"action id out of range for {config.primitive_set}")
    ext = config.world_extent

    agent_pos = np.clip(state.agent_pos + config.v_def * dirs[actions], 0.0, ext)

    invader_pos = state.invader_pos.copy()
    invader_active = state.invader_active.copy()
    invader_heading = state.invader_heading.copy()
    diff = agent_pos[None, :, :] - invader_pos[:, None, :]
    dist = np.linalg.norm(diff, axis=2)
    trackers = np.where(invader_active, (dist <= config.r_track).sum(axis=1), 0)

    centroid = state.base_centroid
    for j in range(config.m_invaders):
        if invader_active[j]:
            to_base = state.base_pos[state.invader_target[j]] - invader_pos[j]
            norm = np.linalg.norm(to_base)
            unit = to_base / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
            if trackers[j] >= config.k_threshold:
                invader_active[j] = False
                invader_heading[j] = -unit
                invader_pos[j] += config.v_inv * invader_heading[j]
            elif trackers[j] >= config.slow_count:
                invader_pos[j] += config.v_inv * config.slow_fraction * unit
            else:
                invader_pos[j] += config.v_inv * unit
        elif np.linalg.norm(invader_pos[j] - centroid) < ext:
            invader_pos[j] += config.v_inv * invader_heading[j]
    invader_pos = np.clip(invader_pos, 0.0, ext)

    base_alive = state.base_alive.copy()
    destroyed = False
    for j in range(config.m_invaders):
        if invader_active[j]:
            b = state.invader_target[j]
            if base_alive[b] and np.linalg.norm(invader_pos[j] - state.base_pos[b]) <= config.r_destroy:
                base_alive[b] = False
                destroyed = True

    new_state = EnvState(
        t=state.t + 1,
        agent_pos=agent_pos,
        invader_pos=invader_pos,
        invader_target=state.invader_target,
        invader_active=invader_active,
        invader_heading=invader_heading,
        base_pos=state.base_pos,
        base_alive=base_alive,
    )
    info = {
        "bases_destroyed": int((~base_alive).sum()),
        "invaders_neutralized": int((~invader_active).sum()),
        "trackers": trackers.tolist(),
    }
    if destroyed:
        return new_state, StepOutcome(reward=-1.0, done=True, info=info)
    if new_state.t >= config.t_max or not invader_active.any():
        reward = 1.0 if base_alive.all() else -1.0
        return new_state, StepOutcome(reward=reward, done=True, info=info)
    return new_state, StepOutcome(reward=0.0, done=False, info=info)


def obs_dim(config: EnvConfig) -> int:
    return 3 + 4 * config.m_invaders + 4 * config.n_bases


def observe_all(state: EnvState, config: EnvConfig) -> np.ndarray:
    """Observation matrix, one row per agent.

    Row layout: own position / extent, then per invader (relative position /
    extent, active flag), then per base (relative position / extent, alive
    flag). Constant length within a task family, which is what lets a policy
    transfer across team sizes.
    """
    ext = config.world_extent
    n = config.n_agents
    own = state.agent_pos / ext
    inv_rel = (state.invader_pos[None, :, :] - state.agent_pos[:, None, :]) / ext
    inv_flag = np.broadcast_to(state.invader_active.astype(np.float64)[None, :, None], (n, config.m_invaders, 1))
    inv_block = np.concatenate([inv_rel, inv_flag], axis=2).reshape(n, -1)
    base_rel = (state.base_pos[None, :, :] - state.agent_pos[:, None, :]) / ext
    base_flag = np.broadcast_to(state.base_alive.astype(np.float64)[None, :, None], (n, config.n_bases, 1))
    base_block = np.concatenate([base_rel, base_flag], axis=2).reshape(n, -1)
    return np.concatenate([own, inv_block, base_block], axis=1)


def observe(state: EnvState, agent_id: int, config: EnvConfig) -> np.ndarray:
    """Single agent's observation vector (see observe_all for the layout)."""
    if not 0 <= agent_id < config.n_agents:
        raise ValueError(f"agent id {agent_id} out of range")
    return observe_all(state, config)[agent_id]


def trajectory_record(state: EnvState, reward: float) -> dict:
    """One JSONL-able record of the post-step state, for trajectory dumps."""
    return {
        "t": state.t,
        "agent_pos": state.agent_pos.round(4).tolist(),
        "invader_pos": state.invader_pos.round(4).tolist(),
        "invader_status": ["active" if a else "neutralized" for a in state.invader_active],
        "reward": reward,
    }
