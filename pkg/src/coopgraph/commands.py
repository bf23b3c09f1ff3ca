"""Knowledge-coded cluster commands and their per-agent translation.

A cooperative command is executed by a whole cluster: each member agent gets
its own desired direction from a small hand-written controller, which is then
snapped to the nearest primitive move direction. The same command therefore
usually produces different primitive actions for different members.

Controllers never fail: a command aimed at a dead or out-of-range entity
degrades to a zero direction (hold), which the tie rule turns into a dither
around action id 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .env import EnvConfig, EnvState

# Defend holds a ring just outside the tracking radius so defenders meet
# incoming invaders before base contact.
R_DEFEND = 6.0

# Width of the structured part of a command representation:
# kind one-hot (4) + anchor position (3) + alive flag (1).
COMMAND_REPR_WIDTH = 8


class CommandKind(Enum):
    INTERCEPT = "intercept"
    DEFEND = "defend"
    GATHER = "gather"
    SCATTER = "scatter"


_KIND_INDEX = {k: i for i, k in enumerate(CommandKind)}


@dataclass(frozen=True)
class CoopCommand:
    """A cluster-level command; ``entity`` indexes an invader or base."""

    kind: CommandKind
    entity: int | None = None

    def __post_init__(self):
        needs_entity = self.kind in (CommandKind.INTERCEPT, CommandKind.DEFEND)
        if needs_entity and self.entity is None:
            raise ValueError(f"{self.kind.value} requires an entity index")
        if not needs_entity and self.entity is not None:
            raise ValueError(f"{self.kind.value} takes no entity index")

    def label(self) -> str:
        return self.kind.value if self.entity is None else f"{self.kind.value}({self.entity})"


def _lead_point(agent_pos: np.ndarray, j: int, state: EnvState, config: EnvConfig | None) -> np.ndarray:
    """Predicted interception point for invader j.

    Without config (speeds unknown) this degrades to the invader's current
    position. The prediction assumes nominal invader speed along its attack
    line and is capped at the target base, so late pursuers cut toward the
    base instead of convoying behind the target.
    """
    p = state.invader_pos[j]
    if config is None:
        return p
    to_base = state.base_pos[state.invader_target[j]] - p
    dist = np.linalg.norm(to_base)
    if dist < 1e-9:
        return p
    v = (to_base / dist) * config.v_inv
    d = p - agent_pos
    a = config.v_inv**2 - config.v_def**2
    b = 2.0 * float(d @ v)
    c = float(d @ d)
    disc = b * b - 4.0 * a * c
    if a >= 0 or disc < 0:
        return p
    tau = (b + math.sqrt(disc)) / (-2.0 * a)
    tau = min(max(tau, 0.0), dist / config.v_inv)
    return p + v * tau


def desired_direction(
    command: CoopCommand,
    agent_pos: np.ndarray,
    members: np.ndarray,
    state: EnvState,
    config: EnvConfig | None = None,
) -> np.ndarray:
    """Raw (unnormalized) steering vector for one member of a cluster.

    Gather pulls toward the member centroid, Scatter pushes away from the
    nearest other member, Intercept leads an invader's predicted path,
    Defend closes on a base until inside the R_DEFEND ring.
    """
    agent_pos = np.asarray(agent_pos, dtype=np.float64)
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 2 or len(members) == 0:
        raise ValueError("members must be a nonempty (n, 3) array")

    if command.kind is CommandKind.GATHER:
        return members.mean(axis=0) - agent_pos

    if command.kind is CommandKind.SCATTER:
        if len(members) == 1:
            return np.zeros(3)
        d = np.linalg.norm(members - agent_pos, axis=1)
        d[d < 1e-9] = np.inf  # skip self (and co-located copies)
        if not np.isfinite(d).any():
            return np.zeros(3)
        return agent_pos - members[int(np.argmin(d))]

    if command.kind is CommandKind.INTERCEPT:
        j = command.entity
        if j is None or not 0 <= j < len(state.invader_pos) or not state.invader_active[j]:
            return np.zeros(3)
        return _lead_point(agent_pos, j, state, config) - agent_pos

    b = command.entity
    if b is None or not 0 <= b < len(state.base_pos) or not state.base_alive[b]:
        return np.zeros(3)
    to_base = state.base_pos[b] - agent_pos
    if np.linalg.norm(to_base) <= R_DEFEND:
        return np.zeros(3)
    return to_base


def discretize(direction: np.ndarray, move_dirs: np.ndarray) -> int:
    """Snap a direction onto the best-aligned unit move; ties pick the lowest id."""
    dots = move_dirs @ np.asarray(direction, dtype=np.float64)
    return int(np.argmax(dots))


def translate(
    command: CoopCommand,
    member_ids: np.ndarray,
    state: EnvState,
    config: EnvConfig,
) -> np.ndarray:
    """Primitive action id for each member agent, in member_ids order."""
    member_ids = np.asarray(member_ids, dtype=np.int64)
    if member_ids.size == 0:
        raise ValueError("translate requires a nonempty member set")
    members = state.agent_pos[member_ids]
    dirs = config.move_dirs
    out = np.empty(member_ids.size, dtype=np.int64)
    for i, pos in enumerate(members):
        out[i] = discretize(desired_direction(command, pos, members, state, config), dirs)
    return out


def command_raw_repr(
    command: CoopCommand, state: EnvState, config: EnvConfig, width: int
) -> np.ndarray:
    """Structured node representation: kind one-hot, anchor position, alive flag.

    Padded with zeros to ``width`` so cooperative and primitive target rows
    stack into one rectangular matrix.
    """
    if width < COMMAND_REPR_WIDTH:
        raise ValueError(f"repr width {width} < {COMMAND_REPR_WIDTH}")
    rep = np.zeros(width, dtype=np.float64)
    rep[_KIND_INDEX[command.kind]] = 1.0
    if command.kind is CommandKind.INTERCEPT:
        j = command.entity
        if 0 <= j < len(state.invader_pos):
            rep[4:7] = state.invader_pos[j] / config.world_extent
            rep[7] = 1.0 if state.invader_active[j] else 0.0
    elif command.kind is CommandKind.DEFEND:
        b = command.entity
        if 0 <= b < len(state.base_pos):
            rep[4:7] = state.base_pos[b] / config.world_extent
            rep[7] = 1.0 if state.base_alive[b] else 0.0
    else:
        rep[7] = 1.0
    return rep
