"""Procedural grid worlds: generation, dynamics, observation, curriculum, map files.

Coordinates are (i, j) = (row, col) on arrays of shape [dy, dx]; dims are
reported as (dx, dy) = (width, height).  Every map is enclosed by a wall
ring, so the playable interior is rows/cols 1..(size-2).  The agent moves
first each step, then entities in list order; episodes end on reaching the
goal (+1), hitting a wall or entity (-1), being caught (-1), or timing out
(movement reward only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .actions import ACTION_COSTS, ACTION_INDEX, ACTION_NAMES, ACTION_OFFSETS
from .oracle import astar_next_move, hop_distance_map

KINDS = ("static", "enemies_only", "mixed", "avalanche", "adversarial")
ENTITY_KINDS = ("noop", "directional", "adversarial", "wall_block")

WIN = "win"
WALL_DEATH = "wall_death"
CAUGHT = "caught"
TIMEOUT = "timeout"
ONGOING = "ongoing"

GOAL_REWARD = 1.0
DEATH_REWARD = -1.0
MOVE_COST = -0.01

# observation channel layout
OBS_CHANNELS = 5
CH_WALL, CH_GOAL, CH_NOOP, CH_DIRECTIONAL, CH_ADVERSARIAL = range(OBS_CHANNELS)
_ENTITY_CHANNEL = {"noop": CH_NOOP, "directional": CH_DIRECTIONAL, "adversarial": CH_ADVERSARIAL}


class MapGenerationError(RuntimeError):
    """No solvable map found within the resampling budget."""


@dataclass
class Entity:
    pos: tuple
    kind: str
    eps: float = 0.0
    direction: int | None = None  # action index for directional movers


@dataclass
class StepResult:
    reward: float
    terminal: bool
    outcome: str


@dataclass
class GridWorld:
    walls: np.ndarray          # bool [dy, dx], includes the border ring
    goal: tuple
    agent: tuple
    entities: list
    kind: str
    seed: int
    max_steps: int
    step_count: int = 0
    done: bool = False
    outcome: str = ONGOING
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(np.random.PCG64(self.seed))

    @property
    def dims(self):
        """(dx, dy) = (width, height)."""
        return (self.walls.shape[1], self.walls.shape[0])

    def entity_at(self, cell):
        for e in self.entities:
            if e.pos == cell:
                return e
        return None


def interior_cells(h: int, w: int):
    return [(i, j) for i in range(1, h - 1) for j in range(1, w - 1)]


def max_steps_for(walls, agent, goal) -> int:
    """Episode cap: 3x the oracle-optimal hop count, floored at 8."""
    hops = int(hop_distance_map(walls, goal)[agent])
    if hops < 0:
        raise ValueError("max_steps_for: goal unreachable from agent")
    return max(8, 3 * hops)


def adversary_count(dx: int, dy: int) -> int:
    """1 chaser at 8x8, one more per size doubling, capped at 6."""
    size = max(dx, dy)
    extra = max(0, int(math.floor(math.log2(size / 8)))) if size >= 8 else 0
    return min(6, 1 + extra)


def generate(kind: str, dims, rng) -> GridWorld:
    """Sample a solvable world of the given kind and (dx, dy) dims.

    `rng` may be an int seed or a Generator; either way the world carries
    its own seed so it can be regenerated exactly.  The whole map is
    resampled until the goal is reachable from the start over static walls,
    with a hard failure after 1000 attempts.
    """
    if kind not in KINDS:
        raise ValueError(f"generate: unknown kind {kind!r}")
    dx, dy = dims
    if dx < 6 or dy < 6:
        raise ValueError(f"generate: dims {dims} below the 6x6 minimum")
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
    else:
        seed = int(rng.integers(0, 2**63 - 1))

    master = np.random.default_rng(np.random.PCG64(seed))
    for _ in range(1000):
        world = _sample_map(kind, dx, dy, master, seed)
        if world is not None:
            return world
    raise MapGenerationError(f"no solvable {kind} map of dims {dims} in 1000 attempts")


def _sample_map(kind, dx, dy, rng, seed):
    h, w = dy, dx
    walls = np.zeros((h, w), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    interior = interior_cells(h, w)
    area = len(interior)

    def pick_cells(pool, n):
        idx = rng.choice(len(pool), size=n, replace=False)
        return [pool[int(k)] for k in idx]

    entities = []
    if kind == "static":
        n_walls = round(0.30 * area)
        for c in pick_cells(interior, n_walls):
            walls[c] = True
    elif kind == "mixed":
        n = round(0.20 * area)
        placed = pick_cells(interior, n)
        # half the obstacles are inert blocks, folded straight into the wall
        # grid so the wall observation channel stays truthful
        for c in placed[: n // 2]:
            walls[c] = True
        for c in placed[n // 2:]:
            entities.append(Entity(pos=c, kind="noop", eps=0.2))

    free = [c for c in interior if not walls[c] and all(e.pos != c for e in entities)]
    if len(free) < 2:
        return None
    goal, agent = pick_cells(free, 2)

    if kind == "enemies_only":
        n = round(0.20 * area)
        pool = [c for c in free if c not in (goal, agent)]
        if len(pool) < n:
            return None
        for c in pick_cells(pool, n):
            entities.append(Entity(pos=c, kind="noop", eps=0.5))
    elif kind == "avalanche":
        density = rng.uniform(0.20, 0.30)
        n = round(density * area)
        pool = [c for c in free if c not in (goal, agent)]
        if len(pool) < n:
            return None
        for c in pick_cells(pool, n):
            entities.append(Entity(pos=c, kind="directional", eps=1.0,
                                   direction=ACTION_INDEX["S"]))
    elif kind == "adversarial":
        n = adversary_count(dx, dy)
        pool = [c for c in free if c not in (goal, agent)]
        if len(pool) < n:
            return None
        for c in pick_cells(pool, n):
            entities.append(Entity(pos=c, kind="adversarial"))

    if hop_distance_map(walls, goal)[agent] < 0:
        return None
    return GridWorld(
        walls=walls, goal=goal, agent=agent, entities=entities, kind=kind,
        seed=seed, max_steps=max_steps_for(walls, agent, goal),
    )


# ---------------------------------------------------------------------------
# dynamics


def _occupied(world, cell, ignore=None):
    for e in world.entities:
        if e is not ignore and e.pos == cell:
            return True
    return False


def entity_step(entity: Entity, world: GridWorld, rng: np.random.Generator):
    """Resolve one entity's move and return its new position.

    Moves blocked by walls, other entities or the goal are cancelled;
    directional movers that would leave the playable interior respawn at a
    random free top-row cell instead.  Landing on the agent is allowed —
    the caller turns that into a capture.
    """
    h, w = world.walls.shape
    if entity.kind in ("wall_block",):
        return entity.pos
    if entity.kind == "adversarial":
        blocked = {e.pos for e in world.entities if e is not entity} | {world.goal}
        nxt = astar_next_move(world.walls, blocked, entity.pos, world.agent)
        if nxt is not None:
            entity.pos = nxt
        return entity.pos

    if rng.random() >= entity.eps:
        return entity.pos
    if entity.kind == "noop":
        k = int(rng.integers(len(ACTION_OFFSETS)))
    else:
        k = entity.direction
    di, dj = ACTION_OFFSETS[k]
    target = (entity.pos[0] + di, entity.pos[1] + dj)
    inside = 1 <= target[0] < h - 1 and 1 <= target[1] < w - 1

    if entity.kind == "directional" and not inside:
        top = [(1, j) for j in range(1, w - 1)
               if not world.walls[1, j] and (1, j) != world.goal
               and (1, j) != world.agent and not _occupied(world, (1, j), ignore=entity)]
        if top:
            entity.pos = top[int(rng.integers(len(top)))]
        return entity.pos

    if (not inside or world.walls[target] or target == world.goal
            or _occupied(world, target, ignore=entity)):
        return entity.pos
    entity.pos = target
    return entity.pos


def step(world: GridWorld, action: int):
    """Advance one time step: agent move, then entities, then the step cap.

    Returns (world, StepResult, observation-or-None).  Stepping a finished
    world is a hard error.
    """
    if world.done:
        raise RuntimeError("step: world already terminal")
    if not 0 <= action < len(ACTION_OFFSETS):
        raise ValueError(f"step: bad action {action}")
    h, w = world.walls.shape
    di, dj = ACTION_OFFSETS[action]
    target = (world.agent[0] + di, world.agent[1] + dj)

    reward = None
    outcome = ONGOING
    if not (0 <= target[0] < h and 0 <= target[1] < w) or world.walls[target]:
        reward, outcome = DEATH_REWARD, WALL_DEATH
    elif target == world.goal:
        world.agent = target
        reward, outcome = GOAL_REWARD, WIN
    elif world.entity_at(target) is not None:
        world.agent = target
        reward, outcome = DEATH_REWARD, CAUGHT
    else:
        world.agent = target
        reward = MOVE_COST * ACTION_COSTS[action]

    if outcome == ONGOING:
        for e in world.entities:
            entity_step(e, world, world.rng)
            if e.pos == world.agent:
                reward, outcome = DEATH_REWARD, CAUGHT
                break

    world.step_count += 1
    if outcome == ONGOING and world.step_count >= world.max_steps:
        outcome = TIMEOUT  # movement reward stands

    terminal = outcome != ONGOING
    world.done = terminal
    world.outcome = outcome
    obs = None if terminal else observe(world)
    return world, StepResult(reward=reward, terminal=terminal, outcome=outcome), obs


def observe(world: GridWorld):
    """One-hot observation channels [5, dy, dx] plus the agent position.

    Channels: wall, goal, noop entity, directional entity, adversarial
    entity.  The agent's own position is carried separately, not drawn.
    """
    h, w = world.walls.shape
    obs = np.zeros((OBS_CHANNELS, h, w), dtype=np.uint8)
    obs[CH_WALL] = world.walls
    obs[CH_GOAL][world.goal] = 1
    for e in world.entities:
        obs[_ENTITY_CHANNEL[e.kind]][e.pos] = 1
    return obs, world.agent


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class CurriculumState:
    """Cap on the oracle-optimal start-goal distance of accepted maps."""

    ceiling: int
    initial: int = 4
    increment: int = 2
    period: int = 2500
    episodes_done: int = 0

    @classmethod
    def for_dims(cls, dx: int, dy: int, **kw):
        return cls(ceiling=int(math.ceil(math.hypot(dx, dy))), **kw)

    @property
    def bound(self) -> int:
        return min(self.ceiling, self.initial + self.increment * (self.episodes_done // self.period))

    def advance(self, episodes: int = 1) -> None:
        self.episodes_done += episodes


def curriculum_filter(world: GridWorld, state: CurriculumState) -> bool:
    """Accept the world iff the optimal start-goal hop count fits the bound."""
    hops = int(hop_distance_map(world.walls, world.goal)[world.agent])
    return 0 < hops <= state.bound


def resample_start_goal(world: GridWorld, bound: int, rng: np.random.Generator,
                        tries: int = 20) -> bool:
    """Redraw agent/goal so the optimal path length is within `bound`.

    Keeps walls and entities; returns False if no qualifying pair was found,
    in which case the caller should regenerate the map.
    """
    h, w = world.walls.shape
    taken = {e.pos for e in world.entities}
    free = [c for c in interior_cells(h, w) if not world.walls[c] and c not in taken]
    if len(free) < 2:
        return False
    for _ in range(tries):
        goal = free[int(rng.integers(len(free)))]
        dist = hop_distance_map(world.walls, goal)
        starts = [c for c in free if c != goal and 0 < dist[c] <= bound]
        if not starts:
            continue
        world.goal = goal
        world.agent = starts[int(rng.integers(len(starts)))]
        world.max_steps = max_steps_for(world.walls, world.agent, world.goal)
        return True
    return False


# ---------------------------------------------------------------------------
# map text format

_CELL_WALL, _CELL_FREE, _CELL_AGENT, _CELL_GOAL = "#", ".", "A", "G"
_ENTITY_CHAR = {"noop": "N", "directional": "D", "adversarial": "E"}
_CHAR_ENTITY = {v: k for k, v in _ENTITY_CHAR.items()}


def format_map(world: GridWorld) -> str:
    """Serialize the static content: header, dy rows of dx chars, entity lines."""
    dx, dy = world.dims
    grid = [[_CELL_WALL if world.walls[i, j] else _CELL_FREE for j in range(dx)]
            for i in range(dy)]
    for e in world.entities:
        grid[e.pos[0]][e.pos[1]] = _ENTITY_CHAR[e.kind]
    gi, gj = world.goal
    ai, aj = world.agent
    grid[gi][gj] = _CELL_GOAL
    grid[ai][aj] = _CELL_AGENT
    lines = [f"vpmap {dx} {dy} {world.kind} {world.seed}"]
    lines += ["".join(row) for row in grid]
    for e in world.entities:
        d = ACTION_NAMES[e.direction] if e.direction is not None else "-"
        lines.append(f"entity i={e.pos[0]} j={e.pos[1]} kind={e.kind} eps={e.eps!r} dir={d}")
    return "\n".join(lines) + "\n"


def save_map(world: GridWorld, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_map(world))


def parse_map(text: str) -> GridWorld:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 5 or head[0] != "vpmap":
        raise ValueError(f"parse_map: bad header {lines[0]!r}")
    dx, dy, kind, seed = int(head[1]), int(head[2]), head[3], int(head[4])
    rows = lines[1:1 + dy]
    if len(rows) != dy or any(len(r) != dx for r in rows):
        raise ValueError(f"parse_map: expected {dy} rows of {dx} chars")

    walls = np.zeros((dy, dx), dtype=bool)
    agent = goal = None
    char_entities = {}
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            if ch == _CELL_WALL:
                walls[i, j] = True
            elif ch == _CELL_AGENT:
                agent = (i, j)
            elif ch == _CELL_GOAL:
                goal = (i, j)
            elif ch in _CHAR_ENTITY:
                char_entities[(i, j)] = _CHAR_ENTITY[ch]
            elif ch != _CELL_FREE:
                raise ValueError(f"parse_map: unknown cell char {ch!r}")
    if agent is None or goal is None:
        raise ValueError("parse_map: map needs exactly one agent and one goal")

    entities = []
    for ln in lines[1 + dy:]:
        fields = dict(part.split("=", 1) for part in ln.split()[1:])
        pos = (int(fields["i"]), int(fields["j"]))
        kind_e = fields["kind"]
        if char_entities.get(pos) != kind_e:
            raise ValueError(f"parse_map: entity line at {pos} disagrees with the grid")
        direction = None if fields["dir"] == "-" else ACTION_INDEX[fields["dir"]]
        entities.append(Entity(pos=pos, kind=kind_e, eps=float(fields["eps"]),
                               direction=direction))
    if len(entities) != len(char_entities):
        raise ValueError("parse_map: entity lines do not cover all entity cells")

    return GridWorld(
        walls=walls, goal=goal, agent=agent, entities=entities, kind=kind,
        seed=seed, max_steps=max_steps_for(walls, agent, goal),
    )


def load_map(path) -> GridWorld:
    with open(path) as fh:
        return parse_map(fh.read())
