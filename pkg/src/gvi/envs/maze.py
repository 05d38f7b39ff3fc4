"""Random grid mazes compiled into exact tabular MDPs.

Layout: free cells become states, one extra absorbing state terminates the
episode. Landing on the goal pays ``goal_reward``; from the goal every action
moves to the absorbing state. The episode cap only applies to sampled
rollouts (:func:`sample_rollout`); the MDP itself is infinite-horizon.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from gvi.exceptions import InvalidMdp, UnreachableGoal
from gvi.mdp import Policy, TabularMdp

# (row, col) offsets for up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
ACTION_NAMES = ("up", "right", "down", "left")


@dataclass(frozen=True)
class MazeSpec:
    width: int = 5
    height: int = 5
    start_cell: tuple[int, int] = (0, 0)
    goal_cell: tuple[int, int] | None = None  # defaults to the opposite corner
    success_prob: float = 0.9
    slip_prob: float = 0.1
    goal_reward: float = 1.0
    horizon: int = 25
    gamma: float = 0.99
    wall_density: float = 0.2
    wall_mask: tuple[tuple[bool, ...], ...] | None = None  # fixed layout, skips generation
    rng_seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        if self.goal_cell is None:
            object.__setattr__(self, "goal_cell", (self.height - 1, self.width - 1))
        object.__setattr__(self, "start_cell", tuple(self.start_cell))
        object.__setattr__(self, "goal_cell", tuple(self.goal_cell))
        if self.wall_mask is not None:
            object.__setattr__(self, "wall_mask", tuple(tuple(bool(c) for c in row) for row in self.wall_mask))
        if self.width < 1 or self.height < 1:
            raise InvalidMdp("maze must be at least 1x1")
        if abs(self.success_prob + self.slip_prob - 1.0) > 1e-12:
            raise InvalidMdp("success_prob + slip_prob must equal 1")
        for name in ("start_cell", "goal_cell"):
            r, c = getattr(self, name)
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise InvalidMdp(f"{name} {(r, c)} outside the grid")
        if self.start_cell == self.goal_cell:
            raise InvalidMdp("start and goal must differ")
        if not 0.0 <= self.wall_density < 1.0:
            raise InvalidMdp("wall_density must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MazeSpec":
        d = dict(d)
        for key in ("start_cell", "goal_cell"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("wall_mask") is not None:
            d["wall_mask"] = tuple(tuple(row) for row in d["wall_mask"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Maze:
    spec: MazeSpec
    walls: np.ndarray  # (height, width) bool
    mdp: TabularMdp
    cells: tuple[tuple[int, int], ...]  # state index -> cell; absorbing state is last
    state_of: dict = field(repr=False)

    @property
    def absorbing_state(self) -> int:
        return self.mdp.num_states - 1

    @property
    def start_state(self) -> int:
        return self.state_of[self.spec.start_cell]

    @property
    def goal_state(self) -> int:
        return self.state_of[self.spec.goal_cell]

    def render(self) -> str:
        """ASCII layout: '#' wall, 'S' start, 'G' goal, '.' free."""
        rows = []
        for r in range(self.spec.height):
            line = []
            for c in range(self.spec.width):
                if (r, c) == self.spec.start_cell:
                    line.append("S")
                elif (r, c) == self.spec.goal_cell:
                    line.append("G")
                else:
                    line.append("#" if self.walls[r, c] else ".")
            rows.append("".join(line))
        return "\n".join(rows)

    def layout_dict(self) -> dict:
        return {
            "width": self.spec.width,
            "height": self.spec.height,
            "start": list(self.spec.start_cell),
            "goal": list(self.spec.goal_cell),
            "rows": self.render().splitlines(),
        }

    def layout_json(self) -> str:
        return json.dumps({"spec": self.spec.to_dict(), "layout": self.layout_dict()}, indent=2)


def _connected(walls: np.ndarray, start, goal) -> bool:
    h, w = walls.shape
    seen = {start}
    frontier = deque([start])
    while frontier:
        r, c = frontier.popleft()
        if (r, c) == goal:
            return True
        for dr, dc in MOVES:
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < h and 0 <= nxt[1] < w and not walls[nxt] and nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return False


def _sample_walls(spec: MazeSpec) -> np.ndarray:
    if spec.wall_mask is not None:
        walls = np.array(spec.wall_mask, dtype=bool)
        if walls.shape != (spec.height, spec.width):
            raise InvalidMdp(f"wall_mask shape {walls.shape} does not match {(spec.height, spec.width)}")
        if walls[spec.start_cell] or walls[spec.goal_cell]:
            raise InvalidMdp("start/goal cannot be walls")
        if not _connected(walls, spec.start_cell, spec.goal_cell):
            raise UnreachableGoal("goal unreachable in the given wall_mask")
        return walls
    rng = np.random.default_rng(spec.rng_seed)
    for _ in range(spec.max_retries):
        walls = rng.random((spec.height, spec.width)) < spec.wall_density
        walls[spec.start_cell] = False
        walls[spec.goal_cell] = False
        if _connected(walls, spec.start_cell, spec.goal_cell):
            return walls
    raise UnreachableGoal(f"no connected layout after {spec.max_retries} draws")


def build_maze(spec: MazeSpec) -> Maze:
    walls = _sample_walls(spec)
    h, w = walls.shape
    cells = tuple((r, c) for r in range(h) for c in range(w) if not walls[r, c])
    state_of = {cell: i for i, cell in enumerate(cells)}
    S = len(cells) + 1
    absorbing = S - 1
    goal = state_of[spec.goal_cell]
    A = len(MOVES)

    P = np.zeros((S, A, S))
    for s, (r, c) in enumerate(cells):
        if s == goal:
            P[s, :, absorbing] = 1.0
            continue
        landing = []
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            blocked = not (0 <= nr < h and 0 <= nc < w) or walls[nr, nc]
            landing.append(s if blocked else state_of[(nr, nc)])
        for a in range(A):
            P[s, a, landing[a]] += spec.success_prob
            for b in range(A):
                if b != a:
                    P[s, a, landing[b]] += spec.slip_prob / (A - 1)
    P[absorbing, :, absorbing] = 1.0

    # expected reward of landing on the goal
    R = spec.goal_reward * P[:, :, goal]
    R[goal] = 0.0
    R[absorbing] = 0.0

    d0 = np.zeros(S)
    d0[state_of[spec.start_cell]] = 1.0
    mdp = TabularMdp(P, R, spec.gamma, d0)
    return Maze(spec=spec, walls=walls, mdp=mdp, cells=cells, state_of=state_of)


def generate_maze(spec: MazeSpec) -> TabularMdp:
    return build_maze(spec).mdp


def sample_rollout(maze: Maze, policy: Policy, rng: np.random.Generator,
                   horizon: int | None = None) -> float:
    """Discounted return of one sampled episode capped at ``horizon`` steps."""
    horizon = maze.spec.horizon if horizon is None else horizon
    mdp = maze.mdp
    s = maze.start_state
    ret, disc = 0.0, 1.0
    for _ in range(horizon):
        if s == maze.absorbing_state:
            break
        a = rng.choice(mdp.num_actions, p=policy.probs[s])
        s_next = rng.choice(mdp.num_states, p=mdp.transition[s, a])
        if s_next == maze.goal_state and s != maze.goal_state:
            ret += disc * maze.spec.goal_reward
        disc *= mdp.gamma
        s = s_next
    return ret
