"""Synthetic offline-RL dataset generators: a point-mass env logged by
expert/annealed/random policies, a grid-maze waypoint controller whose hidden
phase makes the logged data non-Markov, a ridge-regression Markovianity
diagnostic, and the line-delimited trajectory file format.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dt import Trajectory

EXPERT_KP = 4.0
EXPERT_KD = 3.0
EXPERT_NOISE_STD = 0.05

POLICY_LEVELS = ("expert", "medium-replay", "random", "controller")

MIN_DIAGNOSTIC_TRANSITIONS = 1000


@dataclass(frozen=True)
class SyntheticEnvironment:
    name: str
    d_s: int
    d_a: int
    horizon: int
    step: Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple[np.ndarray, float]]
    reset: Callable[[np.random.Generator], np.ndarray]


def rollout(env: SyntheticEnvironment, policy, rng: np.random.Generator,
            initial_state: np.ndarray | None = None) -> Trajectory:
    """Run one episode: policy(state, rng) -> action in [-1,1]^d_a."""
    state = env.reset(rng) if initial_state is None else initial_state
    states, actions, rewards = [], [], []
    for _ in range(env.horizon):
        action = np.clip(np.asarray(policy(state, rng), dtype=np.float64), -1.0, 1.0)
        next_state, reward = env.step(state, action, rng)
        states.append(state)
        actions.append(action)
        rewards.append(reward)
        state = next_state
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), env.name)


def _episode_rngs(seed: int, episodes: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(episodes)]


# ---------------------------------------------------------------- point mass

def pointmass_env(goal=(0.0, 0.0), dt: float = 0.05, friction: float = 0.05,
                  horizon: int = 100) -> SyntheticEnvironment:
    """State (position2, velocity2); p' = p + v*dt, v' = (1-friction)v + a*dt,
    reward = -|p' - goal|. Start: position uniform on [-1,1]^2 at rest.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not 0.0 <= friction < 1.0:
        raise ValueError("friction must be in [0, 1)")
    goal = np.asarray(goal, dtype=np.float64)

    def step(state, action, rng):
        p, v = state[:2], state[2:]
        p_new = p + v * dt
        v_new = (1.0 - friction) * v + action * dt
        reward = -float(np.linalg.norm(p_new - goal))
        return np.concatenate([p_new, v_new]), reward

    def reset(rng):
        rng = np.random.default_rng(rng)
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    return SyntheticEnvironment("pointmass", 4, 2, horizon, step, reset)


def _pd_policy(goal, kp: float, kd: float, noise_std: float):
    goal = np.asarray(goal, dtype=np.float64)

    def policy(state, rng):
        p, v = state[:2], state[2:]
        a = kp * (goal - p) - kd * v
        if noise_std > 0.0:
            a = a + rng.normal(0.0, noise_std, size=2)
        return a

    return policy


def collect_expert(env: SyntheticEnvironment, episodes: int, seed: int,
                   goal=(0.0, 0.0)) -> list[Trajectory]:
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    policy = _pd_policy(goal, EXPERT_KP, EXPERT_KD, EXPERT_NOISE_STD)
    return [rollout(env, policy, rng) for rng in _episode_rngs(seed, episodes)]


def collect_medium_replay(env: SyntheticEnvironment, episodes: int, seed: int,
                          goal=(0.0, 0.0)) -> list[Trajectory]:
    """Full log of an improving agent: PD gains annealed 0 -> expert values,
    exploration noise decaying toward the expert's, every episode kept.
    """
    if episodes < 10:
        raise ValueError("medium-replay needs at least 10 episodes to show a learning curve")
    out = []
    for ep, rng in enumerate(_episode_rngs(seed, episodes)):
        frac = ep / (episodes - 1)
        policy = _pd_policy(
            goal,
            kp=frac * EXPERT_KP,
            kd=frac * EXPERT_KD,
            noise_std=0.5 * (1.0 - frac) + EXPERT_NOISE_STD,
        )
        out.append(rollout(env, policy, rng))
    return out


def collect_random(env: SyntheticEnvironment, episodes: int, seed: int) -> list[Trajectory]:
    if episodes < 1:
        raise ValueError("episodes must be at least 1")

    def policy(state, rng):
        return rng.uniform(-1.0, 1.0, size=env.d_a)

    return [rollout(env, policy, rng) for rng in _episode_rngs(seed, episodes)]


# ---------------------------------------------------------------- grid maze

@dataclass(frozen=True)
class MazeSpec:
    size: int = 6
    maze_seed: int = 7
    horizon: int = 250
    speed: float = 0.25
    goal_radius: float = 0.3
    waypoint_radius: float = 0.2

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("maze size must be at least 2")


@dataclass(frozen=True)
class Maze:
    """Perfect maze on size x size cells; open_walls holds passable cell pairs."""

    size: int
    open_walls: frozenset

    def passable(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        return frozenset((a, b)) in self.open_walls

    def neighbors(self, cell: tuple[int, int]) -> list[tuple[int, int]]:
        x, y = cell
        cands = [(x, y + 1), (x, y - 1), (x + 1, y), (x - 1, y)]
        return [c for c in cands if 0 <= c[0] < self.size and 0 <= c[1] < self.size]


def generate_maze(size: int, seed: int) -> Maze:
    """Depth-first backtracker: spanning tree over the cell grid, so every
    pair of cells is connected by exactly one path.
    """
    rng = np.random.default_rng(seed)
    open_walls = set()
    start = (0, 0)
    visited = {start}
    stack = [start]
    while stack:
        cur = stack[-1]
        x, y = cur
        cands = [
            c
            for c in [(x, y + 1), (x, y - 1), (x + 1, y), (x - 1, y)]
            if 0 <= c[0] < size and 0 <= c[1] < size and c not in visited
        ]
        if not cands:
            stack.pop()
            continue
        nxt = cands[int(rng.integers(len(cands)))]
        open_walls.add(frozenset((cur, nxt)))
        visited.add(nxt)
        stack.append(nxt)
    return Maze(size, frozenset(open_walls))


def plan_path(maze: Maze, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]]:
    """BFS shortest cell path start -> goal inclusive; neighbor order fixed."""
    if start == goal:
        return [start]
    parent = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for nxt in maze.neighbors(cur):
            if nxt not in parent and maze.passable(cur, nxt):
                parent[nxt] = cur
                if nxt == goal:
                    path = [goal]
                    while parent[path[-1]] is not None:
                        path.append(parent[path[-1]])
                    return path[::-1]
                queue.append(nxt)
    raise ValueError(f"no path from {start} to {goal}")


_WALL_MARGIN = 0.01


def _move_axis(maze: Maze, pos: np.ndarray, axis: int, delta: float) -> float:
    """Advance one coordinate, stopping at cell walls and the outer border.
    Assumes |delta| < 1 so at most one boundary is crossed.
    """
    old = pos[axis]
    new = old + delta
    lo, hi = _WALL_MARGIN, maze.size - _WALL_MARGIN
    new = min(max(new, lo), hi)
    cell_old = (int(pos[0]), int(pos[1]))
    moved = pos.copy()
    moved[axis] = new
    cell_new = (int(moved[0]), int(moved[1]))
    if cell_new == cell_old:
        return new
    if maze.passable(cell_old, cell_new):
        return new
    boundary = max(cell_old[axis], cell_new[axis])
    return boundary - _WALL_MARGIN if delta > 0 else boundary + _WALL_MARGIN


def maze_env(spec: MazeSpec) -> tuple[SyntheticEnvironment, Maze]:
    """Observation (position2, goal2); actions are velocity commands scaled by
    spec.speed, blocked per-axis by walls; reward = -|p' - goal|.
    """
    maze = generate_maze(spec.size, spec.maze_seed)

    def step(state, action, rng):
        pos = state[:2].copy()
        goal = state[2:]
        pos[0] = _move_axis(maze, pos, 0, float(action[0]) * spec.speed)
        pos[1] = _move_axis(maze, pos, 1, float(action[1]) * spec.speed)
        reward = -float(np.linalg.norm(pos - goal))
        return np.concatenate([pos, goal]), reward

    def reset(rng):
        rng = np.random.default_rng(rng)
        for _ in range(100):
            cells = rng.integers(0, spec.size, size=(2, 2))
            start, goal = tuple(map(int, cells[0])), tuple(map(int, cells[1]))
            if start == goal:
                continue
            try:
                plan_path(maze, start, goal)
            except ValueError:
                continue
            return np.array([start[0] + 0.5, start[1] + 0.5, goal[0] + 0.5, goal[1] + 0.5])
        raise ValueError("could not sample a connected start/goal pair")

    return SyntheticEnvironment("maze", 4, 2, spec.horizon, step, reset), maze


class _WaypointController:
    """Steers toward BFS waypoints, normally pursuing one waypoint ahead of
    the current target (cutting corners and sliding along walls); when wall
    contact stalls progress it falls back to the reachable waypoint until it
    advances. The waypoint index, stall counter, and previous position are
    internal state that never appears in the observation, which is what makes
    the logged data non-Markov.
    """

    STALL_LIMIT = 3

    def __init__(self, waypoints: list[np.ndarray], radius: float, kp: float = 2.0,
                 speed: float = 0.25):
        self.waypoints = waypoints
        self.radius = radius
        self.kp = kp
        self.speed = speed
        self.index = 0
        self.prev_pos: np.ndarray | None = None
        self.stalled = 0
        self.recovering = False

    def __call__(self, state, rng):
        pos = state[:2]
        if self.prev_pos is not None and np.linalg.norm(pos - self.prev_pos) < 0.1 * self.speed:
            self.stalled += 1
        self.prev_pos = pos.copy()
        advanced = False
        while (
            self.index < len(self.waypoints) - 1
            and np.linalg.norm(pos - self.waypoints[self.index]) < self.radius
        ):
            self.index += 1
            advanced = True
        if advanced:
            self.stalled = 0
            self.recovering = False
        if self.stalled >= self.STALL_LIMIT:
            self.recovering = True
        last = len(self.waypoints) - 1
        look = 0 if self.recovering else 1
        target = self.waypoints[min(self.index + look, last)]
        return self.kp * (target - pos)


def maze_controller_env_and_collect(spec: MazeSpec, episodes: int, seed: int) -> list[Trajectory]:
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    env, maze = maze_env(spec)
    out = []
    for rng in _episode_rngs(seed, episodes):
        state = env.reset(rng)
        start_cell = (int(state[0]), int(state[1]))
        goal_cell = (int(state[2]), int(state[3]))
        cells = plan_path(maze, start_cell, goal_cell)
        waypoints = [np.array([cx + 0.5, cy + 0.5]) for cx, cy in cells]
        controller = _WaypointController(waypoints, spec.waypoint_radius, speed=spec.speed)
        out.append(rollout(env, controller, rng, initial_state=state))
    return out


# ---------------------------------------------------------------- diagnostics

def _ridge_fit_error(X: np.ndarray, Y: np.ndarray, alpha: float = 1e-6) -> float:
    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma < 1e-12] = 1.0
    Xc = (X - mu_x) / sigma
    Yc = Y - mu_y
    d = Xc.shape[1]
    w = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(d), Xc.T @ Yc)
    resid = Yc - Xc @ w
    return float((resid**2).mean())


def markov_diagnostic(dataset: Sequence[Trajectory]) -> float:
    """Relative in-sample error reduction from adding one step of history to a
    ridge regression of s_{t+1} on (s_t, a_t): ~0 for Markov data, larger when
    the logging process carries hidden state. Episode order cannot matter: the
    design rows are sorted canonically before fitting.
    """
    rows_plain, rows_hist, targets = [], [], []
    for traj in dataset:
        s, a = traj.states, traj.actions
        for t in range(1, traj.length - 1):
            rows_plain.append(np.concatenate([s[t], a[t]]))
            rows_hist.append(np.concatenate([s[t - 1], a[t - 1], s[t], a[t]]))
            targets.append(s[t + 1])
    if len(targets) < MIN_DIAGNOSTIC_TRANSITIONS:
        raise ValueError(
            f"markov_diagnostic needs at least {MIN_DIAGNOSTIC_TRANSITIONS} transitions, got {len(targets)}"
        )
    X1 = np.array(rows_plain)
    X2 = np.array(rows_hist)
    Y = np.array(targets)
    order = np.lexsort(np.concatenate([X2, Y], axis=1).T)
    X1, X2, Y = X1[order], X2[order], Y[order]

    err1 = _ridge_fit_error(X1, Y)
    base = float(((Y - Y.mean(axis=0)) ** 2).mean())
    if err1 <= 1e-10 * max(base, 1e-300):
        return 0.0  # history cannot improve an already-exact fit
    err2 = _ridge_fit_error(X2, Y)
    return float(np.clip((err1 - err2) / err1, 0.0, 1.0))


def mean_return(dataset: Sequence[Trajectory]) -> float:
    return float(np.mean([t.total_return for t in dataset]))


# ---------------------------------------------------------------- file format

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _matrix_json(m: np.ndarray) -> str:
    return "[" + ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in m) + "]"


def save_trajectories(trajectories: Sequence[Trajectory], path) -> None:
    """One JSON episode per line; floats printed with 17 significant digits so
    a load reproduces every value bit-exactly.
    """
    with open(path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(
                '{"env":%s,"states":%s,"actions":%s,"rewards":[%s]}\n'
                % (
                    json.dumps(traj.env_name),
                    _matrix_json(traj.states),
                    _matrix_json(traj.actions),
                    ",".join(_fmt(v) for v in traj.rewards),
                )
            )


def load_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Trajectory(
                        np.array(rec["states"], dtype=np.float64),
                        np.array(rec["actions"], dtype=np.float64),
                        np.array(rec["rewards"], dtype=np.float64),
                        rec["env"],
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trajectory record: {exc}") from exc
    if not out:
        raise ValueError(f"{path}: no trajectories found")
    return out
