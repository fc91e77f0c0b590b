"""Environment layer: a seeded procedurally generated grid world with sparse and
dense reward modes, reward shaping, level sampling, and an adapter seam for
external game suites."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

ACTION_NAMES = ("noop", "up", "down", "left", "right")
ACTION_DELTAS = {1: (-1, 0), 2: (1, 0), 3: (0, -1), 4: (0, 1)}

GOAL_REWARD = 10.0
PELLET_REWARD = 1.0

_FLOOR = np.array([26, 26, 36], dtype=np.uint8)
_WALL = np.array([116, 116, 128], dtype=np.uint8)
_AGENT = np.array([66, 128, 244], dtype=np.uint8)
_GOAL = np.array([240, 208, 48], dtype=np.uint8)
_PELLET = np.array([72, 216, 120], dtype=np.uint8)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    action_count: int
    observation_shape: tuple
    train_level_count: int
    sparse: bool
    max_steps: int


@dataclass(frozen=True)
class ShapingConfig:
    failure_penalty: float  # <= 0, added once at a non-successful termination
    reward_scale: float     # > 0

    def __post_init__(self):
        if self.failure_penalty > 0:
            raise ValueError("failure_penalty must be <= 0")
        if self.reward_scale <= 0:
            raise ValueError("reward_scale must be > 0")


def shape_reward(reward: float, continue_bit: float, success: bool,
                 cfg: ShapingConfig) -> float:
    """Scale the reward; add the failure penalty only at a non-successful end."""
    shaped = reward * cfg.reward_scale
    if continue_bit == 0 and not success:
        shaped += cfg.failure_penalty
    return shaped


class GridWorld:
    """Seed-generated maze on a 64x64x3 canvas.

    Sparse mode pays a single terminal goal reward; dense mode pays per pellet
    picked up and ends once all pellets are collected. Episodes always end
    within max_steps.
    """

    def __init__(self, sparse: bool = True, max_steps: int = 64, grid: int = 8,
                 pellet_count: int = 6, image_size: int = 64):
        if image_size % grid:
            raise ValueError("image_size must be a multiple of grid")
        self.sparse = sparse
        self.max_steps = max_steps
        self.grid = grid
        self.pellet_count = pellet_count
        self.image_size = image_size
        self.tile = image_size // grid
        self.action_count = len(ACTION_NAMES)
        self.level_seed = None
        self.done = True

    # --- level generation ------------------------------------------------------

    def _generate(self, level_seed: int):
        rng = np.random.default_rng(level_seed)
        g = self.grid
        walls = np.zeros((g, g), dtype=bool)
        walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
        interior = [(r, c) for r in range(1, g - 1) for c in range(1, g - 1)]
        for r, c in interior:
            if rng.random() < 0.22:
                walls[r, c] = True
        free = [cell for cell in interior if not walls[cell]]
        if len(free) < 2 + (0 if self.sparse else self.pellet_count):
            # Dense levels with too few floor cells: clear interior walls.
            walls[1:-1, 1:-1] = False
            free = interior
        order = rng.permutation(len(free))
        agent = free[order[0]]
        goal = free[order[1]]
        # Drop walls until the goal is reachable; deterministic per seed.
        while not self._reachable(walls, agent, goal):
            wall_cells = [cell for cell in interior if walls[cell]]
            walls[wall_cells[rng.integers(len(wall_cells))]] = False
        pellets = set()
        if not self.sparse:
            candidates = [cell for cell in free if cell != agent and not walls[cell]]
            picked = rng.permutation(len(candidates))[: self.pellet_count]
            pellets = {candidates[i] for i in picked}
            for cell in pellets:
                while not self._reachable(walls, agent, cell):
                    wall_cells = [c for c in interior if walls[c]]
                    walls[wall_cells[rng.integers(len(wall_cells))]] = False
        # Mild per-level tinting keeps the level distribution visually diverse.
        floor = np.clip(_FLOOR.astype(int) + rng.integers(0, 22, 3), 0, 255).astype(np.uint8)
        wall_color = np.clip(_WALL.astype(int) + rng.integers(-14, 14, 3), 0, 255).astype(np.uint8)
        return walls, agent, goal, pellets, floor, wall_color

    @staticmethod
    def _reachable(walls: np.ndarray, start, target) -> bool:
        return GridWorld._bfs(walls, start, target) is not None

    @staticmethod
    def _bfs(walls: np.ndarray, start, target):
        """Shortest action path through the maze, or None."""
        queue = deque([start])
        parents = {start: None}
        while queue:
            cell = queue.popleft()
            if cell == target:
                path = []
                while parents[cell] is not None:
                    prev, action = parents[cell]
                    path.append(action)
                    cell = prev
                return path[::-1]
            r, c = cell
            for action, (dr, dc) in ACTION_DELTAS.items():
                nxt = (r + dr, c + dc)
                if not walls[nxt] and nxt not in parents:
                    parents[nxt] = (cell, action)
                    queue.append(nxt)
        return None

    # --- episode interface -------------------------------------------------------

    def reset(self, level_seed: int) -> np.ndarray:
        if not isinstance(level_seed, (int, np.integer)) or level_seed < 0:
            raise ValueError(f"invalid level seed {level_seed!r}")
        self.level_seed = int(level_seed)
        (self.walls, self.agent, self.goal, self.pellets,
         self.floor_color, self.wall_color) = self._generate(self.level_seed)
        self.pellets = set(self.pellets)
        self.steps = 0
        self.done = False
        return self._render()

    def step(self, action: int):
        if self.done:
            raise RuntimeError("step called after episode termination")
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} out of range")
        if action in ACTION_DELTAS:
            dr, dc = ACTION_DELTAS[action]
            nxt = (self.agent[0] + dr, self.agent[1] + dc)
            if not self.walls[nxt]:
                self.agent = nxt
        self.steps += 1

        reward = 0.0
        success = False
        if self.sparse:
            if self.agent == self.goal:
                reward = GOAL_REWARD
                success = True
                self.done = True
        else:
            if self.agent in self.pellets:
                reward = PELLET_REWARD
                self.pellets.discard(self.agent)
            if not self.pellets:
                success = True
                self.done = True
        if self.steps >= self.max_steps:
            self.done = True
        continue_bit = 0.0 if self.done else 1.0
        return self._render(), reward, continue_bit, success

    def _render(self) -> np.ndarray:
        g, t = self.grid, self.tile
        canvas = np.empty((self.image_size, self.image_size, 3), dtype=np.uint8)
        canvas[:] = self.floor_color
        for r in range(g):
            for c in range(g):
                if self.walls[r, c]:
                    canvas[r * t:(r + 1) * t, c * t:(c + 1) * t] = self.wall_color
        if self.sparse:
            gr, gc = self.goal
            canvas[gr * t:(gr + 1) * t, gc * t:(gc + 1) * t] = _GOAL
        else:
            for pr, pc in self.pellets:
                pad = t // 4
                canvas[pr * t + pad:(pr + 1) * t - pad, pc * t + pad:(pc + 1) * t - pad] = _PELLET
        ar, ac = self.agent
        canvas[ar * t:(ar + 1) * t, ac * t:(ac + 1) * t] = _AGENT
        return canvas.astype(np.float32) / 255.0

    # --- resume support ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "level_seed": self.level_seed,
            "agent": list(self.agent) if not self.done else None,
            "pellets": sorted(self.pellets) if not self.sparse else [],
            "steps": self.steps if not self.done else 0,
            "done": self.done,
        }

    def load_state_dict(self, state: dict) -> None:
        if state["done"] or state["level_seed"] is None:
            self.done = True
            self.level_seed = state["level_seed"]
            return
        self.reset(state["level_seed"])
        self.agent = tuple(state["agent"])
        if not self.sparse:
            self.pellets = {tuple(p) for p in state["pellets"]}
        self.steps = state["steps"]
        self.done = False


def solve(env: GridWorld) -> list[int]:
    """Scripted optimal action sequence for the current episode (test oracle)."""
    if env.sparse:
        return list(GridWorld._bfs(env.walls, env.agent, env.goal))
    actions = []
    position = env.agent
    remaining = set(env.pellets)
    while remaining:
        paths = {cell: GridWorld._bfs(env.walls, position, cell) for cell in remaining}
        cell = min(remaining, key=lambda c: len(paths[c]))
        actions.extend(paths[cell])
        position = cell
        remaining.discard(cell)
    return actions


class ScriptedPolicy:
    """Replays the scripted solution of whatever episode the env is in."""

    def __init__(self, env: GridWorld):
        self.env = env
        self.plan = None

    def reset(self):
        self.plan = None

    def act(self, obs, rng) -> int:
        if self.plan is None:
            self.plan = solve(self.env)
        return self.plan.pop(0) if self.plan else 0


class RandomPolicy:
    def __init__(self, action_count: int):
        self.action_count = action_count

    def reset(self):
        pass

    def act(self, obs, rng) -> int:
        import torch

        return int(torch.randint(self.action_count, (), generator=rng))


class LevelSampler:
    """Draws level seeds: the train subset, or the full 63-bit distribution."""

    def __init__(self, train_level_count: int, full_distribution: bool = False):
        self.train_level_count = train_level_count
        self.full_distribution = full_distribution
        self.used: set[int] = set()

    def draw(self, rng) -> int:
        import torch

        if self.full_distribution:
            seed = int(torch.randint(2**62, (), generator=rng))
        else:
            seed = int(torch.randint(self.train_level_count, (), generator=rng))
        self.used.add(seed)
        return seed


class ProcgenAdapter:
    """Wraps an external procedurally generated game behind the reset/step surface.

    Success is inferred as termination with a positive final reward, since the
    underlying games do not expose a uniform success flag.
    """

    def __init__(self, game: str, max_steps: int = 1000):
        import gym  # noqa: F401  (optional dependency, probed at construction)

        self._gym = gym
        self.game = game
        self.max_steps = max_steps
        self.action_count = 15
        self._env = None
        self.done = True

    def reset(self, level_seed: int) -> np.ndarray:
        if self._env is not None:
            self._env.close()
        self._env = self._gym.make(
            f"procgen:procgen-{self.game}-v0",
            start_level=int(level_seed) % (2**31), num_levels=1,
            distribution_mode="easy",
        )
        obs = self._env.reset()
        self.steps = 0
        self.done = False
        return np.asarray(obs, dtype=np.float32) / 255.0

    def step(self, action: int):
        if self.done:
            raise RuntimeError("step called after episode termination")
        obs, reward, done, _ = self._env.step(action)
        self.steps += 1
        if self.steps >= self.max_steps:
            done = True
        self.done = bool(done)
        success = self.done and reward > 0
        return (np.asarray(obs, dtype=np.float32) / 255.0, float(reward),
                0.0 if self.done else 1.0, success)

    def state_dict(self) -> dict:
        # External games cannot be frozen mid-episode; resume restarts episodes.
        return {"level_seed": None, "agent": None, "pellets": [], "steps": 0, "done": True}

    def load_state_dict(self, state: dict) -> None:
        self.done = True


def make_env(name: str, *, max_steps: int = 64, grid: int = 8,
             train_level_count: int = 200, image_size: int = 64):
    """Build an environment and its spec; unknown externals fall back to builtin."""
    if name.startswith("procgen:"):
        game = name.split(":", 1)[1]
        try:
            env = ProcgenAdapter(game, max_steps=1000)
            spec = EnvSpec(name, env.action_count, (64, 64, 3), train_level_count,
                           sparse=game in ("coinrun", "caveflyer"), max_steps=1000)
            return env, spec
        except ImportError:
            warnings.warn(f"{name} is not installed; falling back to the builtin environment")
            name = "builtin-sparse"
    if name not in ("builtin-sparse", "builtin-dense"):
        raise ValueError(f"unknown environment {name!r}")
    sparse = name == "builtin-sparse"
    env = GridWorld(sparse=sparse, max_steps=max_steps, grid=grid, image_size=image_size)
    spec = EnvSpec(name, env.action_count, (image_size, image_size, 3),
                   train_level_count, sparse=sparse, max_steps=max_steps)
    return env, spec
