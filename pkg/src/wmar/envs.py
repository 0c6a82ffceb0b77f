"""Toy partially observable task suites.

``shared4`` holds four palette variants of one gridworld (same dynamics,
different observation encodings). ``distinct4`` holds four tasks with
different dynamics, observation statistics and reward magnitudes. Inside a
suite every task exposes the same observation width and action count.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .evalkit import PerfCurve
from .replay import Step

MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


class EpisodeOver(RuntimeError):
    pass


class Env:
    """Minimal episodic interface shared by every task."""

    label: str = "env"
    obs_dim: int
    action_count: int
    max_episode_steps: int

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self.t = 0
        self.done = True

    def reset(self, rng: np.random.Generator | None = None) -> Step:
        if rng is not None:
            self.rng = rng
        self.t = 0
        self.done = False
        self._reset()
        return Step(self.observe(), 0, 0.0, True, False)

    def step(self, action: int) -> tuple[Step, bool]:
        """Advance one step; returns the new Step and whether the episode ended."""
        if self.done:
            raise EpisodeOver("step() called after the episode finished; call reset()")
        if not 0 <= action < self.action_count:
            raise ValueError(f"action {action} outside [0, {self.action_count})")
        reward, terminal = self._step(int(action))
        self.t += 1
        self.done = terminal or self.t >= self.max_episode_steps
        return Step(self.observe(), int(action), float(reward), False, terminal), self.done

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def _reset(self) -> None:
        raise NotImplementedError

    def _step(self, action: int) -> tuple[float, bool]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# palettes


@dataclass
class Palette:
    """Per-cell channel remap ``y[:, j] = scale * x[:, perm[j]] + offset[:, j]``."""

    perm: tuple[int, ...]
    scale: float = 1.0
    offset: np.ndarray | float = 0.0
    name: str = "identity"

    @classmethod
    def identity(cls, channels: int) -> "Palette":
        return cls(tuple(range(channels)))

    def inverse(self) -> "Palette":
        perm = np.asarray(self.perm)
        inv = np.argsort(perm)
        off = np.asarray(self.offset, dtype=float)
        if off.ndim == 2:
            off = off[:, inv]
        return Palette(tuple(int(i) for i in inv), 1.0 / self.scale, -off / self.scale, self.name + "^-1")


def apply_palette(obs: np.ndarray, palette: Palette) -> np.ndarray:
    channels = len(palette.perm)
    grid = np.asarray(obs, dtype=np.float64).reshape(-1, channels)
    out = palette.scale * grid[:, list(palette.perm)] + palette.offset
    return out.reshape(-1)


def make_palette(kind: str, channels: int, cells: int, seed: int = 7) -> Palette:
    rng = np.random.default_rng(seed)
    if kind == "identity":
        return Palette.identity(channels)
    if kind == "perm":
        perm = rng.permutation(channels)
        while np.any(perm == np.arange(channels)):
            perm = rng.permutation(channels)
        return Palette(tuple(int(i) for i in perm), name="perm")
    if kind == "noise":
        return Palette(tuple(range(channels)), 1.0, rng.uniform(0.0, 0.5, size=(cells, channels)), name="noise")
    if kind == "invert":
        return Palette(tuple(range(channels)), -1.0, 1.0, name="invert")
    raise ValueError(f"unknown palette kind {kind!r}")


# ---------------------------------------------------------------------------
# gridworld (shared-structure family)


@dataclass
class GridLayout:
    size: int
    walls: frozenset
    goal: tuple[int, int]

    def open_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) not in self.walls]

    def start_cells(self) -> list[tuple[int, int]]:
        return [p for p in self.open_cells() if p != self.goal]


def _connected(size: int, walls: set, src: tuple[int, int]) -> set:
    seen = {src}
    q = deque([src])
    while q:
        r, c = q.popleft()
        for dr, dc in MOVES:
            n = (r + dr, c + dc)
            if 0 <= n[0] < size and 0 <= n[1] < size and n not in walls and n not in seen:
                seen.add(n)
                q.append(n)
    return seen


def make_layout(size: int = 6, n_walls: int = 4, seed: int = 0) -> GridLayout:
    """Random interior walls with the goal in a corner; all open cells connected."""
    rng = np.random.default_rng(seed)
    goal = (0, size - 1)
    walls: set = set()
    candidates = [(r, c) for r in range(1, size - 1) for c in range(1, size - 1)]
    order = rng.permutation(len(candidates))
    for i in order:
        if len(walls) == n_walls:
            break
        cell = candidates[i]
        trial = walls | {cell}
        n_open = size * size - len(trial)
        if len(_connected(size, trial, goal)) == n_open:
            walls = trial
    return GridLayout(size, frozenset(walls), goal)


class GridWorld(Env):
    """Goal navigation seen through a 3×3 egocentric window.

    Cell channels: wall, goal, then one floor channel per grid quadrant (the
    floor colour is the only localisation cue). Cells outside the grid read as
    wall. Reaching the goal gives +1 and ends the episode.
    """

    CHANNELS = 6

    def __init__(self, layout: GridLayout | None = None, palette: Palette | None = None, max_episode_steps: int = 30, label: str = "grid"):
        super().__init__()
        self.layout = layout or make_layout()
        self.palette = palette or Palette.identity(self.CHANNELS)
        self.max_episode_steps = max_episode_steps
        self.label = label
        self.obs_dim = 9 * self.CHANNELS
        self.action_count = 4
        self.pos = self.layout.start_cells()[0]
        self._starts = self.layout.start_cells()
        self._cell_codes = self._encode_cells()

    def _encode_cells(self) -> np.ndarray:
        n = self.layout.size
        pad = np.zeros((n + 2, n + 2, self.CHANNELS))
        pad[:, :, 0] = 1.0
        half = n / 2
        for r in range(n):
            for c in range(n):
                cell = np.zeros(self.CHANNELS)
                if (r, c) in self.layout.walls:
                    cell[0] = 1.0
                elif (r, c) == self.layout.goal:
                    cell[1] = 1.0
                else:
                    cell[2 + 2 * int(r >= half) + int(c >= half)] = 1.0
                pad[r + 1, c + 1] = cell
        return pad

    def base_observation(self, pos: tuple[int, int] | None = None) -> np.ndarray:
        r, c = pos or self.pos
        return self._cell_codes[r : r + 3, c : c + 3].reshape(-1).copy()

    def observe(self) -> np.ndarray:
        return apply_palette(self.base_observation(), self.palette)

    def _reset(self) -> None:
        self.pos = self._starts[int(self.rng.integers(len(self._starts)))]

    def transition(self, pos: tuple[int, int], action: int) -> tuple[tuple[int, int], float, bool]:
        dr, dc = MOVES[action]
        n = (pos[0] + dr, pos[1] + dc)
        size = self.layout.size
        if not (0 <= n[0] < size and 0 <= n[1] < size) or n in self.layout.walls:
            n = pos
        if n == self.layout.goal:
            return n, 1.0, True
        return n, 0.0, False

    def _step(self, action: int) -> tuple[float, bool]:
        self.pos, reward, terminal = self.transition(self.pos, action)
        return reward, terminal


# ---------------------------------------------------------------------------
# distinct-structure family


class ChainWalk(Env):
    """Walk right along a chain; the far end pays ``terminal_reward``.

    Actions: 0 left, 1 right, 2 and 3 stay. Observation: one-hot position.
    """

    def __init__(self, length: int = 6, max_episode_steps: int = 30, terminal_reward: float = 1.0, label: str = "chain"):
        super().__init__()
        self.length = length
        self.max_episode_steps = max_episode_steps
        self.terminal_reward = terminal_reward
        self.label = label
        self.obs_dim = length + 1
        self.action_count = 4
        self.pos = 0

    def observe(self) -> np.ndarray:
        o = np.zeros(self.obs_dim)
        o[self.pos] = 1.0
        return o

    def _reset(self) -> None:
        self.pos = 0

    def _step(self, action: int) -> tuple[float, bool]:
        if action == 0:
            self.pos = max(0, self.pos - 1)
        elif action == 1:
            self.pos = self.pos + 1
        if self.pos >= self.length:
            self.pos = self.length
            return self.terminal_reward, True
        return 0.0, False


class ContextBandit(Env):
    """Contextual bandit: the shown context decides which arm pays.

    ``payouts[context, arm]`` is multiplied by ``magnitude``. Action ``a``
    pulls arm ``a % arms``. The context is redrawn uniformly after every pull.
    """

    def __init__(
        self,
        payouts=((1.0, 0.0), (0.0, 1.0)),
        magnitude: float = 100.0,
        max_episode_steps: int = 10,
        action_count: int = 4,
        label: str = "bandit",
    ):
        super().__init__()
        self.payouts = np.asarray(payouts, dtype=float)
        self.magnitude = magnitude
        self.max_episode_steps = max_episode_steps
        self.label = label
        self.contexts, self.arms = self.payouts.shape
        self.obs_dim = self.contexts
        self.action_count = action_count
        self.context = 0

    def observe(self) -> np.ndarray:
        o = np.zeros(self.obs_dim)
        o[self.context] = 1.0
        return o

    def _reset(self) -> None:
        self.context = int(self.rng.integers(self.contexts))

    def _step(self, action: int) -> tuple[float, bool]:
        reward = self.magnitude * self.payouts[self.context, action % self.arms]
        self.context = int(self.rng.integers(self.contexts))
        return float(reward), False


class KeyDoor(Env):
    """Pick up the key, then reach the door.

    Observation is the agent's row/column one-hots plus a carrying-key flag,
    encoded inverted (``1 - x``). Actions are a permutation of the gridworld
    moves. Key pickup pays +1; the door with the key pays +5 and terminates.
    """

    def __init__(
        self,
        size: int = 5,
        key: tuple[int, int] = (4, 0),
        door: tuple[int, int] = (0, 4),
        action_perm: tuple[int, ...] = (2, 3, 0, 1),
        max_episode_steps: int = 40,
        label: str = "keydoor",
    ):
        super().__init__()
        self.size, self.key, self.door = size, key, door
        self.action_perm = action_perm
        self.max_episode_steps = max_episode_steps
        self.label = label
        self.obs_dim = 2 * size + 1
        self.action_count = 4
        self.pos = (0, 0)
        self.has_key = False

    def observe(self) -> np.ndarray:
        o = np.zeros(self.obs_dim)
        o[self.pos[0]] = 1.0
        o[self.size + self.pos[1]] = 1.0
        o[-1] = float(self.has_key)
        return 1.0 - o

    def _reset(self) -> None:
        cells = [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) not in (self.key, self.door)]
        self.pos = cells[int(self.rng.integers(len(cells)))]
        self.has_key = False

    def _step(self, action: int) -> tuple[float, bool]:
        dr, dc = MOVES[self.action_perm[action]]
        r, c = self.pos[0] + dr, self.pos[1] + dc
        if 0 <= r < self.size and 0 <= c < self.size:
            self.pos = (r, c)
        if self.pos == self.key and not self.has_key:
            self.has_key = True
            return 1.0, False
        if self.pos == self.door and self.has_key:
            return 5.0, True
        return 0.0, False


class Padded(Env):
    """Zero-pads a task's observation to a suite-wide width."""

    def __init__(self, inner: Env, obs_dim: int):
        super().__init__()
        if inner.obs_dim > obs_dim:
            raise ValueError("cannot pad to a smaller width")
        self.inner = inner
        self.obs_dim = obs_dim
        self.action_count = inner.action_count
        self.max_episode_steps = inner.max_episode_steps
        self.label = inner.label

    def reset(self, rng=None) -> Step:
        s = self.inner.reset(rng)
        self.done = False
        return Step(self._pad(s.observation), s.action, s.reward, s.is_first, s.is_terminal)

    def step(self, action: int) -> tuple[Step, bool]:
        s, done = self.inner.step(action)
        self.done = done
        return Step(self._pad(s.observation), s.action, s.reward, s.is_first, s.is_terminal), done

    def observe(self) -> np.ndarray:
        return self._pad(self.inner.observe())

    def _pad(self, o: np.ndarray) -> np.ndarray:
        out = np.zeros(self.obs_dim)
        out[: len(o)] = o
        return out

    def __getattr__(self, name):
        if name == "inner":
            raise AttributeError(name)
        return getattr(self.inner, name)


# ---------------------------------------------------------------------------
# suites


def _shared4() -> list[Env]:
    layout = make_layout()
    cells, ch = 9, GridWorld.CHANNELS
    return [
        GridWorld(layout, make_palette("identity", ch, cells), label="grid"),
        GridWorld(layout, make_palette("perm", ch, cells), label="grid-perm"),
        GridWorld(layout, make_palette("noise", ch, cells), label="grid-noise"),
        GridWorld(layout, make_palette("invert", ch, cells), label="grid-invert"),
    ]


def _distinct4() -> list[Env]:
    return [GridWorld(make_layout(), label="grid"), ChainWalk(), ContextBandit(), KeyDoor()]


SUITES = {
    "shared4": _shared4,
    "distinct4": _distinct4,
    "grid1": lambda: [GridWorld(make_layout(), label="grid")],
    "bandit2": lambda: [ContextBandit(((0.0, 1.0),), magnitude=1.0, max_episode_steps=1, action_count=2, label="bandit2")],
}


def make_suite(name: str, task_order: list[str] | None = None) -> list[Env]:
    """Build a suite with a common observation width.

    ``task_order`` (labels) selects and reorders tasks.
    """
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; known: {sorted(SUITES)}")
    tasks = SUITES[name]()
    if task_order:
        by_label = {t.label: t for t in tasks}
        missing = [l for l in task_order if l not in by_label]
        if missing:
            raise KeyError(f"suite {name!r} has no task(s) {missing}")
        tasks = [by_label[l] for l in task_order]
    width = max(t.obs_dim for t in tasks)
    counts = {t.action_count for t in tasks}
    if len(counts) != 1:
        raise ValueError("tasks in a suite must share an action count")
    return [t if t.obs_dim == width else Padded(t, width) for t in tasks]


def suite_labels(name: str) -> list[str]:
    return [t.label for t in SUITES[name]()]


def random_policy(env: Env, episodes: int, rng: np.random.Generator) -> PerfCurve:
    """Uniform-random actions; returns episodic rewards indexed by cumulative steps."""
    steps, values = [], []
    total = 0
    for _ in range(episodes):
        env.reset(rng)
        ep_reward, done = 0.0, False
        while not done:
            s, done = env.step(int(rng.integers(env.action_count)))
            ep_reward += s.reward
            total += 1
        steps.append(total)
        values.append(ep_reward)
    return PerfCurve(np.array(steps), np.array(values))
