"""FrozenLake grid worlds compiled to exact tabular MDPs, plus trajectory samplers.

Map text uses one row per line with ``S`` (start), ``F`` (frozen), ``H``
(hole) and ``G`` (goal). Actions follow the usual Gym ordering: 0 left,
1 down, 2 right, 3 up. Holes and goals are absorbing with zero reward;
entering a goal pays 1, so ``R(x, u)`` is the probability that (x, u) lands
on a goal.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

from . import rng as rngmod
from .mdp import TabularMdp, greedy_policy, policy_state_kernel

LEFT, DOWN, RIGHT, UP = range(4)
MOVES = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}
DEFAULT_SLIP = 2.0 / 3.0

MAPS = {
    4: ("SFFF", "FHFH", "FFFH", "HFFG"),
    8: (
        "SFFFFFFF",
        "FFFFFFFF",
        "FFFHFFFF",
        "FFFFFHFF",
        "FFFHFFFF",
        "FHHFFFHF",
        "FHFFHFHF",
        "FFFHFFFG",
    ),
}


class UnreachableGoalError(ValueError):
    """No walkable path connects the start tile to a goal tile."""


class Transition(NamedTuple):
    x: int
    u: int
    r: float
    y: int


@dataclass(frozen=True)
class GridSpec:
    size: int
    tiles: tuple[str, ...]
    slip: float = DEFAULT_SLIP
    seed: int | None = None

    def __post_init__(self):
        tiles = tuple(self.tiles)
        object.__setattr__(self, "tiles", tiles)
        if len(tiles) != self.size or any(len(row) != self.size for row in tiles):
            raise ValueError(f"map must be {self.size}x{self.size}")
        flat = "".join(tiles)
        if set(flat) - set("SFHG"):
            raise ValueError(f"unknown tile characters: {sorted(set(flat) - set('SFHG'))}")
        if flat.count("S") != 1:
            raise ValueError("map needs exactly one S tile")
        if "G" not in flat:
            raise ValueError("map needs at least one G tile")
        if not 0.0 <= self.slip <= 1.0:
            raise ValueError("slip must lie in [0, 1]")
        if not goal_reachable(tiles):
            raise UnreachableGoalError("no path from S to G avoiding holes")

    @property
    def start(self) -> int:
        return "".join(self.tiles).index("S")

    def to_text(self) -> str:
        return "\n".join(self.tiles) + "\n"

    @classmethod
    def from_text(cls, text: str, slip: float = DEFAULT_SLIP) -> "GridSpec":
        rows = tuple(line.strip() for line in text.splitlines() if line.strip())
        return cls(size=len(rows), tiles=rows, slip=slip)

    @classmethod
    def standard(cls, size: int, slip: float = DEFAULT_SLIP) -> "GridSpec":
        return cls(size=size, tiles=MAPS[size], slip=slip)


def goal_reachable(tiles: tuple[str, ...]) -> bool:
    """Breadth-first search from S over non-hole tiles."""
    n = len(tiles)
    flat = "".join(tiles)
    s = flat.index("S")
    seen = {s}
    queue = deque([s])
    while queue:
        cell = queue.popleft()
        if flat[cell] == "G":
            return True
        r, c = divmod(cell, n)
        for dr, dc in MOVES.values():
            rr, cc = r + dr, c + dc
            if 0 <= rr < n and 0 <= cc < n:
                nxt = rr * n + cc
                if nxt not in seen and flat[nxt] != "H":
                    seen.add(nxt)
                    queue.append(nxt)
    return False


def generate_grid(
    size: int,
    seed: int,
    density: float = 0.1,
    slip: float = DEFAULT_SLIP,
    max_tries: int = 10_000,
) -> GridSpec:
    """Random map with S top-left, G bottom-right and i.i.d. holes.

    Maps are redrawn until the goal is reachable, so the result is a pure
    function of ``(size, seed, density)``.
    """
    if size < 2:
        raise ValueError("procedural maps need size >= 2")
    if not 0.0 <= density < 1.0:
        raise ValueError("density must lie in [0, 1)")
    gen = rngmod.stream(seed, rngmod.INIT, size)
    for _ in range(max_tries):
        holes = gen.random((size, size)) < density
        grid = np.where(holes, "H", "F")
        grid[0, 0] = "S"
        grid[-1, -1] = "G"
        tiles = tuple("".join(row) for row in grid)
        if goal_reachable(tiles):
            return GridSpec(size=size, tiles=tiles, slip=slip, seed=seed)
    raise UnreachableGoalError(f"no feasible {size}x{size} map after {max_tries} draws (density {density})")


def build_frozenlake(spec: GridSpec, gamma: float = 0.95) -> TabularMdp:
    """Compile a grid into an exact MDP with the slip dynamics described above."""
    n = spec.size
    flat = "".join(spec.tiles)
    S, A = n * n, 4
    rows, cols, vals = [], [], []
    reward = np.zeros((S, A))
    terminal = np.array([ch in "HG" for ch in flat])
    for s in range(S):
        for a in range(A):
            row = s * A + a
            if terminal[s]:
                rows.append(row)
                cols.append(s)
                vals.append(1.0)
                continue
            r, c = divmod(s, n)
            for d, p in ((a, 1.0 - spec.slip), ((a - 1) % 4, spec.slip / 2), ((a + 1) % 4, spec.slip / 2)):
                if p == 0.0:
                    continue
                dr, dc = MOVES[d]
                rr, cc = min(max(r + dr, 0), n - 1), min(max(c + dc, 0), n - 1)
                y = rr * n + cc
                rows.append(row)
                cols.append(y)
                vals.append(p)
                if flat[y] == "G":
                    reward[s, a] += p
    # duplicate (row, col) pairs are summed by the COO -> CSR conversion
    kernel = sp.coo_array((vals, (rows, cols)), shape=(S * A, S)).tocsr()
    return TabularMdp(
        n_states=S,
        n_actions=A,
        kernel=kernel,
        reward=np.minimum(reward, 1.0),
        gamma=gamma,
        r_max=1.0,
        start_state=spec.start,
        terminal=terminal,
    )


def uniform_behavior(mdp: TabularMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def epsilon_greedy(q: np.ndarray, epsilon: float) -> np.ndarray:
    """Behavior table mixing the greedy action with uniform exploration."""
    S, A = q.shape
    pi = np.full((S, A), epsilon / A)
    pi[np.arange(S), greedy_policy(q)] += 1.0 - epsilon
    return pi


def _restart_distribution(mdp: TabularMdp, restart: str) -> np.ndarray:
    dist = np.zeros(mdp.n_states)
    if restart == "start":
        dist[mdp.start_state or 0] = 1.0
    elif restart == "uniform":
        live = ~mdp.terminal
        dist[live] = 1.0 / live.sum()
    else:
        raise ValueError(f"unknown restart rule {restart!r}")
    return dist


def behavior_chain(mdp: TabularMdp, behavior: np.ndarray, restart: str = "start") -> sp.csr_array:
    """State chain followed by :func:`markovian_stream`.

    Mass that would enter a terminal state is sent to the restart
    distribution instead, matching the episodic reset of the stream.
    """
    k = policy_state_kernel(mdp, behavior)
    if not mdp.terminal.any():
        return k
    live = k @ sp.diags_array((~mdp.terminal).astype(float))
    # terminal rows are self-loops, so they lose all mass and become restarts
    into = 1.0 - np.asarray(live.sum(axis=1)).ravel()
    dist = _restart_distribution(mdp, restart)
    nz = np.flatnonzero(dist)
    rows = np.repeat(np.arange(mdp.n_states), nz.size)
    cols = np.tile(nz, mdp.n_states)
    vals = np.outer(into, dist[nz]).ravel()
    jump = sp.csr_array((vals, (rows, cols)), shape=k.shape)
    return sp.csr_array(live + jump)


class _RowSampler:
    """Per-row inverse-CDF lookup tables for fast scalar sampling."""

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, data: np.ndarray):
        self._cum = []
        self._idx = []
        for i in range(len(indptr) - 1):
            lo, hi = indptr[i], indptr[i + 1]
            self._cum.append(np.cumsum(data[lo:hi]).tolist())
            self._idx.append(indices[lo:hi].tolist())

    def draw(self, row: int, u: float) -> int:
        cum = self._cum[row]
        j = bisect.bisect_right(cum, u * cum[-1])
        return self._idx[row][min(j, len(cum) - 1)]


def markovian_stream(
    mdp: TabularMdp,
    behavior: np.ndarray,
    seed: int,
    horizon: int | None = None,
    restart: str = "start",
) -> Iterator[Transition]:
    """Single behavior-policy trajectory with episodic restarts.

    Yields ``(x, u, r, y)`` with ``r = R(x, u)``. When ``y`` is terminal the
    next tuple starts from the restart distribution, so the stream never
    ends unless ``horizon`` is given.
    """
    behavior = np.asarray(behavior, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    if np.any(behavior <= 0):
        raise ValueError("behavior policy must give every action positive probability")
    pol = sp.csr_array(behavior)
    act = _RowSampler(pol.indptr, pol.indices, pol.data)
    nxt = _RowSampler(mdp.kernel.indptr, mdp.kernel.indices, mdp.kernel.data)
    reward = mdp.reward.tolist()
    terminal = mdp.terminal.tolist()
    A = mdp.n_actions
    restart_cdf = np.cumsum(_restart_distribution(mdp, restart)).tolist() if mdp.terminal.any() else None
    gen = rngmod.stream(seed, rngmod.STREAM)
    block = 4096

    x = mdp.start_state or 0
    t = 0
    while horizon is None or t < horizon:
        draws = gen.random((block, 3)).tolist()
        for d_u, d_y, d_r in draws:
            if horizon is not None and t >= horizon:
                return
            u = act.draw(x, d_u)
            y = nxt.draw(x * A + u, d_y)
            yield Transition(x, u, reward[x][u], y)
            t += 1
            if terminal[y]:
                x = min(bisect.bisect_right(restart_cdf, d_r), len(restart_cdf) - 1)
            else:
                x = y


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, seed: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0
        self._rng = rngmod.stream(seed, rngmod.REPLAY)

    def __len__(self) -> int:
        return len(self._data)

    def add(self, t: Transition) -> None:
        if len(self._data) < self.capacity:
            self._data.append(t)
        else:
            self._data[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def contents(self) -> list[Transition]:
        return list(self._data)

    def sample(self, n: int = 1) -> list[Transition]:
        if not self._data:
            raise RuntimeError("cannot sample from an empty replay buffer; finish warmup first")
        idx = self._rng.integers(0, len(self._data), size=n)
        return [self._data[i] for i in idx]


def replay_stream(
    buffer: ReplayBuffer,
    feeder: Iterable[Transition],
    batch: int = 1,
    warmup: int | None = None,
    insert_rate: int = 1,
) -> Iterator[Transition]:
    """Experience-replay sampling on top of a trajectory feeder.

    ``warmup`` feeder tuples (default: the buffer capacity) are stored before
    anything is emitted. Afterwards each round appends ``insert_rate`` new
    feeder tuples and then yields ``batch`` tuples drawn uniformly from the
    buffer.
    """
    if batch < 1:
        raise ValueError("batch must be positive")
    if insert_rate < 0:
        raise ValueError("insert_rate must be non-negative")
    feeder = iter(feeder)
    for _ in range(buffer.capacity if warmup is None else warmup):
        buffer.add(next(feeder))
    while True:
        for _ in range(insert_rate):
            buffer.add(next(feeder))
        yield from buffer.sample(batch)


def evaluate_greedy_return(
    mdp: TabularMdp,
    q: np.ndarray,
    seed: int,
    episodes: int = 150,
    max_steps: int | None = None,
) -> float:
    """Mean undiscounted return of the greedy policy over independent episodes.

    Each episode starts at ``mdp.start_state`` and runs until a terminal
    state or ``max_steps`` (default ``4 * n_states``). Episode ``e`` draws
    from its own substream, so results do not depend on batching.
    """
    cap = 4 * mdp.n_states if max_steps is None else max_steps
    pi = greedy_policy(q)
    gens = [rngmod.stream(seed, rngmod.EVAL, e) for e in range(episodes)]
    state = np.full(episodes, mdp.start_state or 0)
    alive = ~mdp.terminal[state]
    total = np.zeros(episodes)
    chunk = 256
    t = 0
    while t < cap and alive.any():
        width = min(chunk, cap - t)
        uni = np.stack([g.random(width) for g in gens])
        for j in range(width):
            a = pi[state]
            total += np.where(alive, mdp.reward[state, a], 0.0)
            nxt = mdp.sample_next(state * mdp.n_actions + a, uni[:, j])
            state = np.where(alive, nxt, state)
            alive &= ~mdp.terminal[state]
            t += 1
            if not alive.any():
                break
    return float(total.mean())
