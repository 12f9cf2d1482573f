"""Q-learning with linear function approximation.

Q(x, u; theta) = phi(x, u) . theta with features normalised so that every
``|phi(x, u)|_2 <= 1``. Learners consume ``(x, u, r, y)`` tuples from any
iterator (Markovian trajectory, replay buffer, ...). The offline oracle
:func:`gbar_and_thetastar` needs the exact MDP and is used for experiments
and bound evaluation only.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from . import rng as rngmod
from .frozenlake import Transition, behavior_chain
from .mdp import ConvergenceError, TabularMdp, bellman_on_samples, stationary_distribution

log = logging.getLogger(__name__)

RANK_TOL = 1e-8
# Skip the SVD rank check above this many feature-matrix entries.
RANK_CHECK_LIMIT = 20_000_000
# Stationary mass below this fraction of the largest is treated as zero.
MU_FLOOR = 1e-14


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense feature table ``phi[x, u, :]`` of width ``dim``."""

    table: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 3:
            raise ValueError("feature table must have shape (n_states, n_actions, dim)")
        norms = np.linalg.norm(table, axis=2)
        peak = norms.max()
        if peak > 1.0:
            table = table / peak
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def norm_bound(self) -> float:
        return float(np.linalg.norm(self.table, axis=2).max())

    def __call__(self, x: int, u: int) -> np.ndarray:
        return self.table[x, u]

    def q_values(self, theta: np.ndarray) -> np.ndarray:
        """Q table ``(S, A)`` induced by ``theta``."""
        return self.table @ theta

    def matrix(self) -> np.ndarray:
        """Stacked ``(S * A, dim)`` feature matrix."""
        return self.table.reshape(-1, self.dim)

    def has_full_rank(self) -> bool:
        return np.linalg.matrix_rank(self.matrix(), tol=RANK_TOL) == self.dim

    def spec(self) -> dict:
        return {"type": self.kind, **self.params}


def _checked(fmap: FeatureMap) -> FeatureMap:
    if fmap.table.size <= RANK_CHECK_LIMIT and not fmap.has_full_rank():
        raise ValueError(f"{fmap.kind} features are not linearly independent")
    return fmap


def onehot_features(n_states: int, n_actions: int) -> FeatureMap:
    """Indicator of each (x, u): the tabular special case."""
    table = np.eye(n_states * n_actions).reshape(n_states, n_actions, -1)
    return FeatureMap(table, "onehot")


def tile_features(grid_size: int, n_actions: int, tile: int = 4, tilings: int = 1) -> FeatureMap:
    """Square tile coding of grid cells, one weight block per action.

    With several tilings each one is offset diagonally by ``tile // tilings``
    cells; active features are scaled by ``1/sqrt(tilings)``.
    """
    if tile < 1 or tilings < 1:
        raise ValueError("tile and tilings must be positive")
    rows, cols = np.divmod(np.arange(grid_size * grid_size), grid_size)
    per_axis = -(-(grid_size + tile) // tile)
    n_tiles = per_axis * per_axis
    state_feats = np.zeros((grid_size * grid_size, tilings * n_tiles))
    for t in range(tilings):
        off = (t * tile) // tilings
        tid = ((rows + off) // tile) * per_axis + (cols + off) // tile
        state_feats[np.arange(rows.size), t * n_tiles + tid] = 1.0
    state_feats = state_feats[:, state_feats.any(axis=0)] / math.sqrt(tilings)
    table = _per_action(state_feats, n_actions)
    return _checked(FeatureMap(table, "tile", {"tile": tile, "tilings": tilings}))


def rbf_features(grid_size: int, n_actions: int, centers: int = 4, width: float | None = None) -> FeatureMap:
    """Gaussian bumps on a ``centers x centers`` lattice over the grid."""
    rows, cols = np.divmod(np.arange(grid_size * grid_size), grid_size)
    pos = np.stack([rows, cols], axis=1) / max(grid_size - 1, 1)
    lattice = np.linspace(0.0, 1.0, centers)
    cy, cx = np.meshgrid(lattice, lattice, indexing="ij")
    ctr = np.stack([cy.ravel(), cx.ravel()], axis=1)
    width = 1.0 / max(centers - 1, 1) if width is None else width
    d2 = ((pos[:, None, :] - ctr[None, :, :]) ** 2).sum(axis=2)
    state_feats = np.exp(-d2 / (2 * width**2))
    state_feats /= np.linalg.norm(state_feats, axis=1, keepdims=True)
    table = _per_action(state_feats, n_actions)
    return _checked(FeatureMap(table, "rbf", {"centers": centers, "width": width}))


def _per_action(state_feats: np.ndarray, n_actions: int) -> np.ndarray:
    S, k = state_feats.shape
    table = np.zeros((S, n_actions, n_actions * k))
    for u in range(n_actions):
        table[:, u, u * k:(u + 1) * k] = state_feats
    return table


def make_features(spec: dict, mdp: TabularMdp) -> FeatureMap:
    """Build a feature map from ``{"type": "onehot" | "tile" | "rbf", ...}``."""
    kind = spec.get("type", "onehot")
    params = {k: v for k, v in spec.items() if k != "type"}
    if kind == "onehot":
        return onehot_features(mdp.n_states, mdp.n_actions)
    size = math.isqrt(mdp.n_states)
    if size * size != mdp.n_states:
        raise ValueError(f"{kind} features need a square grid MDP")
    if kind == "tile":
        return tile_features(size, mdp.n_actions, **params)
    if kind == "rbf":
        return rbf_features(size, mdp.n_actions, **params)
    raise ValueError(f"unknown feature type {kind!r}")


def project(theta: np.ndarray, radius: float | None) -> np.ndarray:
    """Euclidean projection onto the ball of the given radius (no-op for None)."""
    if radius is None:
        return theta
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return theta
    return theta * (radius / norm)


def g_term(fmap: FeatureMap, theta: np.ndarray, t: Transition, gamma: float) -> np.ndarray:
    """TD direction ``(phi(x,u).theta - r - gamma max_u' phi(y,u').theta) phi(x,u)``."""
    phi = fmap.table[t.x, t.u]
    target = t.r + gamma * float(np.max(fmap.table[t.y] @ theta))
    return (phi @ theta - target) * phi


def g_batch(fmap: FeatureMap, theta: np.ndarray, x, u, r, y, gamma: float) -> np.ndarray:
    """Vectorised :func:`g_term`; ``theta`` may be ``(d,)`` or one row per tuple."""
    phi = fmap.table[x, u]
    theta = np.broadcast_to(theta, phi.shape)
    q_xu = np.einsum("nd,nd->n", phi, theta)
    q_next = np.einsum("nad,nd->na", fmap.table[y], theta).max(axis=1)
    return (q_xu - r - gamma * q_next)[:, None] * phi


@dataclass(frozen=True)
class FaSchedule:
    """Learning rates ``a_k`` and momentum ``b_k + c_k = beta * lam**k``.

    ``alpha_mode`` is ``"constant"`` (``a_k = alpha``) or ``"diminishing"``
    (``a_0 = alpha``, ``a_k = alpha / sqrt(k)``). ``split`` decides how the
    momentum budget is divided: ``"nesterov"`` puts all of it in ``b_k``,
    ``"even"`` halves it. ``delta`` is the strong-monotonicity margin, when
    known, used to validate the constant step.
    """

    alpha: float = 0.1
    alpha_mode: str = "constant"
    beta: float = 0.5
    lam: float = 0.9
    split: str = "nesterov"
    output_mode: str = "last"
    delta: float | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.alpha_mode not in ("constant", "diminishing"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must lie in (0, 1)")
        if self.split not in ("nesterov", "even"):
            raise ValueError(f"unknown split rule {self.split!r}")
        if self.output_mode not in ("last", "average"):
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        if self.alpha_mode == "constant":
            if self.delta is None:
                warnings.warn("delta unknown: cannot check alpha < (1 - lambda) / (2 delta)", stacklevel=2)
            elif not self.alpha < (1 - self.lam) / (2 * self.delta):
                raise ValueError(
                    f"alpha = {self.alpha} violates alpha < (1 - lambda)/(2 delta) = "
                    f"{(1 - self.lam) / (2 * self.delta)}"
                )

    def coefficients(self, k: int) -> tuple[float, float, float]:
        if self.alpha_mode == "constant" or k == 0:
            a = self.alpha
        else:
            a = self.alpha / math.sqrt(k)
        budget = self.beta * self.lam**k
        if self.split == "nesterov":
            return a, budget, 0.0
        return a, budget / 2, budget / 2


@dataclass(frozen=True)
class LinearQState:
    theta: np.ndarray
    theta_prev: np.ndarray
    g_prev: np.ndarray
    step: int
    schedule: FaSchedule
    proj_radius: float | None = None

    @classmethod
    def initial(cls, theta0: np.ndarray, schedule: FaSchedule, proj_radius: float | None = None) -> "LinearQState":
        theta0 = project(np.asarray(theta0, dtype=float), proj_radius)
        return cls(theta0, theta0.copy(), np.zeros_like(theta0), 0, schedule, proj_radius)


def momentumq_fa_step(state: LinearQState, g_curr: np.ndarray, k: int) -> LinearQState:
    """``theta + (b+c)(theta - theta_prev) - a(1+b) g_k + a b g_{k-1}``, then project."""
    if k != state.step:
        raise ValueError(f"step index {k} does not match state step {state.step}")
    a, b, c = state.schedule.coefficients(k)
    theta = state.theta
    new = theta + (b + c) * (theta - state.theta_prev) - a * (1 + b) * g_curr + a * b * state.g_prev
    new = project(new, state.proj_radius)
    return replace(state, theta=new, theta_prev=theta, g_prev=g_curr, step=k + 1)


def vanilla_fa_step(fmap: FeatureMap, theta: np.ndarray, t: Transition, alpha_k: float, gamma: float) -> np.ndarray:
    if alpha_k <= 0:
        raise ValueError("alpha_k must be positive")
    return theta - alpha_k * g_term(fmap, theta, t, gamma)


def synchronous_fa_sweep(mdp: TabularMdp, fmap: FeatureMap, theta: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """Vanilla linear update summed over one tuple per (x, u) on the sample grid ``y``."""
    phi = fmap.matrix()
    q = fmap.q_values(theta)
    td = q - bellman_on_samples(mdp, q, y)
    return theta - alpha * (phi.T @ td.ravel())


@dataclass
class GbarOracle:
    """Stationary-distribution quantities for a feature map and behavior policy."""

    mdp: TabularMdp
    fmap: FeatureMap
    weights: np.ndarray  # stationary mass of each (x, u), shape (S, A)
    theta_star: np.ndarray
    residual: float
    delta_margin: float = float("nan")
    delta_samples: int = 0

    def gbar(self, theta: np.ndarray) -> np.ndarray:
        q = self.fmap.q_values(theta)
        td = q - self.mdp.reward - self.mdp.gamma * self.mdp.expect(q.max(axis=1))
        return self.fmap.matrix().T @ (self.weights * td).ravel()

    def margin_ratio(self, thetas: np.ndarray) -> np.ndarray:
        """``(theta - theta*) . gbar(theta) / |theta - theta*|^2`` for each row."""
        out = np.empty(len(thetas))
        for i, th in enumerate(thetas):
            diff = th - self.theta_star
            out[i] = diff @ self.gbar(th) / (diff @ diff)
        return out


def gbar_and_thetastar(
    mdp: TabularMdp,
    fmap: FeatureMap,
    behavior: np.ndarray,
    restart: str = "start",
    radius: float | None = None,
    n_delta: int = 10_000,
    seed: int = 0,
    tol: float = 1e-9,
    max_iters: int = 200,
) -> GbarOracle:
    """Exact mean TD direction, its root and a sampled strong-monotonicity margin.

    ``gbar`` is piecewise linear in theta (linear once the greedy next action
    is fixed), so the root is found by Newton steps on the identifiable
    subspace: solve the linear system for the current greedy selection, and
    halve the step (damping) whenever a selection repeats without progress,
    until ``|gbar(theta*)| <= tol``. The margin
    is the minimum ratio over ``n_delta`` points drawn uniformly from the
    ball of ``radius`` (default ``2 |theta*|``) and may come out negative,
    which signals that the monotonicity assumption fails for this pair.
    """
    mu = stationary_distribution(behavior_chain(mdp, behavior, restart))
    mu[mu < MU_FLOOR * mu.max()] = 0.0  # power-iteration fuzz on transient states
    mu /= mu.sum()
    weights = mu[:, None] * np.asarray(behavior, dtype=float)
    phi = fmap.matrix()
    w = weights.ravel()
    S, A = mdp.n_states, mdp.n_actions
    table = fmap.table

    oracle = GbarOracle(mdp, fmap, weights, np.zeros(fmap.dim), np.inf)

    def selection(theta):
        return np.argmax(fmap.q_values(theta), axis=1)

    def jacobian(greedy):
        next_feat = table[np.arange(S), greedy]  # (S, d) greedy features per next state
        expected = mdp.kernel @ next_feat  # (S*A, d)
        return phi.T @ (w[:, None] * (phi - mdp.gamma * expected))

    # gbar always lies in the range of phi^T W phi; directions outside it
    # (features never visited under mu) are unidentifiable and stay at 0.
    gram = phi.T @ (w[:, None] * phi)
    evals, evecs = np.linalg.eigh(gram)
    basis = evecs[:, evals > 1e-12 * max(evals.max(), 1e-300)]

    theta = np.zeros(fmap.dim)
    g = oracle.gbar(theta)
    res = float(np.linalg.norm(g))
    seen = set()
    for _ in range(max_iters):
        if res <= tol:
            break
        greedy = selection(theta)
        seen.add(greedy.tobytes())
        jac = basis.T @ jacobian(greedy) @ basis
        step = basis @ np.linalg.lstsq(jac, basis.T @ g, rcond=None)[0]
        # Full steps solve the current linear piece exactly (policy iteration
        # for one-hot features); damp only once a selection repeats.
        cand = theta - step
        g_c = oracle.gbar(cand)
        r_c = float(np.linalg.norm(g_c))
        if r_c >= res and selection(cand).tobytes() in seen:
            scale = 0.5
            while scale > 1e-8 and r_c >= res:
                cand = theta - scale * step
                g_c = oracle.gbar(cand)
                r_c = float(np.linalg.norm(g_c))
                scale *= 0.5
            if r_c >= res:
                break
        theta, g, res = cand, g_c, r_c
    if res > tol:
        raise ConvergenceError(
            f"|gbar(theta)| = {res:.3e} after root search; the monotonicity "
            "assumption is likely violated for this MDP / feature pair"
        )
    oracle.theta_star = theta
    oracle.residual = res

    if n_delta:
        gen = rngmod.stream(seed, rngmod.ORACLE)
        r = 2 * float(np.linalg.norm(theta)) if radius is None else radius
        r = r if r > 0 else 1.0
        pts = gen.standard_normal((n_delta, fmap.dim))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= r * gen.random(n_delta)[:, None] ** (1.0 / fmap.dim)
        oracle.delta_margin = float(oracle.margin_ratio(pts).min())
        oracle.delta_samples = n_delta
    return oracle


@dataclass
class FaResult:
    theta_out: np.ndarray
    theta_last: np.ndarray
    metrics: list[dict]


def default_checkpoints(T: int, count: int = 100) -> list[int]:
    return sorted({max(1, round(T * i / count)) for i in range(1, count + 1)})


def run_fa(
    stream: Iterable[Transition],
    fmap: FeatureMap,
    sched: FaSchedule,
    T: int,
    gamma: float,
    theta0: np.ndarray | None = None,
    proj_radius: float | None = None,
    algo: str = "momentumq",
    checkpoints: Iterable[int] | None = None,
    eval_hook: Callable[[int, np.ndarray], dict] | None = None,
) -> FaResult:
    """Run ``T`` linear-FA steps over the tuples of ``stream``.

    ``algo="vanilla"`` applies ``theta - a_k g_k`` with the same step sizes
    and projection. The output is the last iterate or the running mean of
    ``theta_1..theta_T`` per ``sched.output_mode``. At each checkpoint ``k``
    the hook receives the current output and its dict is logged with ``k``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if algo not in ("momentumq", "vanilla"):
        raise ValueError(f"unknown algo {algo!r}")
    theta0 = np.zeros(fmap.dim) if theta0 is None else theta0
    state = LinearQState.initial(theta0, sched, proj_radius)
    marks = set(default_checkpoints(T) if checkpoints is None else checkpoints)
    average = sched.output_mode == "average"
    mean = np.zeros(fmap.dim)
    table = fmap.table
    metrics = []
    it: Iterator[Transition] = iter(stream)
    for k in range(T):
        t = next(it)
        phi = table[t.x, t.u]
        theta = state.theta
        td = phi @ theta - t.r - gamma * (table[t.y] @ theta).max()
        g = td * phi
        if algo == "momentumq":
            state = momentumq_fa_step(state, g, k)
        else:
            a = sched.coefficients(k)[0]
            new = project(theta - a * g, proj_radius)
            state = replace(state, theta=new, theta_prev=theta, g_prev=g, step=k + 1)
        if average:
            mean += (state.theta - mean) / (k + 1)
        if k + 1 in marks:
            out = mean if average else state.theta
            row = {"k": k + 1}
            if eval_hook is not None:
                row.update(eval_hook(k + 1, out.copy()))
            metrics.append(row)
    out = mean if average else state.theta
    return FaResult(theta_out=out.copy(), theta_last=state.theta.copy(), metrics=metrics)
