"""Finite MDPs, exact and sampled Bellman operators, and a value-iteration oracle.

Q-functions are plain ``(n_states, n_actions)`` float arrays throughout the
package. The transition kernel is held as a sparse ``(n_states * n_actions,
n_states)`` CSR matrix so that large grid worlds stay cheap; row ``x *
n_actions + u`` is the distribution P(. | x, u).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

ROW_SUM_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Discounted finite MDP with rewards in ``[0, r_max]``.

    ``start_state`` and ``terminal`` are optional episodic metadata used by
    trajectory samplers; the Bellman machinery ignores them (terminal states
    are expected to be absorbing with zero reward in the kernel itself).
    """

    n_states: int
    n_actions: int
    kernel: sp.csr_array
    reward: np.ndarray
    gamma: float
    r_max: float
    start_state: int | None = None
    terminal: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        S, A = self.n_states, self.n_actions
        if S < 1 or A < 1:
            raise ValueError("n_states and n_actions must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        kernel = self.kernel
        if not sp.issparse(kernel):
            kernel = np.asarray(kernel, dtype=float).reshape(S * A, S)
        kernel = sp.csr_array(kernel, dtype=float)
        kernel.eliminate_zeros()
        kernel.sort_indices()
        if kernel.shape != (S * A, S):
            raise ValueError(f"kernel shape {kernel.shape} != {(S * A, S)}")
        if kernel.nnz and kernel.data.min() < 0:
            raise ValueError("kernel has negative entries")
        sums = np.asarray(kernel.sum(axis=1)).ravel()
        bad = np.abs(sums - 1.0) > ROW_SUM_TOL
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ValueError(f"kernel row (x={i // A}, u={i % A}) sums to {sums[i]!r}")
        reward = np.array(self.reward, dtype=float).reshape(S, A)
        if reward.min() < 0 or reward.max() > self.r_max:
            raise ValueError(f"rewards must lie in [0, r_max={self.r_max}]")
        terminal = np.asarray(self.terminal, dtype=bool)
        if terminal.size == 0:
            terminal = np.zeros(S, dtype=bool)
        if terminal.shape != (S,):
            raise ValueError("terminal mask must have one entry per state")
        if self.start_state is not None and not 0 <= self.start_state < S:
            raise ValueError("start_state out of range")
        reward.setflags(write=False)
        terminal.setflags(write=False)
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "terminal", terminal)
        # Row-wise cumulative probabilities for inverse-CDF sampling.
        cum = np.cumsum(kernel.data)
        base = np.concatenate(([0.0], cum))[kernel.indptr[:-1]]
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_base", base)

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def dense_kernel(self) -> np.ndarray:
        """Kernel as a dense ``(S, A, S)`` array."""
        return self.kernel.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def expect(self, v: np.ndarray) -> np.ndarray:
        """E[v(y) | x, u] for every pair, shape ``(S, A)``."""
        return (self.kernel @ v).reshape(self.n_states, self.n_actions)

    def sample_next(self, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Draw y ~ P(. | row) for each flat pair index in ``rows``.

        ``u`` are uniforms in [0, 1) of the same shape; the result is a pure
        function of them, so sampling is order-independent.
        """
        rows = np.asarray(rows)
        start = self.kernel.indptr[rows]
        stop = self.kernel.indptr[rows + 1]
        target = self._base[rows] + u * (self._cum[stop - 1] - self._base[rows])
        idx = np.searchsorted(self._cum, target, side="right")
        idx = np.clip(idx, start, stop - 1)
        return self.kernel.indices[idx]

    def to_dict(self) -> dict:
        d = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "reward": self.reward.tolist(),
            "kernel": self.dense_kernel().tolist(),
        }
        if self.start_state is not None:
            d["start_state"] = self.start_state
        if self.terminal.any():
            d["terminal"] = np.flatnonzero(self.terminal).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        S, A = int(d["n_states"]), int(d["n_actions"])
        terminal = np.zeros(S, dtype=bool)
        terminal[list(d.get("terminal", []))] = True
        return cls(
            n_states=S,
            n_actions=A,
            kernel=np.asarray(d["kernel"], dtype=float),
            reward=np.asarray(d["reward"], dtype=float),
            gamma=float(d["gamma"]),
            r_max=float(d["r_max"]),
            start_state=d.get("start_state"),
            terminal=terminal,
        )


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()))


def load_mdp(path: str | Path) -> TabularMdp:
    return TabularMdp.from_dict(json.loads(Path(path).read_text()))


def sup_norm(q: np.ndarray) -> float:
    return float(np.max(np.abs(q))) if np.size(q) else 0.0


def _check_q(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"Q shape {q.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    return q


def check_qtable(q: np.ndarray, v_max: float | None = None) -> None:
    """Raise if ``q`` has non-finite entries or exceeds ``v_max`` in sup-norm."""
    if not np.all(np.isfinite(q)):
        raise ValueError("Q-table has non-finite entries")
    if v_max is not None and sup_norm(q) > v_max:
        raise ValueError(f"|Q| = {sup_norm(q)} exceeds V_max = {v_max}")


def bellman_exact(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """TQ(x,u) = R(x,u) + gamma * E_P max_u' Q(y,u')."""
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * mdp.expect(q.max(axis=1))


def sample_next_states(mdp: TabularMdp, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """One next-state draw per (x, u); shape ``(S, A)`` or ``(size, S, A)``."""
    shape = (mdp.n_states, mdp.n_actions) if size is None else (size, mdp.n_states, mdp.n_actions)
    u = rng.random(shape)
    rows = np.broadcast_to(np.arange(mdp.n_pairs).reshape(mdp.n_states, mdp.n_actions), shape)
    return mdp.sample_next(rows, u)


def bellman_on_samples(mdp: TabularMdp, q: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Empirical operator R + gamma * max_u' Q(y, u') on a given sample grid."""
    q = _check_q(mdp, q)
    return mdp.reward + mdp.gamma * q.max(axis=1)[y]


def bellman_empirical(mdp: TabularMdp, q: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sampled Bellman operator; also returns the sample grid for reuse."""
    y = sample_next_states(mdp, rng)
    return bellman_on_samples(mdp, q, y), y


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """argmax over actions; ties go to the lowest action index."""
    return np.argmax(q, axis=1)


def solve_qstar(mdp: TabularMdp, tol: float = 1e-10, max_iters: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Value iteration until the sup-norm Bellman residual is at most ``tol``.

    Returns ``(Q, policy)`` with ``policy`` greedy in ``Q``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iters):
        tq = bellman_exact(mdp, q)
        if sup_norm(tq - q) <= tol:
            return q, greedy_policy(q)
        q = tq
    raise ConvergenceError(
        f"value iteration did not reach residual {tol} in {max_iters} sweeps "
        f"(gamma={mdp.gamma}); loosen tol or raise max_iters"
    )


def policy_state_kernel(mdp: TabularMdp, behavior: np.ndarray) -> sp.csr_array:
    """State-to-state transition matrix under a stochastic behavior policy."""
    weights = _behavior_matrix(behavior, mdp.n_states, mdp.n_actions)
    return sp.csr_array(weights @ mdp.kernel)


def _behavior_matrix(behavior: np.ndarray, S: int, A: int) -> sp.csr_array:
    behavior = np.asarray(behavior, dtype=float).reshape(S, A)
    rows = np.repeat(np.arange(S), A)
    cols = np.arange(S * A)
    return sp.csr_array((behavior.ravel(), (rows, cols)), shape=(S, S * A))


def stationary_distribution(kernel, tol: float = 1e-12, max_iters: int = 1_000_000) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix by power iteration.

    Iterates the lazy chain (I + K) / 2, which has the same stationary
    distribution and is aperiodic.
    """
    n = kernel.shape[0]
    kt = sp.csr_array(kernel).T.tocsr()
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iters):
        nxt = 0.5 * (mu + kt @ mu)
        nxt /= nxt.sum()
        if np.abs(nxt - mu).sum() <= tol:
            return nxt
        mu = nxt
    raise ConvergenceError(f"power iteration did not converge to {tol} in {max_iters} steps")
