"""Synchronous tabular Q-learning: vanilla, SpeedyQ and MomentumQ.

All three learners share one sweep structure: at iteration ``k`` every
(x, u) gets a single next-state sample ``y_k(x, u)``, and any empirical
Bellman evaluations made in that sweep reuse it. Each learner's update can
be written as

    Q_{k+1} = (1 - a_k) Q_k + mix_k (Q_k - Q_{k-1}) + a_k D_k

with ``D_k = (1 + w_k) T_k Q_k - w_k T_k Q_{k-1}`` and ``T_k`` the empirical
operator, which is what :class:`RunDiagnostics` tracks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .mdp import (
    TabularMdp,
    bellman_exact,
    bellman_on_samples,
    sample_next_states,
    sup_norm,
)

MODES = ("momentumq", "speedyq", "vanilla")
SHIFT_THRESHOLD = 10.0


def harmonic(k: int) -> float:
    return 1.0 / (k + 1)


@dataclass(frozen=True)
class TabularSchedule:
    """Step-size coefficients for the tabular learners.

    For MomentumQ, ``a_k = 1/(k+1)``, ``b_k = k - m - 1`` and
    ``c_k = (-k^2 + (m+1) k + 1) / (k+1)``. With ``shift`` the same formulas
    are evaluated at ``k + m`` so that ``a_k = 1/(m+k+1)``; by default the
    shift is applied when ``m > 10``.
    """

    mode: str = "momentumq"
    m: float | None = None
    shift: bool | None = None
    vanilla_step: Callable[[int], float] = harmonic
    gamma: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "momentumq":
            if self.m is None:
                raise ValueError("MomentumQ needs the hyperparameter m")
            if self.gamma is not None and self.m < 1.0 / self.gamma - 1e-12:
                raise ValueError(f"m = {self.m} violates m >= 1/gamma = {1.0 / self.gamma}")

    @property
    def shifted(self) -> bool:
        if self.mode != "momentumq":
            return False
        return self.m > SHIFT_THRESHOLD if self.shift is None else self.shift

    def coefficients(self, k: int) -> tuple[float, float, float]:
        """MomentumQ ``(a_k, b_k, c_k)``."""
        m = self.m
        j = k + m if self.shifted else k
        a = 1.0 / (j + 1)
        b = j - m - 1
        c = (-j * j + (m + 1) * j + 1) / (j + 1)
        return a, b, c

    def weights(self, k: int) -> tuple[float, float, float]:
        """``(a_k, mix_k, w_k)`` of the shared compact form."""
        if self.mode == "momentumq":
            a, b, c = self.coefficients(k)
            return a, b * (1 - a) + c, b
        if self.mode == "speedyq":
            a = harmonic(k)
            return a, 0.0, (1 - a) / a
        alpha = self.vanilla_step(k)
        return alpha, 0.0, 0.0


def _check_pair(mdp: TabularMdp, q_prev: np.ndarray, q_curr: np.ndarray, k: int) -> None:
    shape = (mdp.n_states, mdp.n_actions)
    if q_prev.shape != shape or q_curr.shape != shape:
        raise ValueError(f"Q shapes {q_prev.shape}, {q_curr.shape} do not match MDP {shape}")
    if k < 0:
        raise ValueError("step index k must be non-negative")
    if k == 0 and not np.array_equal(q_prev, q_curr):
        raise ValueError("at k = 0 the previous iterate must equal the current one (Q_{-1} = Q_0)")


def momentumq_three_step(q_prev, q_curr, tq_prev, tq_curr, a, b, c):
    """MomentumQ as two vanilla half-steps plus Nesterov and Polyak terms."""
    s = (1 - a) * q_prev + a * tq_prev
    p = (1 - a) * q_curr + a * tq_curr
    return p + b * (p - s) + c * (q_curr - q_prev)


def momentumq_compact(q_prev, q_curr, tq_prev, tq_curr, a, b, c):
    """Same update regrouped around the operator term ``D_k``."""
    return (1 - a) * q_curr + (b * (1 - a) + c) * (q_curr - q_prev) + a * ((1 + b) * tq_curr - b * tq_prev)


def momentumq_step(mdp, q_prev, q_curr, k, sched, rng, y=None):
    """One synchronous MomentumQ sweep; both operator evaluations share ``y``."""
    _check_pair(mdp, q_prev, q_curr, k)
    if y is None:
        y = sample_next_states(mdp, rng)
    a, b, c = sched.coefficients(k)
    tq_prev = bellman_on_samples(mdp, q_prev, y)
    tq_curr = bellman_on_samples(mdp, q_curr, y)
    return momentumq_three_step(q_prev, q_curr, tq_prev, tq_curr, a, b, c)


def speedyq_step(mdp, q_prev, q_curr, k, rng, a=None, y=None):
    """One synchronous SpeedyQ sweep with ``a_k = 1/(k+1)`` by default."""
    _check_pair(mdp, q_prev, q_curr, k)
    if y is None:
        y = sample_next_states(mdp, rng)
    a = harmonic(k) if a is None else a
    tq_prev = bellman_on_samples(mdp, q_prev, y)
    tq_curr = bellman_on_samples(mdp, q_curr, y)
    return q_curr + a * (tq_curr - q_curr) + (1 - a) * (tq_curr - tq_prev)


def vanilla_step(mdp, q_curr, k, alpha_k, rng, y=None):
    """Synchronous Q-learning sweep ``Q - alpha (Q - T_k Q)``."""
    if not 0.0 <= alpha_k <= 1.0:
        raise ValueError(f"step size must lie in [0, 1], got {alpha_k}")
    if q_curr.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("Q shape does not match MDP")
    if y is None:
        y = sample_next_states(mdp, rng)
    return q_curr - alpha_k * (q_curr - bellman_on_samples(mdp, q_curr, y))


@dataclass
class RunDiagnostics:
    """Per-step traces of a tabular run.

    ``eps_history`` holds the sup-norm of the martingale error
    ``D[Q_k, Q_{k-1}] - D_k[Q_k, Q_{k-1}]`` (exact minus sampled operator
    term) and ``cum_error`` its running entrywise sum. ``dk_bound`` is the
    Proposition-1 style bound on ``|D_k|`` rebuilt from the run's own trace
    of ``|Q_k|`` and ``R_max``.
    """

    eps_history: list[float] = field(default_factory=list)
    cum_error: np.ndarray | None = None
    dk_norm: list[float] = field(default_factory=list)
    dbar_running: list[float] = field(default_factory=list)
    dk_bound: list[float] = field(default_factory=list)
    vmax_running: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    eps_tables: list[np.ndarray] | None = None

    @property
    def dbar(self) -> float:
        return self.dbar_running[-1] if self.dbar_running else 0.0

    @property
    def v_max(self) -> float:
        return self.vmax_running[-1] if self.vmax_running else 0.0


@dataclass(frozen=True)
class TabularConfig:
    mode: str = "momentumq"
    m: float | None = None
    shift: bool | None = None
    vanilla_alpha: float | None = None  # constant step; None means 1/(k+1)
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.mode == "momentumq":
            return "momentumq_m1/gamma" if self.m is None else f"momentumq_m{self.m:g}"
        return self.mode

    def schedule(self, gamma: float) -> TabularSchedule:
        step = harmonic if self.vanilla_alpha is None else (lambda k, c=self.vanilla_alpha: c)
        m = self.m
        if self.mode == "momentumq" and m is None:
            m = 1.0 / gamma
        return TabularSchedule(mode=self.mode, m=m, shift=self.shift, vanilla_step=step, gamma=gamma)


def _dk_recursion_bound(sched, k, r_max, gamma, vmax, prev_bound, dq_norm):
    """Upper bound on |D_k| from R_max, the running V_max and the previous bound.

    Uses ``|D_k| <= R_max + gamma |Q_{k-1}| + gamma |1 + w_k| |Q_k - Q_{k-1}|``;
    for MomentumQ, where ``b_k (1 - a_k) + c_k = a_k``, the increment is
    replaced by the recursive bound ``a_{k-1} (|D_{k-1}| + |Q_{k-2}|)``.
    """
    _, _, w = sched.weights(k)
    if k == 0:
        return r_max + gamma * vmax
    if sched.mode == "momentumq":
        a_prev = sched.coefficients(k - 1)[0]
        step = a_prev * (prev_bound + vmax)
    else:
        step = dq_norm
    return r_max + gamma * vmax + gamma * abs(1 + w) * step


def run_tabular(
    mdp: TabularMdp,
    config: TabularConfig | TabularSchedule,
    T: int,
    seed: int,
    qstar: np.ndarray | None = None,
    q0: np.ndarray | None = None,
    exact_diagnostics: bool = True,
    keep_eps: bool = False,
    callback: Callable[[int, np.ndarray, RunDiagnostics], None] | None = None,
) -> tuple[np.ndarray, RunDiagnostics]:
    """Run ``T`` synchronous sweeps and return ``(Q_T, diagnostics)``.

    Iteration ``k`` samples from substream ``(seed, SWEEP, k)``, so runs are
    reproducible and independent of anything else drawn from ``seed``.
    ``callback(k, Q_k, diag)`` is called after every sweep with the new
    iterate index.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    sched = config if isinstance(config, TabularSchedule) else config.schedule(mdp.gamma)
    q_curr = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else np.array(q0, dtype=float)
    q_prev = q_curr.copy()
    diag = RunDiagnostics()
    if exact_diagnostics:
        diag.cum_error = np.zeros_like(q_curr)
    if keep_eps:
        diag.eps_tables = []
    vmax = sup_norm(q_curr)
    dbar = 0.0
    bound = 0.0
    dq = 0.0
    exact_prev = exact_curr = bellman_exact(mdp, q_curr) if exact_diagnostics else None
    for k in range(T):
        y = sample_next_states(mdp, rngmod.stream(seed, rngmod.SWEEP, k))
        tq_prev = bellman_on_samples(mdp, q_prev, y)
        tq_curr = bellman_on_samples(mdp, q_curr, y)
        a, mix, w = sched.weights(k)
        if sched.mode == "momentumq":
            _, b, c = sched.coefficients(k)
            q_next = momentumq_three_step(q_prev, q_curr, tq_prev, tq_curr, a, b, c)
        elif sched.mode == "speedyq":
            q_next = q_curr + a * (tq_curr - q_curr) + (1 - a) * (tq_curr - tq_prev)
        else:
            q_next = q_curr - a * (q_curr - tq_curr)

        d_k = (1 + w) * tq_curr - w * tq_prev
        dk = sup_norm(d_k)
        dbar = max(dbar, dk)
        bound = _dk_recursion_bound(sched, k, mdp.r_max, mdp.gamma, vmax, bound, dq)
        diag.dk_norm.append(dk)
        diag.dbar_running.append(dbar)
        diag.dk_bound.append(bound)
        if exact_diagnostics:
            eps = (1 + w) * exact_curr - w * exact_prev - d_k
            diag.cum_error += eps
            diag.eps_history.append(sup_norm(eps))
            if keep_eps:
                diag.eps_tables.append(eps)

        dq = sup_norm(q_next - q_curr)
        q_prev, q_curr = q_curr, q_next
        if exact_diagnostics:
            exact_prev, exact_curr = exact_curr, bellman_exact(mdp, q_curr)
        vmax = max(vmax, sup_norm(q_curr))
        diag.vmax_running.append(vmax)
        if qstar is not None:
            diag.loss_history.append(sup_norm(q_curr - qstar))
        if callback is not None:
            callback(k + 1, q_curr, diag)
    return q_curr, diag


def martingale_errors(mdp, q_prev, q_curr, w, y_batch):
    """Error ``D - D_k`` for a batch of sample grids ``(B, S, A)`` at fixed iterates."""
    exact = (1 + w) * bellman_exact(mdp, q_curr) - w * bellman_exact(mdp, q_prev)
    v_curr = q_curr.max(axis=1)[y_batch]
    v_prev = q_prev.max(axis=1)[y_batch]
    sampled = mdp.reward + mdp.gamma * ((1 + w) * v_curr - w * v_prev)
    return exact - sampled


def schedule_identity_residual(m: float, k_max: int, shift: bool = False) -> float:
    """Largest |b_k (1 - a_k) + c_k - a_k| over k = 0..k_max."""
    sched = TabularSchedule(mode="momentumq", m=m, shift=shift)
    worst = 0.0
    for k in range(k_max + 1):
        a, b, c = sched.coefficients(k)
        worst = max(worst, abs(b * (1 - a) + c - a) / max(1.0, math.fabs(b)))
    return worst
