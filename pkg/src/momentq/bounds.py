"""Closed-form finite-sample bounds for MomentumQ and their constants.

Two different deltas appear in the analysis: the strong-monotonicity margin
of the mean TD direction (``delta_margin``) and the failure probability of
the tabular high-probability bound (``confidence``). They are kept apart
here on purpose.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np


class BoundDomainError(ValueError):
    """A bound was evaluated outside the parameter range it is stated for."""


@dataclass(frozen=True)
class BoundInputs:
    gamma: float = 0.95
    r_max: float = 1.0
    d_max: float = 1.0
    delta_margin: float = 0.1
    sigma: float = 1.0
    rho: float = 0.5
    kappa: float = 0.01
    alpha: float = 0.01
    beta: float = 0.5
    lam: float = 0.9
    split: str = "nesterov"
    m: float = 2.0
    t_horizon: int = 1000
    confidence: float = 0.05
    n_pairs: int = 64
    dbar: float | None = None
    dbar_source: str = "user"
    v_max: float | None = None
    theta0_err: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise BoundDomainError("gamma must lie in (0, 1)")
        if not 0.0 < self.rho < 1.0:
            raise BoundDomainError("rho must lie in (0, 1)")
        if self.kappa <= 0:
            raise BoundDomainError("kappa must be positive")
        if self.sigma <= 0:
            raise BoundDomainError("sigma must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise BoundDomainError("confidence must lie in (0, 1)")
        if self.split not in ("nesterov", "even"):
            raise BoundDomainError(f"unknown split rule {self.split!r}")
        if self.t_horizon < 0:
            raise BoundDomainError("t_horizon must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BoundDomainError(f"unknown bound inputs: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "BoundInputs":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


class Constants(NamedTuple):
    g_max: float
    eta1: float
    eta2: float
    h_tilde: float


def mixing_time(sigma: float, rho: float, kappa: float) -> int:
    """Smallest ``k >= 1`` with ``sigma * rho**k <= kappa``."""
    if sigma <= 0 or kappa <= 0 or not 0 < rho < 1:
        raise BoundDomainError("need sigma > 0, kappa > 0 and rho in (0, 1)")
    k = max(1, math.ceil(math.log(kappa / sigma) / math.log(rho)))
    # the logarithm can land one off either way in floating point
    while k > 1 and sigma * rho ** (k - 1) <= kappa:
        k -= 1
    while sigma * rho**k > kappa:
        k += 1
    return k


def constants(inputs: BoundInputs) -> Constants:
    d, r, g = inputs.d_max, inputs.r_max, inputs.gamma
    g_max = 2 * d + r
    eta1 = 2 * d * ((1 + g) * d + g_max)
    eta2 = 6 * g_max * ((1 + g) * d + g_max)
    h_tilde = 2 * g * (inputs.m + math.floor(inputs.m) + 2) + 2
    return Constants(g_max, eta1, eta2, h_tilde)


def nesterov_weights(inputs: BoundInputs, count: int) -> np.ndarray:
    """``b_i`` for ``i < count`` under the configured momentum split."""
    b = inputs.beta * inputs.lam ** np.arange(count)
    return b if inputs.split == "nesterov" else b / 2


def bound_thm1(inputs: BoundInputs) -> float:
    """Constant-step bound on ``E |theta_T - theta*|^2`` under Markovian sampling."""
    a, dm, lam, beta = inputs.alpha, inputs.delta_margin, inputs.lam, inputs.beta
    if dm <= 0:
        raise BoundDomainError("delta_margin must be positive")
    if not 0 < lam < 1 or not 0 < beta < 1:
        raise BoundDomainError("need beta and lambda in (0, 1)")
    if not 0 < a < (1 - lam) / (2 * dm):
        raise BoundDomainError(f"alpha = {a} violates 0 < alpha < (1 - lambda)/(2 delta) = {(1 - lam) / (2 * dm)}")
    c = constants(inputs)
    tau = mixing_time(inputs.sigma, inputs.rho, inputs.kappa)
    T = inputs.t_horizon
    d, g = inputs.d_max, c.g_max

    factors = 1 - 2 * a * dm * (1 + nesterov_weights(inputs, T))
    # product in log space; sign tracked separately
    sign = -1.0 if np.count_nonzero(factors < 0) % 2 else 1.0
    with np.errstate(divide="ignore"):
        log_prod = float(np.sum(np.log(np.abs(factors))))
    product = sign * math.exp(log_prod) if np.isfinite(log_prod) else 0.0

    transient = beta * (
        2 * c.eta1 * tau / dm
        + (5 * d**2 + 2 * a * d * g + 4 * a * c.eta1 * tau * lam) / (1 - 2 * a * dm - lam)
    ) * (1 - 2 * a * dm) ** (T - 1 - tau)
    floor = 15 * g**2 * a / (2 * dm) + 2 * c.eta2 * tau * a / dm + 8 * d * g * inputs.kappa / dm
    return product * inputs.theta0_err + transient + floor


def bound_thm1_floor(inputs: BoundInputs) -> float:
    """The T-independent part of :func:`bound_thm1`."""
    c = constants(inputs)
    tau = mixing_time(inputs.sigma, inputs.rho, inputs.kappa)
    a, dm = inputs.alpha, inputs.delta_margin
    return 15 * c.g_max**2 * a / (2 * dm) + 2 * c.eta2 * tau * a / dm + 8 * inputs.d_max * c.g_max * inputs.kappa / dm


def bound_thm2(inputs: BoundInputs) -> float:
    """Diminishing-step bound on ``E |mean(theta_1..theta_T) - theta*|^2``."""
    a, dm, lam, beta = inputs.alpha, inputs.delta_margin, inputs.lam, inputs.beta
    if dm <= 0:
        raise BoundDomainError("delta_margin must be positive")
    if a <= 0:
        raise BoundDomainError("alpha must be positive")
    if not 0 < lam < 1 or not 0 <= beta < 1:
        raise BoundDomainError("need beta in [0, 1) and lambda in (0, 1)")
    T = inputs.t_horizon
    if T < 1:
        raise BoundDomainError("t_horizon must be at least 1")
    c = constants(inputs)
    tau = mixing_time(inputs.sigma, inputs.rho, inputs.kappa)
    d, g = inputs.d_max, c.g_max
    lead = (d**2 / a + 30 * a * g**2 + 16 * tau * a * c.eta2) / (2 * dm * math.sqrt(T))
    bias = 8 * d * g * inputs.kappa / dm
    tail = (
        5 * beta * d**2 / (2 * a * dm * (1 - lam) ** 2)
        + (d * g * beta * lam + 4 * tau * c.eta1 * beta * lam) / (dm * (1 - lam))
    ) / T
    return lead + bias + tail


class Thm3Bound(NamedTuple):
    bound: float
    rate: float  # the almost-sure rate expression, without its hidden constant


def bound_thm3(inputs: BoundInputs) -> Thm3Bound:
    """High-probability bound on ``|Q* - Q_T|`` for tabular MomentumQ."""
    m, T, g = inputs.m, inputs.t_horizon, inputs.gamma
    if m < 1 / g - 1e-12:
        raise BoundDomainError(f"m = {m} violates m >= 1/gamma = {1 / g}")
    if T <= m:
        raise BoundDomainError(f"need T > m, got T = {T}, m = {m}")
    if inputs.dbar is None or inputs.v_max is None:
        raise BoundDomainError("dbar and v_max are required for the tabular bound")
    c = constants(inputs)
    span = T - math.floor(m) - 1
    log_term = math.log(2 * inputs.n_pairs / inputs.confidence)
    bound = (c.h_tilde * inputs.v_max + inputs.dbar * math.sqrt(8 * span * log_term)) / (T * (1 - g))
    rate = math.sqrt(span * log_term) / ((1 - g) ** 2 * T)
    return Thm3Bound(bound, rate)


def evaluate(kind: str, inputs: BoundInputs) -> float:
    if kind == "thm1":
        return bound_thm1(inputs)
    if kind == "thm2":
        return bound_thm2(inputs)
    if kind == "thm3":
        return bound_thm3(inputs).bound
    raise ValueError(f"unknown bound kind {kind!r}")


def compare_bound_vs_run(
    kind: str,
    inputs: BoundInputs,
    checkpoints: Sequence[int],
    empirical: Sequence[float] | Sequence[Sequence[float]],
) -> dict:
    """Compare empirical errors with the bound at each checkpoint.

    ``empirical`` is either one value per checkpoint or, for several seeds,
    one sequence per seed. The final checkpoint must equal
    ``inputs.t_horizon``. For the tabular bound, which holds with
    probability ``1 - confidence``, the report counts violating seeds at the
    horizon instead of treating a single violation as failure.
    """
    checkpoints = list(checkpoints)
    if not checkpoints or checkpoints[-1] != inputs.t_horizon:
        raise ValueError(
            f"run horizon {checkpoints[-1] if checkpoints else None} does not match t_horizon {inputs.t_horizon}"
        )
    emp = np.atleast_2d(np.asarray(empirical, dtype=float))
    if emp.shape[1] != len(checkpoints):
        raise ValueError("empirical values do not line up with checkpoints")
    rows = []
    for j, k in enumerate(checkpoints):
        try:
            b = evaluate(kind, replace(inputs, t_horizon=k))
        except BoundDomainError:
            continue
        mean = float(emp[:, j].mean())
        rows.append({
            "k": k,
            "empirical": mean,
            "bound": b,
            "ratio": mean / b if b > 0 else math.inf,
            "violated": bool(mean > b),
            "violating_seeds": int(np.sum(emp[:, j] > b)),
        })
    final = rows[-1] if rows else None
    report = {"kind": kind, "n_seeds": emp.shape[0], "checkpoints": rows}
    if final is not None:
        report.update(
            bound=final["bound"],
            empirical=final["empirical"],
            ratio=final["ratio"],
            violated=final["violated"],
            violating_seeds=final["violating_seeds"],
        )
    if kind == "thm3":
        report["confidence"] = inputs.confidence
        report["seed_budget"] = inputs.confidence * emp.shape[0]
        report["dbar_source"] = inputs.dbar_source
    return report


def estimate_mixing(kernel, mu: np.ndarray | None = None, horizon: int = 200) -> tuple[float, float]:
    """Fit ``(sigma, rho)`` of ``sup_x d_TV(P^k(x, .), mu) <= sigma rho^k``.

    ``rho`` is the second-largest eigenvalue modulus of the chain; ``sigma``
    is the smallest constant making the inequality hold over the measured
    decay for ``k <= horizon`` (a least-squares fit on log-distances would
    under-cover, so the envelope is used).
    """
    from .mdp import stationary_distribution

    k = np.asarray(kernel.todense() if hasattr(kernel, "todense") else kernel, dtype=float)
    if mu is None:
        mu = stationary_distribution(k)
    ev = np.sort(np.abs(np.linalg.eigvals(k)))[::-1]
    rho = float(ev[1]) if len(ev) > 1 else 0.0
    rho = min(max(rho, 1e-12), 1 - 1e-12)
    dist = np.eye(k.shape[0])
    sigma = 0.0
    for step in range(1, horizon + 1):
        dist = dist @ k
        tv = 0.5 * np.abs(dist - mu).sum(axis=1).max()
        if tv < 1e-14:
            break
        sigma = max(sigma, tv / rho**step)
    return max(sigma, 1e-12), rho
