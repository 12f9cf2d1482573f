"""Acceptance gate: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (the lines are echoed in the
terminal summary) or directly with ``python3 tests/test_acceptance.py``.
Seeds are fixed up front; nothing here is re-rolled after seeing results.
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from momentq import rng as rngmod
from momentq.bounds import BoundInputs, bound_thm3, constants, mixing_time
from momentq.frozenlake import GridSpec, Transition, build_frozenlake, uniform_behavior
from momentq.harness import ExperimentConfig, final_values, pooled_se, read_run_file, run_experiment
from momentq.linear import (
    FaSchedule,
    LinearQState,
    g_batch,
    g_term,
    gbar_and_thetastar,
    momentumq_fa_step,
    onehot_features,
    rbf_features,
    run_fa,
    synchronous_fa_sweep,
    vanilla_fa_step,
)
from momentq.frozenlake import markovian_stream
from momentq.mdp import (
    TabularMdp,
    bellman_exact,
    bellman_on_samples,
    sample_next_states,
    solve_qstar,
    sup_norm,
)
from momentq.tabular import (
    TabularConfig,
    TabularSchedule,
    martingale_errors,
    momentumq_compact,
    momentumq_three_step,
    run_tabular,
    vanilla_step,
)

RESULTS: list[str] = []


def report(label: str, ok: bool, detail: str, started: float, limit: float | None = None) -> None:
    elapsed = time.perf_counter() - started
    timed_ok = limit is None or elapsed < limit
    budget = f" (limit {limit:g} s)" if limit is not None else ""
    line = f"{'PASS' if ok and timed_ok else 'FAIL'} {label}: {detail}; {elapsed:.1f} s{budget}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line
    assert timed_ok, line


def random_mdp(rng: np.random.Generator) -> TabularMdp:
    S = int(rng.integers(2, 9))
    A = int(rng.integers(1, 5))
    p = rng.random((S * A, S)) ** 2
    p /= p.sum(axis=1, keepdims=True)
    return TabularMdp(S, A, p, rng.random((S, A)), float(rng.uniform(0.05, 0.99)), 1.0)


def lake4() -> TabularMdp:
    return build_frozenlake(GridSpec.standard(4), gamma=0.95)


def test_criterion_01_form_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        mdp = random_mdp(rng)
        k = int(rng.integers(0, 501))
        m = float(rng.uniform(1 / mdp.gamma, 60.0))
        q_curr = rng.random((mdp.n_states, mdp.n_actions))
        q_prev = q_curr.copy() if k == 0 else rng.random(q_curr.shape)
        y = sample_next_states(mdp, rng)
        tq_prev, tq_curr = bellman_on_samples(mdp, q_prev, y), bellman_on_samples(mdp, q_curr, y)
        a, b, c = TabularSchedule(m=m, gamma=mdp.gamma).coefficients(k)
        diff = sup_norm(momentumq_three_step(q_prev, q_curr, tq_prev, tq_curr, a, b, c)
                        - momentumq_compact(q_prev, q_curr, tq_prev, tq_curr, a, b, c))
        worst = max(worst, diff)
    report("criterion 1 form equivalence", worst <= 1e-12, f"max sup-norm gap {worst:.2e} over 1000 draws", t0, 10)


def test_criterion_02_contraction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    violations = 0
    worst = 0.0
    for _ in range(1000):
        mdp = random_mdp(rng)
        scale = 10 ** rng.uniform(-3, 3)
        q = rng.normal(scale=scale, size=(mdp.n_states, mdp.n_actions))
        q2 = rng.normal(scale=scale, size=q.shape)
        lhs = sup_norm(bellman_exact(mdp, q) - bellman_exact(mdp, q2))
        rhs = mdp.gamma * sup_norm(q - q2)
        worst = max(worst, lhs / rhs)
        # relative slack of a few ulps for floating-point summation
        violations += lhs > rhs * (1 + 1e-12)
    report("criterion 2 contraction", violations == 0,
           f"{violations} violations in 1000 pairs, max |TQ-TQ'|/(gamma|Q-Q'|) = {worst:.6f}", t0, 10)


def test_criterion_03_oracle_fixed_point():
    t0 = time.perf_counter()
    chain = TabularMdp(2, 1, [[0.0, 1.0], [0.0, 1.0]], [[0.0], [1.0]], 0.5, 1.0)
    q_chain, _ = solve_qstar(chain)
    res_chain = sup_norm(bellman_exact(chain, q_chain) - q_chain)
    chain_err = sup_norm(q_chain[:, 0] - np.array([1.0, 2.0]))
    res_lake = []
    for slip in (1 / 3, 2 / 3):
        mdp = build_frozenlake(GridSpec.standard(4, slip=slip), gamma=0.95)
        q, _ = solve_qstar(mdp)
        res_lake.append(sup_norm(bellman_exact(mdp, q) - q))
    ok = max(res_lake) <= 1e-10 and res_chain <= 1e-10 and chain_err <= 1e-9
    report("criterion 3 oracle fixed point", ok,
           f"FrozenLake-4x4 residuals {res_lake[0]:.1e}/{res_lake[1]:.1e}, chain residual {res_chain:.1e}, "
           f"|Q*-(1,2)| = {chain_err:.1e}", t0, 5)


def test_criterion_04_martingale_zero_mean():
    t0 = time.perf_counter()
    mdp = lake4()
    cfg = TabularConfig()
    sched = cfg.schedule(mdp.gamma)
    snaps = {}
    wanted = {1, 2, 5, 10, 20, 50, 100, 200, 500, 1000}

    def keep(k, q, diag):
        if k in wanted or k + 1 in wanted:
            snaps[k] = q.copy()

    run_tabular(mdp, cfg, 1000, seed=0, exact_diagnostics=False, callback=keep)
    snaps[0] = np.zeros((16, 4))
    outside = tested = 0
    worst_z = 0.0
    for i, k in enumerate(sorted(wanted)):
        q_prev, q_curr = snaps[k - 1], snaps[k]
        w = sched.weights(k)[2]
        y = sample_next_states(mdp, rngmod.stream(0, rngmod.ORACLE, i), size=100_000)
        eps = martingale_errors(mdp, q_prev, q_curr, w, y)
        mean = eps.mean(axis=0)
        se = eps.std(axis=0, ddof=1) / math.sqrt(len(eps))
        live = se > 1e-12 * (1 + np.abs(eps).max())
        z = np.abs(mean[live]) / se[live]
        outside += int(np.sum(z > 3))
        tested += int(live.sum())
        worst_z = max(worst_z, float(z.max()))
        # degenerate (deterministic) entries must be exactly zero-mean
        outside += int(np.sum(np.abs(mean[~live]) > 1e-9))
    expected = tested * 2 * (1 - 0.5 * (1 + math.erf(3 / math.sqrt(2))))
    report("criterion 4 martingale zero mean", outside == 0,
           f"{outside} of {tested} random entries outside 3 SE (about {expected:.1f} expected by chance "
           f"under a true zero mean), max |z| = {worst_z:.2f}", t0, 120)


def test_criterion_05_g_term_bounds():
    t0 = time.perf_counter()
    mdp = build_frozenlake(GridSpec.standard(8), gamma=0.95)
    fmap = rbf_features(8, 4, centers=4)
    rng = np.random.default_rng(505)
    n, d = 100_000, fmap.dim
    d_max = 5.0
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    theta = dirs * d_max * rng.random(n)[:, None] ** (1 / d)
    theta[: n // 10] = dirs[: n // 10] * d_max  # include the sphere itself
    x = rng.integers(0, 64, n)
    u = rng.integers(0, 4, n)
    y = rng.integers(0, 64, n)
    r = rng.random(n) * mdp.r_max
    g = g_batch(fmap, theta, x, u, r, y, mdp.gamma)
    norm_ratio = np.linalg.norm(g, axis=1) / (2 * d_max + mdp.r_max)
    theta2 = rng.normal(scale=3.0, size=(n, d))
    g2 = g_batch(fmap, theta2, x, u, r, y, mdp.gamma)
    lip_ratio = np.linalg.norm(g - g2, axis=1) / ((1 + mdp.gamma) * np.linalg.norm(theta - theta2, axis=1))
    v1 = int(np.sum(norm_ratio > 1 + 1e-12))
    v2 = int(np.sum(lip_ratio > 1 + 1e-12))
    report("criterion 5 g-term bounds", v1 == 0 and v2 == 0,
           f"norm violations {v1}, Lipschitz violations {v2} over 1e5 draws "
           f"(max ratios {norm_ratio.max():.3f}, {lip_ratio.max():.3f})", t0, 30)


ORDERING_ALGOS = [
    {"mode": "vanilla"},
    {"mode": "speedyq"},
    {"mode": "momentumq", "name": "momentumq_m1overgamma"},
    {"mode": "momentumq", "m": 10},
    {"mode": "momentumq", "m": 50},
]


def ordering_config(out: Path) -> ExperimentConfig:
    return ExperimentConfig(env={"standard": 4, "gamma": 0.95}, algos=ORDERING_ALGOS, T=10_000,
                            seeds=list(range(20)), output_dir=str(out))


@pytest.fixture(scope="module")
def ordering_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ordering")
    t0 = time.perf_counter()
    manifest = run_experiment(ordering_config(out))
    return out, manifest, time.perf_counter() - t0


def test_criterion_06_convergence_ordering(ordering_run):
    out, manifest, elapsed = ordering_run
    t0 = time.perf_counter() - elapsed
    finals = final_values(out / f for f in manifest["run_files"])
    loss = {algo: np.array([row["value"] for _, row in sorted(rows.items())]) for algo, rows in finals.items()}
    mq, sq, va = loss["momentumq_m1overgamma"], loss["speedyq"], loss["vanilla"]
    gap1, se1 = sq.mean() - mq.mean(), pooled_se(mq, sq)
    gap2, se2 = va.mean() - sq.mean(), pooled_se(sq, va)
    extra = ", ".join(f"{a} {loss[a].mean():.5f}" for a in ("momentumq_m10", "momentumq_m50"))
    detail = (f"mean final loss MomentumQ(m=1/gamma) {mq.mean():.5f}, SpeedyQ {sq.mean():.5f}, "
              f"Vanilla {va.mean():.5f}; gaps {gap1:.5f} (SE {se1:.5f}) and {gap2:.5f} (SE {se2:.5f}); {extra}")
    report("criterion 6 convergence ordering", gap1 > se1 and gap2 > se2, detail, t0, 300)


def test_criterion_07_thm3_bound(ordering_run):
    t0 = time.perf_counter()
    out, manifest, _ = ordering_run
    rows = final_values(out / f for f in manifest["run_files"])["momentumq_m1overgamma"]
    gamma = 0.95
    violations = 0
    ratios = []
    for seed, row in sorted(rows.items()):
        inputs = BoundInputs(gamma=gamma, m=1 / gamma, t_horizon=row["k"], confidence=0.05, n_pairs=64,
                             dbar=row["dbar_running"], dbar_source="measured", v_max=row["vmax_running"])
        bound = bound_thm3(inputs).bound
        ratios.append(row["value"] / bound)
        violations += row["value"] > bound
    report("criterion 7 tabular bound", violations <= 2,
           f"{violations} of 20 seeds violate; max loss/bound ratio {max(ratios):.4f}", t0)


def test_criterion_08_fa_reduction_and_onehot():
    t0 = time.perf_counter()
    mdp = lake4()
    fmap = rbf_features(4, 4, centers=3)
    sched = FaSchedule(alpha=0.3, alpha_mode="diminishing", beta=0.0)
    state = LinearQState.initial(np.zeros(fmap.dim), sched)
    theta = np.zeros(fmap.dim)
    mismatched = 0
    for k, t in zip(range(5000), markovian_stream(mdp, uniform_behavior(mdp), 8)):
        state = momentumq_fa_step(state, g_term(fmap, state.theta, t, mdp.gamma), k)
        theta = vanilla_fa_step(fmap, theta, t, sched.coefficients(k)[0], mdp.gamma)
        mismatched += not np.array_equal(state.theta, theta)
    onehot = onehot_features(16, 4)
    th = np.zeros(64)
    q = np.zeros((16, 4))
    worst = 0.0
    for k in range(1000):
        y = sample_next_states(mdp, rngmod.stream(8, rngmod.SWEEP, k))
        th = synchronous_fa_sweep(mdp, onehot, th, y, 1 / (k + 1))
        q = vanilla_step(mdp, q, k, 1 / (k + 1), None, y=y)
        worst = max(worst, sup_norm(onehot.q_values(th) - q))
    report("criterion 8 FA reduction and one-hot equivalence", mismatched == 0 and worst <= 1e-10,
           f"beta=0 steps differing from vanilla: {mismatched} of 5000; one-hot vs tabular max gap {worst:.1e}",
           t0, 60)


def test_criterion_09_thm2_rate_shape():
    t0 = time.perf_counter()
    mdp = build_frozenlake(GridSpec.standard(8), gamma=0.95)
    fmap = onehot_features(64, 4)
    beh = uniform_behavior(mdp)
    oracle = gbar_and_thetastar(mdp, fmap, beh, n_delta=0)
    sched = FaSchedule(alpha=1.0, alpha_mode="diminishing", beta=0.5, lam=0.9, output_mode="average")
    marks = [1_000, 10_000, 100_000]
    errs = []
    for seed in range(20):
        res = run_fa(markovian_stream(mdp, beh, seed), fmap, sched, marks[-1], mdp.gamma, checkpoints=marks,
                     eval_hook=lambda k, th: {"err": float(np.sum((th - oracle.theta_star) ** 2))})
        errs.append([row["err"] for row in res.metrics])
    mean = np.mean(errs, axis=0)
    ok = bool(mean[1] <= mean[0] and mean[2] <= mean[1])
    report("criterion 9 averaged-iterate error trend", ok,
           "mean |theta_out - theta*|^2 at T=1e3/1e4/1e5: " + " / ".join(f"{v:.4f}" for v in mean), t0, 900)


def test_criterion_10_mixing_time_and_constants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1010)
    bad_tau = 0
    for _ in range(1000):
        sigma = float(10 ** rng.uniform(-2, 2))
        rho = float(rng.uniform(0.01, 0.999))
        kappa = float(10 ** rng.uniform(-6, 1))
        k = 1
        while sigma * rho**k > kappa:
            k += 1
        bad_tau += mixing_time(sigma, rho, kappa) != k
    bad_const = 0
    for _ in range(1000):
        d, r = float(rng.uniform(0, 20)), float(rng.uniform(0, 5))
        gamma, m = float(rng.uniform(0.01, 0.99)), float(rng.uniform(1, 60))
        got = constants(BoundInputs(d_max=d, r_max=r, gamma=gamma, m=m))
        g_max = r + 2 * d
        eta1 = (2 + 2 * gamma) * d**2 + 2 * d * g_max
        eta2 = 6 * (1 + gamma) * d * g_max + 6 * g_max**2
        h = 2 * gamma * (m + int(m) + 2) + 2
        bad_const += not np.allclose(got, (g_max, eta1, eta2, h), rtol=1e-13, atol=0)
    report("criterion 10 mixing time and constants", bad_tau == 0 and bad_const == 0,
           f"mixing-time mismatches {bad_tau}/1000, constant mismatches {bad_const}/1000", t0, 5)


def test_criterion_11_determinism(ordering_run, tmp_path):
    t0 = time.perf_counter()
    out, manifest, _ = ordering_run
    run_experiment(ordering_config(tmp_path / "again"))
    differing = [f for f in manifest["run_files"] if (out / f).read_bytes() != (tmp_path / "again" / f).read_bytes()]
    report("criterion 11 determinism", not differing,
           f"{len(manifest['run_files']) - len(differing)} of {len(manifest['run_files'])} run files byte-identical",
           t0)


SMOKE = dict(
    env={"size": 32, "seed": 0, "density": 0.1, "gamma": 0.99},
    algos=[{"mode": "momentumq", "features": {"type": "tile", "tile": 1}, "alpha": 0.3,
            "alpha_mode": "constant", "beta": 0.5, "lam": 0.9, "output_mode": "average"}],
    T=2_000_000,
    seeds=list(range(5)),
    metric="return",
    eval_episodes=150,
    checkpoint_every=400_000,
    sampling="markovian",
    behavior={"type": "uniform", "restart": "uniform"},
)


def test_smoke_32x32_tile_features(tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(**SMOKE, output_dir=str(tmp_path / "smoke"))
    manifest = run_experiment(cfg)
    curves = np.array([[row["value"] for row in read_run_file(tmp_path / "smoke" / f)] for f in manifest["run_files"]])
    mean = curves.mean(axis=0)
    report("smoke 32x32 tile features", bool(mean[-1] > mean[0]),
           "mean greedy return per checkpoint: " + " / ".join(f"{v:.4f}" for v in mean), t0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
