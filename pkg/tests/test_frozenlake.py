import itertools

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from momentq.frozenlake import (
    DOWN,
    LEFT,
    MAPS,
    RIGHT,
    UP,
    GridSpec,
    ReplayBuffer,
    Transition,
    UnreachableGoalError,
    behavior_chain,
    build_frozenlake,
    epsilon_greedy,
    evaluate_greedy_return,
    generate_grid,
    goal_reachable,
    markovian_stream,
    replay_stream,
    uniform_behavior,
)
from momentq.mdp import TabularMdp, solve_qstar, stationary_distribution


def take(stream, n):
    return list(itertools.islice(stream, n))


class TestGridSpec:
    def test_standard_maps(self):
        for n in (4, 8):
            spec = GridSpec.standard(n)
            assert spec.size == n and spec.start == 0

    def test_text_round_trip(self):
        spec = GridSpec.standard(8)
        assert GridSpec.from_text(spec.to_text()).tiles == spec.tiles

    @pytest.mark.parametrize(
        "tiles, match",
        [
            (("SF", "FF"), "G"),
            (("SS", "FG"), "one S"),
            (("SX", "FG"), "unknown"),
            (("SFF", "FG"), "2x2"),
        ],
    )
    def test_invalid(self, tiles, match):
        with pytest.raises(ValueError, match=match):
            GridSpec(size=len(tiles), tiles=tiles)

    def test_unreachable_goal(self):
        with pytest.raises(UnreachableGoalError):
            GridSpec(size=3, tiles=("SFH", "FHF", "HFG"))

    def test_bfs(self):
        assert goal_reachable(("SH", "FG"))
        assert not goal_reachable(("SH", "HG"))


class TestBuild:
    def test_deterministic_two_by_two(self):
        mdp = build_frozenlake(GridSpec(size=2, tiles=("SF", "FG"), slip=0.0))
        p = mdp.dense_kernel()
        assert p[0, RIGHT, 1] == 1.0
        assert p[1, DOWN, 3] == 1.0
        assert mdp.reward[0, RIGHT] == 0.0 and mdp.reward[1, DOWN] == 1.0

    def test_wall_keeps_agent_in_place(self):
        mdp = build_frozenlake(GridSpec(size=2, tiles=("SF", "FG"), slip=0.0))
        p = mdp.dense_kernel()
        assert p[0, LEFT, 0] == 1.0 and p[0, UP, 0] == 1.0

    def test_slippery_rows(self, lake4):
        p = lake4.dense_kernel()
        for x in range(16):
            if lake4.terminal[x]:
                continue
            for u in range(4):
                assert np.count_nonzero(p[x, u]) <= 3
                assert_allclose(p[x, u].sum(), 1.0, atol=1e-12)

    def test_slip_masses_in_open_cell(self):
        mdp = build_frozenlake(GridSpec(size=3, tiles=("SFF", "FFF", "FFG")))
        p = mdp.dense_kernel()
        centre = 4
        assert_allclose(p[centre, RIGHT, 5], 1 / 3)
        assert_allclose(p[centre, RIGHT, 1], 1 / 3)
        assert_allclose(p[centre, RIGHT, 7], 1 / 3)
        assert p[centre, RIGHT, 3] == 0.0

    def test_slip_parameter(self):
        mdp = build_frozenlake(GridSpec(size=3, tiles=("SFF", "FFF", "FFG"), slip=0.2))
        p = mdp.dense_kernel()
        assert_allclose(p[4, DOWN, [7, 3, 5]], [0.8, 0.1, 0.1])

    def test_absorbing_terminals(self, lake4):
        p = lake4.dense_kernel()
        for x in np.flatnonzero(lake4.terminal):
            for u in range(4):
                assert p[x, u, x] == 1.0
                assert lake4.reward[x, u] == 0.0

    def test_reward_is_goal_entry_probability(self, lake4):
        goal = MAPS[4][3].index("G") + 12
        assert_allclose(lake4.reward, lake4.dense_kernel()[:, :, goal] * ~lake4.terminal[:, None])

    def test_solvable(self, lake4):
        q, _ = solve_qstar(lake4)
        assert q[lake4.start_state].max() > 0

    @given(st.integers(2, 12), st.integers(0, 10_000), st.floats(0.0, 0.3))
    @settings(max_examples=40, deadline=None)
    def test_generated_maps_valid(self, size, seed, density):
        spec = generate_grid(size, seed, density)
        assert goal_reachable(spec.tiles)
        mdp = build_frozenlake(spec)
        assert mdp.n_states == size * size and mdp.n_actions == 4
        assert 0.0 <= mdp.reward.min() and mdp.reward.max() <= 1.0

    def test_generation_is_reproducible(self):
        assert generate_grid(16, 5).tiles == generate_grid(16, 5).tiles
        assert generate_grid(16, 5).tiles != generate_grid(16, 6).tiles

    def test_generation_layout(self):
        spec = generate_grid(10, 1, density=0.3)
        assert spec.tiles[0][0] == "S" and spec.tiles[-1][-1] == "G"

    def test_impossible_density(self):
        with pytest.raises(UnreachableGoalError):
            generate_grid(6, 0, density=0.95, max_tries=20)


class TestMarkovianStream:
    def test_same_seed_same_stream(self, lake4):
        beh = uniform_behavior(lake4)
        assert take(markovian_stream(lake4, beh, 3), 500) == take(markovian_stream(lake4, beh, 3), 500)
        assert take(markovian_stream(lake4, beh, 3), 500) != take(markovian_stream(lake4, beh, 4), 500)

    def test_deterministic_single_action(self):
        kernel = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
        mdp = TabularMdp(3, 1, kernel, np.zeros((3, 1)), 0.5, 1.0, start_state=0)
        xs = [t.x for t in take(markovian_stream(mdp, np.ones((3, 1)), 0), 7)]
        assert xs == [0, 1, 2, 0, 1, 2, 0]

    def test_transitions_consistent(self, lake4):
        p = lake4.dense_kernel()
        prev = None
        for t in take(markovian_stream(lake4, uniform_behavior(lake4), 1), 2000):
            assert p[t.x, t.u, t.y] > 0
            assert t.r == lake4.reward[t.x, t.u]
            if prev is not None:
                assert t.x == (lake4.start_state if lake4.terminal[prev.y] else prev.y)
            prev = t

    def test_horizon(self, lake4):
        assert len(list(markovian_stream(lake4, uniform_behavior(lake4), 0, horizon=37))) == 37

    def test_occupancy_matches_stationary(self):
        kernel = np.array([[0.5, 0.5, 0.0], [0.2, 0.5, 0.3], [0.3, 0.0, 0.7]])
        mdp = TabularMdp(3, 1, kernel, np.zeros((3, 1)), 0.5, 1.0, start_state=0)
        mu = stationary_distribution(kernel)
        xs = np.fromiter((t.x for t in take(markovian_stream(mdp, np.ones((3, 1)), 2), 1_000_000)), int)
        freq = np.bincount(xs, minlength=3) / xs.size
        assert 0.5 * np.abs(freq - mu).sum() <= 0.01

    def test_restart_chain_occupancy(self, lake4):
        beh = uniform_behavior(lake4)
        for restart in ("start", "uniform"):
            mu = stationary_distribution(behavior_chain(lake4, beh, restart))
            xs = np.fromiter((t.x for t in take(markovian_stream(lake4, beh, 5, restart=restart), 400_000)), int)
            freq = np.bincount(xs, minlength=16) / xs.size
            assert 0.5 * np.abs(freq - mu).sum() <= 0.01
            assert_allclose(mu[lake4.terminal], 0.0, atol=1e-12)

    def test_behavior_probabilities(self, lake4):
        q = np.random.default_rng(0).random((16, 4))
        pi = epsilon_greedy(q, 0.2)
        assert_allclose(pi.sum(axis=1), 1.0)
        assert np.all(pi >= 0.05 - 1e-12)
        us = np.fromiter((t.u for t in take(markovian_stream(lake4, pi, 0), 100_000) if t.x == 0), int)
        assert_allclose(np.bincount(us, minlength=4) / us.size, pi[0], atol=0.02)


class TestReplay:
    @staticmethod
    def numbered(n=None):
        return (Transition(i, 0, 0.0, i) for i in (itertools.count() if n is None else range(n)))

    def test_capacity_one_returns_latest(self):
        buf = ReplayBuffer(1, seed=0)
        out = take(replay_stream(buf, self.numbered(), batch=1, warmup=1), 20)
        assert [t.x for t in out] == list(range(1, 21))

    def test_insert_rate_zero_freezes_buffer(self):
        buf = ReplayBuffer(10, seed=0)
        stream = replay_stream(buf, self.numbered(), batch=4, warmup=10, insert_rate=0)
        take(stream, 4)
        before = buf.contents()
        out = take(stream, 400)
        assert buf.contents() == before
        assert {t.x for t in out} <= set(range(10))

    def test_uniform_chi_square(self):
        buf = ReplayBuffer(100, seed=3)
        stream = replay_stream(buf, self.numbered(), batch=100, warmup=100, insert_rate=0)
        xs = np.array([t.x for t in take(stream, 100_000)])
        counts = np.bincount(xs, minlength=100)
        assert scipy.stats.chisquare(counts).pvalue > 0.01

    def test_never_returns_uninserted(self):
        buf = ReplayBuffer(50, seed=1)
        out = take(replay_stream(buf, self.numbered(), batch=3, warmup=5), 300)
        assert all(t.x < 5 + 100 for t in out)

    def test_ring_buffer_evicts_oldest(self):
        buf = ReplayBuffer(3, seed=0)
        for t in self.numbered(5):
            buf.add(t)
        assert sorted(t.x for t in buf.contents()) == [2, 3, 4]

    def test_empty_sample_raises(self):
        with pytest.raises(RuntimeError):
            ReplayBuffer(4, seed=0).sample(1)

    def test_feeder_too_short_for_warmup(self):
        with pytest.raises((RuntimeError, StopIteration)):
            take(replay_stream(ReplayBuffer(10, 0), self.numbered(3), warmup=10), 1)


class TestEvaluation:
    def test_optimal_policy_beats_fixed_left(self, lake4, lake4_qstar):
        good = evaluate_greedy_return(lake4, lake4_qstar, seed=0, episodes=300)
        left = evaluate_greedy_return(lake4, np.zeros((16, 4)), seed=0, episodes=300)
        assert good > 0.3 and left < good

    def test_matches_exact_value_on_deterministic_map(self):
        mdp = build_frozenlake(GridSpec(size=2, tiles=("SF", "FG"), slip=0.0))
        q, _ = solve_qstar(mdp)
        assert evaluate_greedy_return(mdp, q, seed=0, episodes=10) == 1.0

    def test_reproducible(self, lake4, lake4_qstar):
        a = evaluate_greedy_return(lake4, lake4_qstar, seed=5, episodes=50)
        assert a == evaluate_greedy_return(lake4, lake4_qstar, seed=5, episodes=50)

    def test_mean_matches_exact_policy_value(self, lake4, lake4_qstar):
        # undiscounted success probability of the greedy policy from Start
        pi = lake4_qstar.argmax(axis=1)
        p = lake4.dense_kernel()[np.arange(16), pi]
        r = lake4.reward[np.arange(16), pi]
        live = ~lake4.terminal
        v = np.zeros(16)
        v[live] = np.linalg.solve(np.eye(live.sum()) - p[np.ix_(live, live)], r[live])
        est = evaluate_greedy_return(lake4, lake4_qstar, seed=1, episodes=4000, max_steps=2000)
        se = np.sqrt(v[0] * (1 - v[0]) / 4000)
        assert abs(est - v[0]) <= 4 * se
