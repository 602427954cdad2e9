import json
from functools import lru_cache

import numpy as np
import pytest
from scipy.stats import chisquare

from semplan import world as W
from semplan.clock import VirtualClock


def _brute_value(world, gamma):
    @lru_cache(maxsize=None)
    def v(l, h):
        if h == 0:
            return 0.0
        best = -np.inf
        for a in range(world.n_actions):
            total = 0.0
            for nxt in range(world.n_states):
                p = world.kernel[l, a, nxt]
                if p:
                    total += p * (world.rewards[l, a, nxt] + gamma * v(nxt, h - 1))
            best = max(best, total)
        return best
    return v


def test_expectimax_chain_prefers_delayed_payoff(chain):
    # action 0 pays 1 now; action 1 pays gamma later. gamma=1 ties, gamma<1 favours 0.
    _, q = W.expectimax_table(chain, 2, 0.9)
    assert q[0].tolist() == pytest.approx([1.0, 0.9])
    assert W.expectimax(chain, 0, 2, 0.9) == (0, pytest.approx(1.0))


def test_expectimax_zero_horizon(chain):
    assert W.expectimax(chain, 0, 0, 0.9) == (0, 0.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_expectimax_matches_recursive_enumeration(seed):
    world = W.random_world(n_states=6, n_actions=3, seed=seed)
    v_table, _ = W.expectimax_table(world, 4, 0.8)
    v = _brute_value(world, 0.8)
    assert [v(l, 4) for l in range(6)] == pytest.approx(v_table.tolist(), abs=1e-12)


def test_policy_value_of_greedy_equals_optimum_for_horizon_one():
    world = W.random_world(seed=3)
    _, q = W.expectimax_table(world, 1, 1.0)
    policy = np.eye(world.n_actions)[np.argmax(q, axis=1)]
    assert np.allclose(W.policy_value(world, policy, 1), q.max(axis=1))


def test_expectimax_rejects_negative_horizon(chain):
    with pytest.raises(ValueError):
        W.expectimax_table(chain, -1, 0.9)


# ------------------------------------------------------------------ validation

def test_kernel_row_must_sum_to_one(chain):
    kernel = chain.kernel.copy()
    kernel[0, 0, 1] = 0.9
    with pytest.raises(W.WorldError):
        W.LatentWorld(kernel, chain.rewards, chain.embedding, chain.mid_embedding)


def test_non_injective_embedding_rejected(chain):
    emb = chain.embedding.copy()
    emb[2] = emb[0]
    with pytest.raises(W.WorldError, match="injective"):
        W.LatentWorld(chain.kernel, chain.rewards, emb, chain.mid_embedding)


def test_too_many_actions_rejected():
    k = np.ones((2, W.MAX_ACTIONS + 1, 2)) / 2
    with pytest.raises(W.WorldError):
        W.LatentWorld(k, np.zeros_like(k), np.eye(2), np.zeros((2, W.MAX_ACTIONS + 1, 2)))


def test_step_invalid_action(chain, rng):
    with pytest.raises(W.WorldError):
        W.step(chain, 0, 5, rng)


def test_step_frequencies_match_kernel():
    world = W.random_world(seed=4)
    rng = np.random.default_rng(0)
    counts = np.zeros(world.n_states)
    for _ in range(20000):
        counts[W.step(world, 2, 1, rng)[0]] += 1
    support = world.kernel[2, 1] > 0
    assert counts[~support].sum() == 0
    assert chisquare(counts[support], 20000 * world.kernel[2, 1, support]).pvalue > 1e-3


def test_step_reward_comes_from_table(chain, rng):
    assert W.step(chain, 0, 0, rng) == (1, 1.0)
    assert W.step(chain, 0, 1, rng) == (2, 0.0)


# ------------------------------------------------------------------ persistence

def test_world_round_trip(tmp_path):
    world = W.default_world(seed=2)
    W.save_world(tmp_path / "w.json", world)
    back = W.load_world(tmp_path / "w.json")
    assert np.allclose(back.kernel, world.kernel, atol=1e-15)
    assert np.array_equal(back.embedding, world.embedding)
    assert back.starts() == world.starts() and back.names == world.names


def test_world_from_seed_only_embedding(tmp_path):
    doc = {"states": 2, "actions": 1, "n": 3, "embedding_seed": 5,
           "kernel": [[[0.3333, 0.6667]], [[1.0, 0.0]]], "rewards": [[[0, 1]], [[0, 0]]]}
    (tmp_path / "w.json").write_text(json.dumps(doc))
    world = W.load_world(tmp_path / "w.json")
    assert world.dim == 3
    assert np.allclose(world.kernel.sum(axis=2), 1.0, atol=1e-15)


def test_decode_round_trip_and_nearest():
    world = W.random_world(seed=1)
    for l in range(world.n_states):
        assert world.decode_state(world.embedding[l]) == l
        assert world.decode_state(world.embedding[l] + 1e-3) == l
        for a in range(world.n_actions):
            assert world.decode_action(l, world.action_vector(l, a)) == a


def test_sample_actions_distinct_until_exhausted(rng):
    world = W.random_world(n_actions=4, seed=0)
    assert len(set(world.sample_actions(0, 4, rng))) == 4
    assert len(world.sample_actions(0, 7, rng)) == 7


# ------------------------------------------------------------------ latency

def test_slow_simulate_charges_delay_and_counts():
    world = W.random_world(seed=0)
    clock = VirtualClock()
    profile = W.SimLatencyProfile(delay_ms=50)
    rng = np.random.default_rng(0)
    for _ in range(3):
        W.slow_simulate(world, 0, 0, profile, rng, clock)
    assert clock.now() == pytest.approx(0.15)
    assert profile.queries == 3


def test_jitter_does_not_touch_transition_stream():
    world = W.random_world(seed=0)
    a = [W.slow_simulate(world, 0, 1, W.SimLatencyProfile(jitter_ms=5, jitter_seed=s),
                         np.random.default_rng(9), VirtualClock())[0] for s in (1, 2)]
    assert a[0] == a[1]


def test_negative_delay_rejected():
    with pytest.raises(ValueError):
        W.SimLatencyProfile(delay_ms=-1)


def test_virtual_clock_rejects_negative_wait():
    with pytest.raises(ValueError):
        VirtualClock().wait(-0.1)


# ------------------------------------------------------------------ builders and datasets

def test_default_world_rewards_are_potential_differences():
    world = W.default_world()
    diff = world.potential[None, None, :] - world.potential[:, None, None]
    assert np.allclose(world.rewards, np.broadcast_to(diff, world.rewards.shape))
    assert world.n_states == 12 and world.n_actions == 4


def test_default_world_myopic_trap():
    # the best immediate action from a neutral start is not the best 5-turn action
    world = W.default_world()
    disagree = 0
    for l in world.starts():
        _, q1 = W.expectimax_table(world, 1, 0.9)
        a5, _ = W.expectimax(world, l, 5, 0.9)
        disagree += int(np.argmax(q1[l]) != a5)
    assert disagree >= 1


def test_reward_dataset_labels_are_potentials():
    world = W.default_world()
    recs = W.gen_reward_dataset(world, 50, seed=0)
    for r in recs:
        l = world.decode_state(r.s)
        assert r.y == world.potential[l]


def test_reward_dataset_needs_potential():
    with pytest.raises(W.WorldError):
        W.gen_reward_dataset(W.random_world(), 5)


def test_transition_dataset_consistent_with_kernel():
    world = W.random_world(seed=2)
    recs = W.gen_transition_dataset(world, 300, seed=0)
    assert len(recs) == 300
    for r in recs:
        l = world.decode_state(r.s)
        a = world.decode_action(l, r.action)
        assert world.kernel[l, a, world.decode_state(r.s_next)] > 0


def test_transition_dataset_seeded():
    world = W.random_world(seed=2)
    a = W.gen_transition_dataset(world, 20, seed=4)
    b = W.gen_transition_dataset(world, 20, seed=4)
    assert all(np.array_equal(x.s_next, y.s_next) for x, y in zip(a, b))


def _two_state(p0):
    kernel = np.zeros((2, 1, 2))
    kernel[0, 0] = [p0, 1 - p0]
    kernel[1, 0] = [1.0, 0.0]
    return W.LatentWorld(kernel, np.zeros_like(kernel), np.eye(2), np.eye(2)[:, None, :] * 2)


def test_deterministic_row_and_zero_rewards(rng):
    world = _two_state(0.0)
    for _ in range(50):
        assert W.step(world, 0, 0, rng) == (1, 0.0)
        assert W.step(world, 1, 0, rng) == (0, 0.0)


def test_even_row_frequency(rng):
    world = _two_state(0.5)
    hits = sum(W.step(world, 0, 0, rng)[0] == 0 for _ in range(10000))
    assert abs(hits / 10000 - 0.5) < 0.02


def test_deterministic_two_cycle_gives_two_patterns():
    recs = W.gen_transition_dataset(_two_state(0.0), 100, seed=0)
    assert len({(r.s.tobytes(), r.s_next.tobytes()) for r in recs}) == 2
    assert all(len(r.s) == 2 for r in recs)


def test_gamma_zero_is_myopic():
    world = W.random_world(seed=6)
    expected = [int(np.argmax([world.expected_reward(l, a) for a in range(world.n_actions)]))
                for l in range(world.n_states)]
    assert [W.expectimax(world, l, 4, 0.0)[0] for l in range(world.n_states)] == expected


def test_value_monotone_in_horizon_for_nonnegative_rewards():
    world = W.random_world(seed=7)
    world = W.LatentWorld(world.kernel, np.abs(world.rewards), world.embedding, world.mid_embedding)
    values = [W.expectimax_table(world, h, 0.9)[0] for h in range(6)]
    assert all(np.all(b >= a) for a, b in zip(values, values[1:]))


def test_size_guard(monkeypatch, chain):
    monkeypatch.setattr(W, "EXPECTIMAX_LIMIT", 10)
    with pytest.raises(W.WorldError):
        W.expectimax(chain, 0, 5, 0.9)


def test_zero_latency_matches_step():
    world = W.random_world(seed=0)
    a = [W.slow_simulate(world, 1, 2, W.SimLatencyProfile(), np.random.default_rng(4)) for _ in range(1)]
    assert a[0] == W.step(world, 1, 2, np.random.default_rng(4))


def test_real_latency_is_spent():
    import time
    world, profile = W.random_world(seed=0), W.SimLatencyProfile(delay_ms=50)
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _ in range(10):
        W.slow_simulate(world, 0, 0, profile, rng)
    assert time.perf_counter() - t0 >= 0.5 and profile.queries == 10
