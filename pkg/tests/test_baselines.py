import numpy as np
import pytest

from semplan import baselines as B
from semplan import planner as P
from semplan import world as W
from semplan.clock import VirtualClock
from semplan.simulators import KernelStubSimulator, LatentEmbedder


def test_random_single_candidate(rng):
    assert B.select_random(["x"], rng) == 0


def test_random_uniform():
    rng = np.random.default_rng(0)
    counts = np.bincount([B.select_random(range(5), rng) for _ in range(10000)], minlength=5)
    assert np.all(np.abs(counts / 10000 - 0.2) < 0.015)


def test_random_reproducible():
    def draws(seed):
        g = np.random.default_rng(seed)
        return [B.select_random(range(7), g) for _ in range(20)]
    assert draws(3) == draws(3) != draws(4)


def test_random_empty(rng):
    with pytest.raises(B.BaselineError):
        B.select_random([], rng)


def test_greedy0_examples():
    assert B.select_greedy0([1.0, 3.0, 2.0], lambda c: c) == 1
    assert B.select_greedy0([4.0, 4.0, 4.0], lambda c: c) == 0


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_greedy0_rejects_non_finite(bad):
    with pytest.raises(B.BaselineError):
        B.select_greedy0([1.0, bad], lambda c: c)


def test_greedy0_scores_are_expected_rewards(chain):
    assert B.greedy0_scores(chain, 0, [0, 1]) == [1.0, 0.0]


def test_greedy1_deterministic_world_is_exact_one_step(chain, rng):
    assert B.select_greedy1(chain, 0, [1, 0], samples_per_action=1, rng=rng) == 1
    assert B.select_greedy1(chain, 0, [0, 1], samples_per_action=1, rng=rng) == 0


def test_greedy1_large_sample_estimate():
    world = W.random_world(seed=9)
    rng = np.random.default_rng(0)
    for l in range(4):
        exact = [world.expected_reward(l, a) for a in range(world.n_actions)]
        est = [np.mean([W.step(world, l, a, rng)[1] for _ in range(10000)]) for a in range(world.n_actions)]
        assert np.max(np.abs(np.array(est) - exact)) < 0.02
        gap = sorted(exact)[-1] - sorted(exact)[-2]
        if gap > 0.05:
            assert B.select_greedy1(world, l, range(world.n_actions), 10000, rng) == int(np.argmax(exact))


def test_greedy1_myopia_fails_on_default_world():
    world = W.default_world()
    rng = np.random.default_rng(1)
    differs = 0
    for l in world.starts():
        best, _ = W.expectimax(world, l, 5, 0.9)
        differs += B.select_greedy1(world, l, range(world.n_actions), 2000, rng) != best
    assert differs >= 1


def test_greedy1_accepts_simulators(chain, rng):
    stub = KernelStubSimulator(chain)
    cands = [chain.action_vector(0, 1), chain.action_vector(0, 0)]
    assert B.select_greedy1(stub, chain.embedding[0], cands, 3, rng) == 1


def test_greedy1_validation(chain, rng):
    with pytest.raises(B.BaselineError):
        B.select_greedy1(chain, 0, [0], samples_per_action=0, rng=rng)
    with pytest.raises(B.BaselineError):
        B.select_greedy1(chain, 0, [], rng=rng)


# ------------------------------------------------------------------ vanilla tree search

def test_vanilla_single_iteration():
    world = W.random_world(seed=0)
    cfg = P.PlanConfig(m=3, depth=4, budget_iters=1)
    _, res = B.vanilla_mcts(world, 0, [0, 1, 2], cfg, clock=VirtualClock())
    assert res.stats["sim_queries"] == 4  # one expansion plus a 3-step rollout
    assert res.stats["nodes"] == 2 and sum(res.visits) == 1


def test_vanilla_query_count_is_iterations_times_depth():
    world = W.random_world(seed=1)
    cfg = P.PlanConfig(m=4, depth=3, budget_iters=4)
    _, res = B.vanilla_mcts(world, 0, [0, 1, 2, 3], cfg, clock=VirtualClock())
    assert res.stats["sim_queries"] == 4 * 3


def test_vanilla_latency_bound():
    world = W.random_world(seed=2)
    clock = VirtualClock()
    cfg = P.PlanConfig(m=4, depth=6, budget_iters=None, budget_ms=1000)
    _, res = B.vanilla_mcts(world, 0, [0, 1, 2, 3], cfg, W.SimLatencyProfile(delay_ms=50), clock)
    bound = B.max_full_rollouts(1000, 50, 6)
    assert bound == 3
    # the final iteration started before the deadline and was allowed to finish past it
    assert res.stats["elapsed_s"] > 1.0
    assert res.stats["iterations"] - 1 <= bound


def test_vanilla_matches_expectimax_on_easy_world(chain):
    _, res = B.vanilla_mcts(chain, 0, [0, 1], P.PlanConfig(m=2, depth=3, budget_iters=300), clock=VirtualClock())
    assert res.index == W.expectimax(chain, 0, 3, 0.9)[0]


@pytest.mark.parametrize("chance", P.CHANCE_POLICIES)
def test_vanilla_and_semantic_search_build_identical_trees(chance):
    world = W.random_world(seed=3)
    cands = world.sample_actions(5, 3, np.random.default_rng(0))
    cfg = P.PlanConfig(m=3, depth=3, lam=1.0, budget_iters=500, chance=chance, seed=8)
    sem = P.plan(KernelStubSimulator(world), LatentEmbedder(world), 5, cands, cfg, VirtualClock())
    idx, van = B.vanilla_mcts(world, 5, cands, cfg, clock=VirtualClock())
    assert sem.index == idx and sem.visits == van.visits
    assert np.allclose(sem.q, van.q, rtol=0, atol=1e-12)
    assert [n.n for n in sem.tree.nodes] == [n.n for n in van.tree.nodes]


def test_vanilla_empty_candidates(chain):
    with pytest.raises(B.BaselineError):
        B.vanilla_mcts(chain, 0, [], P.PlanConfig())


def test_max_full_rollouts_zero_delay():
    assert B.max_full_rollouts(1000, 0, 6) == float("inf")
