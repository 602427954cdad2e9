"""Comparison methods run against the same world and candidate sets as the planner."""

from __future__ import annotations

import math

import numpy as np

from . import world as W
from .planner import PlanConfig, PlanResult, search
from .simulators import WorldSimulator

KINDS = ("random", "greedy0", "greedy1", "vanilla_mcts")


class BaselineError(ValueError):
    pass


def select_random(candidates, rng) -> int:
    if len(candidates) < 1:
        raise BaselineError("need at least one candidate")
    return int(rng.integers(len(candidates)))


def select_greedy0(candidates, reward_fn) -> int:
    """Argmax of a direct score per candidate; lowest index on ties."""
    if len(candidates) < 1:
        raise BaselineError("need at least one candidate")
    scores = np.array([float(reward_fn(c)) for c in candidates])
    if not np.all(np.isfinite(scores)):
        raise BaselineError("candidate scores contain non-finite values")
    return int(np.argmax(scores))


def select_greedy1(sim, state, candidates, samples_per_action: int = 5, rng=None) -> int:
    """Argmax of the Monte Carlo mean of one simulated step per candidate.

    ``sim`` is either a ``LatentWorld`` (candidates are action ids) or any
    simulator exposing ``transition(state, action, rng)``.
    """
    if len(candidates) < 1:
        raise BaselineError("need at least one candidate")
    if samples_per_action < 1:
        raise BaselineError("samples_per_action must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    if isinstance(sim, W.LatentWorld):
        world = sim
        transition = lambda s, a, g: W.step(world, s, a, g)  # noqa: E731
    else:
        transition = sim.transition
    means = []
    for c in candidates:
        total = 0.0
        for _ in range(samples_per_action):
            total += transition(state, c, rng)[1]
        means.append(total / samples_per_action)
    return int(np.argmax(means))


def greedy0_scores(world: W.LatentWorld, state: int, candidates) -> list[float]:
    """Ground-truth expected immediate reward of each candidate action."""
    return [world.expected_reward(state, a) for a in candidates]


def vanilla_mcts(world: W.LatentWorld, state: int, candidates, config: PlanConfig,
                 profile: W.SimLatencyProfile | None = None, clock=None) -> tuple[int, PlanResult]:
    """The planner's tree search, driven by direct (slow) world queries."""
    if len(candidates) < 1:
        raise BaselineError("need at least one candidate")
    sim = WorldSimulator(world, profile or W.SimLatencyProfile(), clock)
    before = sim.queries
    result = search(sim, state, list(candidates), config, clock)
    result.stats["sim_queries"] = sim.queries - before
    return result.index, result


def max_full_rollouts(budget_ms: float, delay_ms: float, depth: int) -> int:
    """Upper bound on complete depth-``depth`` simulations a latency budget allows."""
    if delay_ms <= 0:
        return math.inf
    return int(budget_ms // (delay_ms * depth))
