"""Simulators the tree search can run on.

A simulator offers ``sample_actions(state, m, rng)``, ``transition(state,
action, rng) -> (next_state, reward)`` and ``key(state)`` (a hashable
identity used to merge identical chance outcomes).

* ``SemanticSimulator``: learned transition model plus reward model, in
  embedding space.
* ``KernelStubSimulator``: exact world kernel, also in embedding space;
  decodes points back to latents.
* ``WorldSimulator``: latent world with injected latency, the stand-in for
  an expensive environment simulator.

The two world-backed simulators consume the random stream identically, so
the same seed gives the same tree in either space.
"""

from __future__ import annotations

import numpy as np

from . import world as W
from .reward import RewardModel
from .transition import TransitionModel


class SemanticSimulator:
    def __init__(self, transition: TransitionModel, reward: RewardModel, clock=None,
                 step_cost_ms: float = 0.0):
        self.transition_model = transition
        self.reward_model = reward
        self.clock = clock
        self.step_cost_s = step_cost_ms / 1000.0
        self.queries = 0

    def sample_actions(self, h, m, rng):
        return list(self.transition_model.action.sample_many(h, m, rng))

    def transition(self, h, h_a, rng):
        if self.clock is not None and self.step_cost_s:
            self.clock.wait(self.step_cost_s)
        self.queries += 1
        x = np.concatenate([h, h_a])
        nxt = self.transition_model.next_state.sample(x, rng)
        return nxt, self.reward_model.value(nxt) - self.reward_model.value(h)

    @staticmethod
    def key(h):
        return h.tobytes()


class KernelStubSimulator:
    """Exact-kernel stand-in for learned models, for oracle checks."""

    def __init__(self, world: W.LatentWorld):
        self.world = world
        self.queries = 0

    def sample_actions(self, h, m, rng):
        l = self.world.decode_state(h)
        return [self.world.action_vector(l, a) for a in self.world.sample_actions(l, m, rng)]

    def transition(self, h, h_a, rng):
        l = self.world.decode_state(h)
        a = self.world.decode_action(l, h_a)
        self.queries += 1
        nxt, r = W.step(self.world, l, a, rng)
        return self.world.embedding[nxt], r

    # transition-model style access
    def sample_action(self, h, rng):
        return self.sample_actions(h, 1, rng)[0]

    def sample_next_state(self, h, h_a, rng):
        return self.transition(h, h_a, rng)[0]

    @staticmethod
    def key(h):
        return h.tobytes()


class WorldSimulator:
    """Latent-space simulator; every transition is a (possibly slow) query."""

    def __init__(self, world: W.LatentWorld, profile: W.SimLatencyProfile | None = None, clock=None):
        self.world = world
        self.profile = profile or W.SimLatencyProfile()
        self.clock = clock

    @property
    def queries(self) -> int:
        return self.profile.queries

    def sample_actions(self, l, m, rng):
        return self.world.sample_actions(l, m, rng)

    def transition(self, l, a, rng):
        return W.slow_simulate(self.world, l, a, self.profile, rng, self.clock)

    @staticmethod
    def key(l):
        return l


class LatentEmbedder:
    """Embedder over a latent world: contexts are latent ids, candidates action ids."""

    def __init__(self, world: W.LatentWorld):
        self.world = world

    def embed(self, l):
        return self.world.embedding[l]

    def embed_after(self, l, a):
        return self.world.mid_embedding[l, a]


class AdditiveEmbedder:
    """f(x) = x and f(context + candidate) = context + candidate."""

    def embed(self, c):
        return np.asarray(c, dtype=float)

    def embed_after(self, c, a):
        return np.asarray(c, dtype=float) + np.asarray(a, dtype=float)
