"""Finite latent MDP with an injective embedding into R^n.

The world plays four roles: it generates training transitions, it is the
true environment benchmarks are scored on, it can be wrapped with injected
latency to stand in for an expensive simulator, and it is small enough for
exact finite-horizon dynamic programming.

Each agent action at latent state ``l`` lands on an intermediate latent
``(l, a)`` with its own embedding ``mid_embedding[l, a]``; the environment
then answers with ``l' ~ kernel[l, a]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clock import RealClock
from .dataio import RewardRecord, TransitionRecord

MAX_STATES = 64
MAX_ACTIONS = 8
EXPECTIMAX_LIMIT = 10_000_000


class WorldError(ValueError):
    pass


@dataclass
class LatentWorld:
    kernel: np.ndarray  # (L, A, L) rows sum to 1
    rewards: np.ndarray  # (L, A, L)
    embedding: np.ndarray  # (L, n)
    mid_embedding: np.ndarray  # (L, A, n)
    potential: np.ndarray | None = None  # (L,) when rewards are potential differences
    start_states: list[int] | None = None
    seed: int = 0
    names: list[str] | None = None
    _state_index: dict = field(default=None, init=False, repr=False)
    _action_index: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.embedding = np.asarray(self.embedding, dtype=float)
        self.mid_embedding = np.asarray(self.mid_embedding, dtype=float)
        n_l, n_a, n_l2 = self.kernel.shape
        if n_l != n_l2 or not 1 <= n_l <= MAX_STATES or not 1 <= n_a <= MAX_ACTIONS:
            raise WorldError(f"kernel shape {self.kernel.shape} out of range")
        if self.rewards.shape != self.kernel.shape:
            raise WorldError("reward table must match the kernel shape")
        if np.any(self.kernel < 0) or np.max(np.abs(self.kernel.sum(axis=2) - 1.0)) > 1e-12:
            raise WorldError("kernel rows must be distributions summing to 1 within 1e-12")
        if not np.all(np.isfinite(self.rewards)):
            raise WorldError("rewards must be finite")
        if self.embedding.shape[0] != n_l or self.mid_embedding.shape[:2] != (n_l, n_a):
            raise WorldError("embedding tables do not match the state/action counts")
        if self.mid_embedding.shape[2] != self.embedding.shape[1]:
            raise WorldError("state and action embeddings must share a dimension")
        for table, what in ((self.embedding, "state"), (self.mid_embedding.reshape(-1, self.dim), "mid")):
            d = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=2)
            np.fill_diagonal(d, np.inf)
            if d.min() <= 0:
                raise WorldError(f"{what} embedding is not injective")
        if self.potential is not None:
            self.potential = np.asarray(self.potential, dtype=float)
        self._cdf = np.cumsum(self.kernel, axis=2)
        self._state_index = {self.embedding[l].tobytes(): l for l in range(n_l)}
        self._action_index = [
            {(self.mid_embedding[l, a] - self.embedding[l]).tobytes(): a for a in range(n_a)}
            for l in range(n_l)]
        self._action_vectors = self.mid_embedding - self.embedding[:, None, :]

    # -------------------------------------------------------------- basics
    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def starts(self) -> list[int]:
        return list(self.start_states) if self.start_states else list(range(self.n_states))

    def action_vector(self, l: int, a: int) -> np.ndarray:
        return self._action_vectors[l, a]

    def decode_state(self, h) -> int:
        l = self._state_index.get(np.asarray(h, dtype=float).tobytes())
        if l is None:
            l = int(np.argmin(np.linalg.norm(self.embedding - h, axis=1)))
        return l

    def decode_action(self, l: int, h_a) -> int:
        a = self._action_index[l].get(np.asarray(h_a, dtype=float).tobytes())
        if a is None:
            a = int(np.argmin(np.linalg.norm(self._action_vectors[l] - h_a, axis=1)))
        return a

    def sample_actions(self, l: int, m: int, rng: np.random.Generator) -> list[int]:
        """``m`` action ids: distinct while the action set lasts, then with replacement."""
        perm = rng.permutation(self.n_actions)
        ids = [int(a) for a in perm[:m]]
        if m > self.n_actions:
            ids += [int(a) for a in rng.integers(self.n_actions, size=m - self.n_actions)]
        return ids

    def expected_reward(self, l: int, a: int) -> float:
        return float(self.kernel[l, a] @ self.rewards[l, a])

    # ----------------------------------------------------------- persistence
    def to_dict(self) -> dict:
        return {
            "states": self.n_states,
            "actions": self.n_actions,
            "n": self.dim,
            "embedding_seed": self.seed,
            "kernel": self.kernel.tolist(),
            "rewards": self.rewards.tolist(),
            "embedding": self.embedding.tolist(),
            "mid_embedding": self.mid_embedding.tolist(),
            "potential": None if self.potential is None else self.potential.tolist(),
            "start_states": self.start_states,
            "names": self.names,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LatentWorld":
        kernel = np.asarray(doc["kernel"], dtype=float)
        if kernel.shape[:2] != (doc["states"], doc["actions"]):
            raise WorldError("kernel does not match declared states/actions")
        # rows are renormalised to absorb decimal round-off from hand-written files
        kernel = kernel / kernel.sum(axis=2, keepdims=True)
        if doc.get("embedding") is not None:
            emb = np.asarray(doc["embedding"], dtype=float)
            mid = np.asarray(doc["mid_embedding"], dtype=float)
        else:
            emb, mid = random_embeddings(doc["states"], doc["actions"], doc["n"], doc.get("embedding_seed", 0))
        return cls(kernel, doc["rewards"], emb, mid, potential=doc.get("potential"),
                   start_states=doc.get("start_states"), seed=int(doc.get("embedding_seed", 0)),
                   names=doc.get("names"))


def save_world(path, world: LatentWorld):
    Path(path).write_text(json.dumps(world.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_world(path) -> LatentWorld:
    return LatentWorld.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- dynamics

def step(world: LatentWorld, l: int, a: int, rng: np.random.Generator) -> tuple[int, float]:
    if not 0 <= a < world.n_actions:
        raise WorldError(f"invalid action id {a} at state {l}")
    u = rng.random()
    nxt = min(int(np.searchsorted(world._cdf[l, a], u, side="right")), world.n_states - 1)
    # guard against landing on a zero-probability tail state through round-off
    while world.kernel[l, a, nxt] == 0.0:
        nxt -= 1
    return nxt, float(world.rewards[l, a, nxt])


@dataclass
class SimLatencyProfile:
    """Per-query delay for the expensive simulator; counts queries served."""

    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    queries: int = 0
    jitter_seed: int = 0

    def __post_init__(self):
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise ValueError("delays must be non-negative")
        self._jitter_rng = np.random.default_rng(self.jitter_seed)

    def next_delay_s(self) -> float:
        d = self.delay_ms
        if self.jitter_ms:
            d += self._jitter_rng.uniform(0.0, self.jitter_ms)
        return d / 1000.0


_REAL = RealClock()


def slow_simulate(world, l, a, profile: SimLatencyProfile, rng, clock=None):
    """``step`` preceded by the profile's delay; jitter uses its own stream."""
    (clock or _REAL).wait(profile.next_delay_s())
    profile.queries += 1
    return step(world, l, a, rng)


# ----------------------------------------------------------------- oracle

def expectimax_table(world: LatentWorld, horizon: int, gamma: float):
    """Exact finite-horizon values: returns (V, Q) with V (L,), Q (L, A)."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if world.n_states * world.n_actions * horizon > EXPECTIMAX_LIMIT:
        raise WorldError("world too large for exact enumeration")
    v = np.zeros(world.n_states)
    q = np.zeros((world.n_states, world.n_actions))
    for _ in range(horizon):
        q = np.einsum("lap,lap->la", world.kernel, world.rewards + gamma * v[None, None, :])
        v = q.max(axis=1)
    return v, q


def expectimax(world: LatentWorld, l: int, horizon: int, gamma: float) -> tuple[int, float]:
    v, q = expectimax_table(world, horizon, gamma)
    if horizon == 0:
        return 0, 0.0
    return int(np.argmax(q[l])), float(v[l])


def policy_value(world: LatentWorld, policy, horizon: int, gamma: float = 1.0) -> np.ndarray:
    """Expected return of a stationary stochastic policy ``policy[l, a]`` from every state."""
    policy = np.asarray(policy, dtype=float)
    v = np.zeros(world.n_states)
    for _ in range(horizon):
        q = np.einsum("lap,lap->la", world.kernel, world.rewards + gamma * v[None, None, :])
        v = np.sum(policy * q, axis=1)
    return v


# ----------------------------------------------------------------- datasets

def gen_transition_dataset(world: LatentWorld, count: int, policy=None, seed: int = 0,
                           episode_len: int = 5) -> list[TransitionRecord]:
    """Roll episodes from uniformly drawn states under ``policy`` (uniform by default)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    records: list[TransitionRecord] = []
    l = int(rng.integers(world.n_states))
    t = 0
    while len(records) < count:
        if t == episode_len:
            l, t = int(rng.integers(world.n_states)), 0
        if policy is None:
            a = int(rng.integers(world.n_actions))
        else:
            a = int(rng.choice(world.n_actions, p=np.asarray(policy)[l]))
        nxt, _ = step(world, l, a, rng)
        records.append(TransitionRecord(world.embedding[l], world.mid_embedding[l, a], world.embedding[nxt]))
        l, t = nxt, t + 1
    return records


def gen_reward_dataset(world: LatentWorld, count: int, seed: int = 0) -> list[RewardRecord]:
    """State embeddings labelled with the world's potential."""
    if world.potential is None:
        raise WorldError("world has no potential; rewards are not expressible as a point score")
    rng = np.random.default_rng(seed)
    states = rng.integers(world.n_states, size=count)
    return [RewardRecord(world.embedding[l], float(world.potential[l])) for l in states]


# ----------------------------------------------------------------- builders

def random_embeddings(n_states, n_actions, n, seed, scale=3.0, action_scale=1.0):
    rng = np.random.default_rng(seed)
    emb = rng.normal(scale=scale, size=(n_states, n))
    mid = emb[:, None, :] + rng.normal(scale=action_scale, size=(n_states, n_actions, n))
    return emb, mid


def random_world(n_states: int = 12, n_actions: int = 4, n: int = 8, seed: int = 0,
                 support: int = 3) -> LatentWorld:
    """Random sparse kernel (``support`` successors per row) and U(-1, 1) rewards."""
    rng = np.random.default_rng(seed)
    kernel = np.zeros((n_states, n_actions, n_states))
    k = min(support, n_states)
    for l in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=k, replace=False)
            kernel[l, a, succ] = rng.dirichlet(np.ones(k))
    kernel /= kernel.sum(axis=2, keepdims=True)
    rewards = rng.uniform(-1.0, 1.0, size=kernel.shape)
    emb, mid = random_embeddings(n_states, n_actions, n, seed + 1)
    return LatentWorld(kernel, rewards, emb, mid, seed=seed)


def potential_world(kernel, potential, embedding, mid_embedding, reward_direction, **kw) -> LatentWorld:
    """World whose rewards are potential differences, with the potential linear in the embedding.

    Each state embedding is shifted along ``reward_direction`` so that
    ``reward_direction . E(l) == potential[l]`` exactly; mid embeddings move
    with their state.
    """
    w = np.asarray(reward_direction, dtype=float)
    potential = np.asarray(potential, dtype=float)
    shift = (potential - embedding @ w) / (w @ w)
    emb = embedding + shift[:, None] * w[None, :]
    mid = mid_embedding + shift[:, None, None] * w[None, None, :]
    rewards = potential[None, None, :] - potential[:, None, None] + np.zeros_like(kernel)
    return LatentWorld(kernel, rewards, emb, mid, potential=potential, **kw)


# Default benchmark world: four topic clusters and four action styles.
# "tempting" pays most right away from neutral topics but drifts toward the
# trap cluster one turn later; "engage" pays less now and leads to the good
# cluster, so the myopically best first action is not the optimal one.
CLUSTERS = {"neutral": 3, "good": 4, "tempting": 3, "trap": 2}
CLUSTER_POTENTIAL = {"neutral": 0.0, "good": 2.0, "tempting": 1.3, "trap": -3.0}
ACTION_STYLES = ("engage", "flatter", "idle", "provoke")
STYLE_OUTCOMES = {
    "neutral": {"engage": {"good": 0.45, "neutral": 0.55},
                "flatter": {"tempting": 0.9, "neutral": 0.1},
                "idle": {"neutral": 0.8, "good": 0.1, "tempting": 0.1},
                "provoke": {"trap": 0.9, "neutral": 0.1}},
    "tempting": {"engage": {"neutral": 0.6, "trap": 0.4},
                 "flatter": {"tempting": 0.3, "trap": 0.7},
                 "idle": {"trap": 0.6, "tempting": 0.2, "neutral": 0.2},
                 "provoke": {"trap": 0.9, "tempting": 0.1}},
    "good": {"engage": {"good": 0.9, "neutral": 0.1},
             "flatter": {"tempting": 0.6, "good": 0.4},
             "idle": {"good": 0.7, "neutral": 0.3},
             "provoke": {"trap": 0.5, "good": 0.5}},
    "trap": {"engage": {"neutral": 0.4, "trap": 0.6},
             "flatter": {"tempting": 0.3, "trap": 0.7},
             "idle": {"trap": 0.9, "neutral": 0.1},
             "provoke": {"trap": 1.0}},
}


def default_world(seed: int = 0, n: int = 8, hard: bool = True) -> LatentWorld:
    """The 12-topic, 4-action benchmark world.

    With ``hard`` (default) topics of one cluster sit near each other and
    every action style moves along its own direction, so nearby points
    behave alike and learned models can generalise. Without it, embeddings
    are unrelated random points.
    """
    rng = np.random.default_rng(seed)
    names, cluster_of = [], []
    for cname, size in CLUSTERS.items():
        for i in range(size):
            names.append(f"{cname}{i}")
            cluster_of.append(cname)
    n_states, n_actions = len(names), len(ACTION_STYLES)
    members = {c: [l for l in range(n_states) if cluster_of[l] == c] for c in CLUSTERS}

    potential = np.array([CLUSTER_POTENTIAL[c] for c in cluster_of])
    potential += rng.uniform(-0.2, 0.2, size=n_states)

    # per-state style order is shuffled so action ids carry no meaning
    styles = [list(rng.permutation(n_actions)) for _ in range(n_states)]
    kernel = np.zeros((n_states, n_actions, n_states))
    for l in range(n_states):
        for a in range(n_actions):
            outcome = STYLE_OUTCOMES[cluster_of[l]][ACTION_STYLES[styles[l][a]]]
            for dest, p in outcome.items():
                weights = rng.dirichlet(np.full(len(members[dest]), 4.0))
                kernel[l, a, members[dest]] += p * weights
    kernel /= kernel.sum(axis=2, keepdims=True)

    if hard:
        centers = {c: rng.normal(scale=3.0, size=n) for c in CLUSTERS}
        emb = np.array([centers[c] + rng.normal(scale=0.5, size=n) for c in cluster_of])
        style_dirs = rng.normal(scale=1.5, size=(n_actions, n))
        mid = np.array([[emb[l] + style_dirs[styles[l][a]] + rng.normal(scale=0.2, size=n)
                         for a in range(n_actions)] for l in range(n_states)])
    else:
        emb, mid = random_embeddings(n_states, n_actions, n, seed + 1)
    direction = rng.normal(size=n)
    direction /= np.linalg.norm(direction)
    return potential_world(kernel, potential, emb, mid, direction,
                           start_states=members["neutral"], seed=seed, names=names)
