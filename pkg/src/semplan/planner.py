"""Monte Carlo tree search over an arbitrary simulator.

Each iteration selects down the tree (unexplored edges first, picked at
random; UCT otherwise), expands one edge by sampling a child state and
attaching ``m`` sampled actions to it, rolls out to the depth bound, and
backs the discounted return up the path with an incremental mean.

Run on a ``SemanticSimulator`` this is planning inside embedding space with
learned models; run on a ``WorldSimulator`` it is plain MCTS against the
environment.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .clock import RealClock
from .simulators import SemanticSimulator

CHANCE_POLICIES = ("single", "widening")


class PlanError(ValueError):
    pass


@dataclass
class PlanConfig:
    gamma: float = 0.9
    m: int = 5
    depth: int = 3
    lam: float = 0.1
    budget_iters: int | None = 1000
    budget_ms: float | None = None
    reward_scale: float = 1.0
    seed: int = 0
    chance: str = "single"
    widen_c: float = 1.0
    widen_alpha: float = 0.5
    replay_capacity: int = 100_000
    replay_every: int = 64
    record_trace: bool = False
    workers: int = 1
    # charged per iteration on virtual clocks only, so a search whose
    # iterations make no simulator calls still runs out of time
    iteration_cost_ms: float = 0.05

    def validate(self) -> "PlanConfig":
        if not 0 < self.gamma <= 1:
            raise PlanError("gamma must lie in (0, 1]")
        if self.m < 1 or self.depth < 1:
            raise PlanError("m and depth must be >= 1")
        if self.lam < 0:
            raise PlanError("lambda must be >= 0")
        if self.budget_iters is None and self.budget_ms is None:
            raise PlanError("a budget (iterations or milliseconds) is required")
        if (self.budget_iters is not None and self.budget_iters <= 0) or \
                (self.budget_ms is not None and self.budget_ms <= 0):
            raise PlanError("budget must be positive")
        if self.chance not in CHANCE_POLICIES:
            raise PlanError(f"chance policy must be one of {CHANCE_POLICIES}")
        if self.iteration_cost_ms < 0:
            raise PlanError("iteration cost must be >= 0")
        if self.replay_capacity < 1 or self.workers < 1:
            raise PlanError("replay capacity and workers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def uct_score(q: float, n_s: int, n_sa: int, lam: float) -> float:
    if n_s < 1 or n_sa < 1:
        raise PlanError("UCT needs n_s >= 1 and n_sa >= 1")
    return q + lam * math.sqrt(math.log(n_s) / n_sa)


def q_update(q_prev: float, n_sa_after: int, r_hat: float) -> float:
    """Running mean after the ``n_sa_after``-th observed return."""
    if n_sa_after < 1:
        raise PlanError("count after update must be >= 1")
    return q_prev * (1.0 - 1.0 / n_sa_after) + r_hat / n_sa_after


# ------------------------------------------------------------------ tree

class Edge:
    __slots__ = ("action", "n", "q", "children", "child_counts", "child_rewards")

    def __init__(self, action):
        self.action = action
        self.n = 0
        self.q = 0.0
        self.children: list[Node] = []
        self.child_counts: list[int] = []
        self.child_rewards: list[float] = []

    @property
    def explored(self) -> bool:
        return bool(self.children)


class Node:
    __slots__ = ("id", "state", "depth", "edges", "n", "child_keys")

    def __init__(self, node_id, state, depth):
        self.id = node_id
        self.state = state
        self.depth = depth
        self.edges: list[Edge] = []
        self.n = 0
        self.child_keys: dict | None = None


class SearchTree:
    def __init__(self):
        self.nodes: list[Node] = []
        self._widths: list[int] = []

    def add(self, state, depth) -> Node:
        node = Node(len(self.nodes), state, depth)
        self.nodes.append(node)
        self._widths.append(0)
        return node

    def set_edges(self, node: Node, actions) -> None:
        node.edges = [Edge(a) for a in actions]
        self._widths[node.id] = len(node.edges)

    def widths(self) -> np.ndarray:
        return np.asarray(self._widths, dtype=np.int64)

    @property
    def root(self) -> Node:
        return self.nodes[0]

    def check_invariants(self) -> None:
        for node in self.nodes:
            if node.edges and node.n != sum(e.n for e in node.edges):
                raise AssertionError(f"node {node.id}: N(s)={node.n} != sum N(s,a)")
            for e in node.edges:
                if not math.isfinite(e.q):
                    raise AssertionError(f"node {node.id}: non-finite Q")


class ReplayBuffer:
    """FIFO store of (node id, edge index, observed return).

    Alongside the ring it keeps a running (sum, count) per edge and the set
    of edges touched since the last refresh, so the planner's periodic
    refresh only revisits those edges.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise PlanError("replay capacity must be >= 1")
        self.capacity = capacity
        self._node = np.zeros(capacity, dtype=np.int64)
        self._edge = np.zeros(capacity, dtype=np.int64)
        self._ret = np.zeros(capacity)
        self._pos = 0
        self._size = 0
        self._acc: dict[tuple[int, int], list] = {}
        self.dirty: set[tuple[int, int]] = set()

    def __len__(self):
        return self._size

    def append(self, node_id: int, edge_index: int, ret: float):
        pos = self._pos
        if self._size == self.capacity:
            old = (int(self._node[pos]), int(self._edge[pos]))
            acc = self._acc[old]
            acc[0] -= self._ret[pos]
            acc[1] -= 1
            if acc[1] == 0:
                del self._acc[old]
            self.dirty.add(old)
        self._node[pos] = node_id
        self._edge[pos] = edge_index
        self._ret[pos] = ret
        key = (node_id, edge_index)
        acc = self._acc.get(key)
        if acc is None:
            self._acc[key] = [ret, 1]
        else:
            acc[0] += ret
            acc[1] += 1
        self.dirty.add(key)
        self._pos = (pos + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def entries(self):
        """Buffered entries, oldest first."""
        if self._size < self.capacity:
            sl = slice(0, self._size)
            return self._node[sl], self._edge[sl], self._ret[sl]
        order = np.roll(np.arange(self.capacity), -self._pos)
        return self._node[order], self._edge[order], self._ret[order]

    def edge_stats(self, key):
        """(sum, count) of buffered returns for ``key``, or None."""
        acc = self._acc.get(key)
        return None if acc is None else (acc[0], acc[1])


def _live(tree: SearchTree, node_id: int, edge_index: int) -> bool:
    return 0 <= node_id < len(tree.nodes) and 0 <= edge_index < len(tree.nodes[node_id].edges)


def replay_refresh(tree: SearchTree, buffer: ReplayBuffer, *, full: bool = True) -> int:
    """Reset buffered edges' Q to the mean of their buffered returns.

    With ``full`` every buffered entry is re-read; otherwise only edges
    touched since the previous refresh are recomputed from running sums.
    Returns the number of stale entries skipped.
    """
    if not full:
        stale = 0
        for key in buffer.dirty:
            acc = buffer.edge_stats(key)
            if acc is None:
                continue
            if not _live(tree, *key):
                stale += acc[1]
                continue
            tree.nodes[key[0]].edges[key[1]].q = acc[0] / acc[1]
        buffer.dirty.clear()
        return stale
    buffer.dirty.clear()
    nodes, edges, rets = buffer.entries()
    if not len(nodes):
        return 0
    n_nodes = len(tree.nodes)
    valid = (nodes >= 0) & (nodes < n_nodes)
    widths = tree.widths()[nodes[valid]]
    ok = np.zeros(len(nodes), dtype=bool)
    ok[np.flatnonzero(valid)] = (edges[valid] >= 0) & (edges[valid] < widths)
    stale = int(len(nodes) - ok.sum())
    if not ok.any():
        return stale
    stride = int(edges[ok].max()) + 1
    keys = nodes[ok] * stride + edges[ok]
    uniq, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=rets[ok])
    counts = np.bincount(inv)
    for key, s, c in zip(uniq.tolist(), sums.tolist(), counts.tolist()):
        tree.nodes[key // stride].edges[key % stride].q = s / c
    return stale


# --------------------------------------------------------------- rollouts

def _as_simulator(models):
    if hasattr(models, "transition") and hasattr(models, "sample_actions"):
        return models
    return SemanticSimulator(models.transition, models.reward)


@dataclass
class SemanticModels:
    """Learned transition and reward models, as consumed by ``plan``."""

    transition: object
    reward: object


def rollout(models, start, depth: int, gamma: float, rng, reward_scale: float = 1.0) -> float:
    """Discounted return of a ``depth``-turn simulated trajectory from ``start``."""
    sim = _as_simulator(models)
    total, disc, state = 0.0, 1.0, start
    for _ in range(depth):
        action = sim.sample_actions(state, 1, rng)[0]
        state, r = sim.transition(state, action, rng)
        total += disc * r * reward_scale
        disc *= gamma
    return total


def project_root(embedder, context, candidates):
    """Root point f(context) and action vectors f(context + a_j) - f(context)."""
    if len(candidates) < 1:
        raise PlanError("need at least one candidate")
    root = np.asarray(embedder.embed(context), dtype=float)
    return root, [np.asarray(embedder.embed_after(context, a), dtype=float) - root for a in candidates]


# ----------------------------------------------------------------- search

@dataclass
class PlanResult:
    index: int
    q: list[float]
    visits: list[int]
    stats: dict
    tree: SearchTree | None = field(default=None, repr=False)
    trace: list | None = field(default=None, repr=False)


class _Search:
    def __init__(self, sim, root_state, root_actions, cfg: PlanConfig, clock):
        self.sim = sim
        self.cfg = cfg
        self.clock = clock
        self.rng = np.random.default_rng(cfg.seed)
        self.tree = SearchTree()
        root = self.tree.add(root_state, 0)
        self.tree.set_edges(root, root_actions)
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.max_depth = 0
        self.trace = [] if cfg.record_trace else None
        self.stale = 0

    def _new_child(self, parent: Node, edge: Edge, state, reward: float) -> Node:
        child = self.tree.add(state, parent.depth + 1)
        if child.depth < self.cfg.depth:
            self.tree.set_edges(child, self.sim.sample_actions(state, self.cfg.m, self.rng))
        edge.children.append(child)
        edge.child_counts.append(1)
        edge.child_rewards.append(reward)
        if self.cfg.chance == "widening":
            if parent.child_keys is None:
                parent.child_keys = {}
            parent.child_keys[(id(edge), self.sim.key(state))] = len(edge.children) - 1
        self.max_depth = max(self.max_depth, child.depth)
        return child

    def _select_edge(self, node: Node, steps):
        unexplored = [i for i, e in enumerate(node.edges) if not e.explored]
        if unexplored:
            i = unexplored[int(self.rng.integers(len(unexplored)))] if len(unexplored) > 1 else unexplored[0]
            if steps is not None:
                steps.append((node.id, i, "unexplored"))
            return i, True
        lam, n_s = self.cfg.lam, node.n
        best, best_i = -math.inf, 0
        log_n = math.log(n_s) if n_s > 0 else 0.0
        for i, e in enumerate(node.edges):
            score = e.q + lam * math.sqrt(log_n / e.n) if e.n else e.q
            if score > best:
                best, best_i = score, i
        if steps is not None:
            steps.append((node.id, best_i, "uct"))
        return best_i, False

    def _chance(self, node: Node, edge: Edge):
        """Pick (child, reward, is_new) for an already explored edge."""
        cfg = self.cfg
        if cfg.chance == "single":
            return edge.children[0], edge.child_rewards[0], False
        limit = math.ceil(cfg.widen_c * max(edge.n, 1) ** cfg.widen_alpha)
        if len(edge.children) < limit:
            state, r = self.sim.transition(node.state, edge.action, self.rng)
            r *= cfg.reward_scale
            j = node.child_keys.get((id(edge), self.sim.key(state)))
            if j is not None:
                edge.child_counts[j] += 1
                return edge.children[j], edge.child_rewards[j], False
            return self._new_child(node, edge, state, r), r, True
        # reuse an existing outcome with its empirical sample frequency;
        # reuse does not count as a sample, so this is no Polya urn
        counts = edge.child_counts
        u = self.rng.random() * sum(counts)
        acc = 0
        for j, c in enumerate(counts):
            acc += c
            if u < acc:
                break
        return edge.children[j], edge.child_rewards[j], False

    def iterate(self):
        cfg = self.cfg
        node = self.tree.root
        path = []
        steps = [] if self.trace is not None else None
        leaf_return = 0.0
        while node.depth < cfg.depth and node.edges:
            i, fresh = self._select_edge(node, steps)
            edge = node.edges[i]
            if fresh:
                state, r = self.sim.transition(node.state, edge.action, self.rng)
                r *= cfg.reward_scale
                child = self._new_child(node, edge, state, r)
                path.append((node, i, r))
                leaf_return = self._rollout(child)
                break
            child, r, is_new = self._chance(node, edge)
            path.append((node, i, r))
            if is_new:
                leaf_return = self._rollout(child)
                break
            node = child
        g = leaf_return
        for node, i, r in reversed(path):
            g = r + cfg.gamma * g
            edge = node.edges[i]
            edge.n += 1
            node.n += 1
            edge.q = q_update(edge.q, edge.n, g)
            self.buffer.append(node.id, i, g)
        if steps is not None:
            self.trace.append(steps)

    def _rollout(self, child: Node) -> float:
        remaining = self.cfg.depth - child.depth
        if remaining <= 0:
            return 0.0
        self.max_depth = max(self.max_depth, self.cfg.depth)
        return rollout(self.sim, child.state, remaining, self.cfg.gamma, self.rng, self.cfg.reward_scale)

    def run(self) -> PlanResult:
        cfg = self.cfg
        start = self.clock.now()
        deadline = start + cfg.budget_ms / 1000.0 if cfg.budget_ms is not None else None
        virtual = getattr(self.clock, "virtual", False)
        k = 0
        while True:
            if cfg.budget_iters is not None and k >= cfg.budget_iters:
                break
            if deadline is not None and self.clock.now() >= deadline:
                break
            self.iterate()
            if virtual and cfg.iteration_cost_ms:
                self.clock.wait(cfg.iteration_cost_ms / 1000.0)
            k += 1
            if cfg.replay_every and k % cfg.replay_every == 0:
                self.stale += replay_refresh(self.tree, self.buffer, full=False)
        elapsed = self.clock.now() - start
        root = self.tree.root
        q = [e.q for e in root.edges]
        visits = [e.n for e in root.edges]
        stats = {
            "iterations": k,
            "elapsed_s": elapsed,
            "rollouts_per_sec": k / elapsed if elapsed > 0 else float("inf"),
            "max_depth": self.max_depth,
            "nodes": len(self.tree.nodes),
            "sim_queries": getattr(self.sim, "queries", None),
            "stale_replay_entries": self.stale,
        }
        return PlanResult(_argmax_explored(q, visits), q, visits, stats, self.tree, self.trace)


def _argmax_explored(q, visits) -> int:
    best, best_i = -math.inf, 0
    for i, (v, n) in enumerate(zip(q, visits)):
        if n > 0 and v > best:
            best, best_i = v, i
    return best_i


def search(sim, root_state, root_actions, config: PlanConfig, clock=None) -> PlanResult:
    """Tree search from a root whose edges are ``root_actions``."""
    config.validate()
    if len(root_actions) < 1:
        raise PlanError("need at least one candidate")
    clock = clock or RealClock()
    if config.workers == 1:
        return _Search(sim, root_state, root_actions, config, clock).run()
    return _root_parallel(sim, root_state, root_actions, config, clock)


def _root_parallel(sim, root_state, root_actions, config, clock) -> PlanResult:
    """Independent trees per worker, merged by visit-weighted root Q."""
    from dataclasses import replace

    cfgs = [replace(config, seed=config.seed + w, workers=1) for w in range(config.workers)]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(lambda c: _Search(sim, root_state, root_actions, c, clock).run(), cfgs))
    m = len(root_actions)
    visits = [sum(r.visits[i] for r in results) for i in range(m)]
    q = [sum(r.q[i] * r.visits[i] for r in results) / visits[i] if visits[i] else 0.0 for i in range(m)]
    stats = {
        "iterations": sum(r.stats["iterations"] for r in results),
        "elapsed_s": max(r.stats["elapsed_s"] for r in results),
        "max_depth": max(r.stats["max_depth"] for r in results),
        "nodes": sum(r.stats["nodes"] for r in results),
        "sim_queries": getattr(sim, "queries", None),
        "workers": config.workers,
    }
    stats["rollouts_per_sec"] = stats["iterations"] / stats["elapsed_s"] if stats["elapsed_s"] > 0 else float("inf")
    return PlanResult(_argmax_explored(q, visits), q, visits, stats)


def plan(models, embedder, context, candidates, config: PlanConfig, clock=None) -> PlanResult:
    """Project the context and candidates, then search with the given models.

    ``models`` is a ``SemanticModels`` bundle or any simulator working in
    embedding space (such as ``KernelStubSimulator``).
    """
    if len(candidates) < 1:
        raise PlanError("need at least one candidate")
    root, actions = project_root(embedder, context, candidates)
    return search(_as_simulator(models), root, actions, config, clock)
