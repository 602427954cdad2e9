"""Benchmark harness: episodes on a latent world, one CSV row per episode.

For every method x budget x depth x trial x episode the harness starts at a
start state, and for each turn draws ``m`` candidate actions, lets the
method pick one, and steps the true world. The episode's cumulative true
reward is the score. All randomness is derived from ``(seed, trial,
episode)``, so every method sees the same start states, the same candidate
sets on the first turn, and the same environment stream; comparisons are
paired.

Time budgets are charged on a ``VirtualClock`` by default: a semantic turn
costs ``semantic_step_ms`` and a real simulator query costs ``latency_ms``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import baselines as B
from . import world as W
from .clock import RealClock, VirtualClock
from .planner import PlanConfig, SemanticModels, plan
from .simulators import LatentEmbedder, SemanticSimulator

METHODS = ("scope-de", "scope-mdn", "random", "greedy0", "greedy1", "vanilla")
PLANNING_METHODS = ("scope-de", "scope-mdn", "vanilla")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    world: str | None = None
    world_seed: int = 0
    methods: list[Literal[METHODS]] = Field(min_length=1)  # type: ignore[valid-type]
    budgets_ms: list[float] | None = None
    budgets_iters: list[int] | None = None
    trials: int = Field(5, ge=1)
    episodes: int = Field(50, ge=1)
    turns: int = Field(5, ge=1)
    depths: list[int] = Field(default_factory=lambda: [3], min_length=1)
    m: int = Field(4, ge=1)
    gamma: float = Field(0.9, gt=0, le=1)
    lam: float = Field(0.1, ge=0)
    reward_scale: float = 1.0
    chance: Literal["single", "widening"] = "widening"
    latency_ms: float = Field(50.0, ge=0)
    semantic_step_ms: float = Field(0.54, ge=0)
    clock: Literal["virtual", "real"] = "virtual"
    greedy1_samples: int = Field(5, ge=1)
    models: dict[str, dict[str, str]] = Field(default_factory=dict)
    seed: int = 0
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _one_budget_grid(self):
        if (self.budgets_ms is None) == (self.budgets_iters is None):
            raise ValueError("give exactly one of budgets_ms or budgets_iters")
        grid = self.budgets_ms if self.budgets_ms is not None else self.budgets_iters
        if not grid or any(b <= 0 for b in grid):
            raise ValueError("budget grid must be non-empty and positive")
        if any(d < 1 for d in self.depths):
            raise ValueError("depths must be >= 1")
        return self

    @property
    def budget_unit(self) -> str:
        return "ms" if self.budgets_ms is not None else "iters"

    @property
    def budgets(self) -> list:
        return list(self.budgets_ms if self.budgets_ms is not None else self.budgets_iters)


@dataclass
class BenchRow:
    method: str
    budget: float
    depth: int
    trial: int
    episode: int
    start_state: int
    reward: float
    rollouts_per_sec: float
    sim_queries: int
    wall_time_s: float


ROW_FIELDS = [f.name for f in fields(BenchRow)]
SUMMARY_FIELDS = ["method", "budget", "depth", "n", "mean", "se"]


@dataclass
class _Episode:
    method: str
    budget: float
    depth: int
    trial: int
    episode: int


def _streams(seed, trial, episode):
    ss = np.random.SeedSequence([seed, trial, episode])
    env, cand, choice = ss.spawn(3)
    return (np.random.default_rng(env), np.random.default_rng(cand), np.random.default_rng(choice),
            int(ss.generate_state(1)[0]))


def _plan_config(cfg: ExperimentConfig, budget, depth, seed) -> PlanConfig:
    kw = {"budget_ms": float(budget), "budget_iters": None} if cfg.budget_unit == "ms" \
        else {"budget_iters": int(budget), "budget_ms": None}
    return PlanConfig(gamma=cfg.gamma, m=cfg.m, depth=depth, lam=cfg.lam, reward_scale=cfg.reward_scale,
                      chance=cfg.chance, seed=seed, **kw)


def _clock(cfg):
    return VirtualClock() if cfg.clock == "virtual" else RealClock()


def run_episode(cfg: ExperimentConfig, world: W.LatentWorld, models: dict, ep: _Episode) -> BenchRow:
    env_rng, cand_rng, choice_rng, plan_seed = _streams(cfg.seed, ep.trial, ep.episode)
    starts = world.starts()
    l = starts[ep.episode % len(starts)]
    start = l
    total, iters, elapsed, queries = 0.0, 0, 0.0, 0
    t0 = time.perf_counter()
    for turn in range(cfg.turns):
        cands = world.sample_actions(l, cfg.m, cand_rng)
        stats = None
        if ep.method == "random":
            idx = B.select_random(cands, choice_rng)
        elif ep.method == "greedy0":
            idx = B.select_greedy0(cands, lambda a, _l=l: world.expected_reward(_l, a))
        elif ep.method == "greedy1":
            idx = B.select_greedy1(world, l, cands, cfg.greedy1_samples, choice_rng)
            queries += cfg.greedy1_samples * len(cands)
        elif ep.method == "vanilla":
            pc = _plan_config(cfg, ep.budget, ep.depth, plan_seed + turn)
            idx, res = B.vanilla_mcts(world, l, cands, pc, W.SimLatencyProfile(cfg.latency_ms), _clock(cfg))
            stats = res.stats
        else:
            if ep.method not in models:
                raise KeyError(f"no models loaded for method {ep.method!r}")
            pc = _plan_config(cfg, ep.budget, ep.depth, plan_seed + turn)
            clock = _clock(cfg)
            bundle = models[ep.method]
            sim = SemanticSimulator(bundle.transition, bundle.reward, clock, cfg.semantic_step_ms)
            res = plan(sim, LatentEmbedder(world), l, cands, pc, clock)
            stats = res.stats
            idx = res.index
        if stats is not None:
            iters += stats["iterations"]
            elapsed += stats["elapsed_s"]
            queries += stats["sim_queries"] or 0
        l, r = W.step(world, l, cands[idx], env_rng)
        total += r
    rps = iters / elapsed if elapsed > 0 else 0.0
    return BenchRow(ep.method, ep.budget, ep.depth, ep.trial, ep.episode, int(start), float(total), rps,
                    int(queries), time.perf_counter() - t0)


def episodes(cfg: ExperimentConfig) -> list[_Episode]:
    out = []
    for method in cfg.methods:
        for budget in cfg.budgets:
            for depth in cfg.depths:
                for trial in range(cfg.trials):
                    for episode in range(cfg.episodes):
                        out.append(_Episode(method, budget, depth, trial, episode))
    return out


def run_bench(cfg: ExperimentConfig, world: W.LatentWorld, models: dict | None = None,
              on_row=None) -> list[BenchRow]:
    """Run every episode; ``on_row`` is called in episode order as rows complete."""
    models = models or {}
    missing = [m for m in cfg.methods if m.startswith("scope") and m not in models]
    if missing:
        raise KeyError(f"no models loaded for {', '.join(missing)}")
    todo = episodes(cfg)
    rows: list[BenchRow] = []
    if cfg.threads == 1:
        for ep in todo:
            row = run_episode(cfg, world, models, ep)
            rows.append(row)
            if on_row:
                on_row(row)
        return rows
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for row in pool.map(lambda e: run_episode(cfg, world, models, e), todo):
            rows.append(row)
            if on_row:
                on_row(row)
    return rows


def summarize(rows: list[BenchRow]) -> list[dict]:
    """Mean and standard error of episode reward per (method, budget, depth)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.method, r.budget, r.depth), []).append(r.reward)
    out = []
    for (method, budget, depth), vals in groups.items():
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")
        out.append({"method": method, "budget": budget, "depth": depth, "n": len(v),
                    "mean": float(v.mean()), "se": se})
    return out


# ------------------------------------------------------------------ output

class BenchWriter:
    """Streams rows to ``rows.csv``; ``close`` writes ``summary.csv``."""

    def __init__(self, out_dir, cfg: ExperimentConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.header = "# config: " + json.dumps(cfg.model_dump(), sort_keys=True)
        self._fh = open(self.dir / "rows.csv", "w", newline="")
        self._fh.write(self.header + "\n")
        self._csv = csv.DictWriter(self._fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        self._csv.writeheader()
        self.rows: list[BenchRow] = []

    def __call__(self, row: BenchRow):
        self.rows.append(row)
        self._csv.writerow(asdict(row))
        self._fh.flush()

    def close(self) -> list[dict]:
        self._fh.close()
        summary = summarize(self.rows)
        (self.dir / "summary.csv").write_text(summary_csv(summary, self.header))
        return summary


def summary_csv(summary: list[dict], header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(header + "\n")
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    w.writeheader()
    for s in summary:
        w.writerow({k: repr(s[k]) if isinstance(s[k], float) else s[k] for k in SUMMARY_FIELDS})
    return buf.getvalue()


def read_rows(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for d in csv.DictReader(lines):
        out.append(BenchRow(d["method"], float(d["budget"]), int(d["depth"]), int(d["trial"]),
                            int(d["episode"]), int(d["start_state"]), float(d["reward"]),
                            float(d["rollouts_per_sec"]), int(d["sim_queries"]), float(d["wall_time_s"])))
    return out


# --------------------------------------------------------------- throughput

def throughput(world: W.LatentWorld, bundle: SemanticModels, depth: int = 6, latency_ms: float = 50.0,
               semantic_ms: float = 500.0, vanilla_ms: float = 3000.0, m: int = 4, seed: int = 0,
               state: int | None = None) -> dict:
    """Measured rollouts/sec of semantic search and of vanilla search, on real clocks.

    Semantic turns cost only model evaluation; vanilla turns really sleep
    ``latency_ms``.
    """
    l = world.starts()[0] if state is None else state
    cands = list(range(min(m, world.n_actions)))
    sem_cfg = PlanConfig(depth=depth, m=m, budget_iters=None, budget_ms=semantic_ms, seed=seed)
    sem = plan(SemanticSimulator(bundle.transition, bundle.reward), LatentEmbedder(world), l, cands,
               sem_cfg, RealClock())
    van_cfg = PlanConfig(depth=depth, m=m, budget_iters=None, budget_ms=vanilla_ms, seed=seed)
    _, van = B.vanilla_mcts(world, l, cands, van_cfg, W.SimLatencyProfile(latency_ms), RealClock())
    s, v = sem.stats, van.stats
    s_per = s["elapsed_s"] / s["iterations"] if s["iterations"] else float("inf")
    v_per = v["elapsed_s"] / v["iterations"] if v["iterations"] else float("inf")
    return {
        "semantic_rollouts_per_sec": s["rollouts_per_sec"],
        "vanilla_rollouts_per_sec": v["rollouts_per_sec"],
        "ratio": s["rollouts_per_sec"] / v["rollouts_per_sec"] if v["rollouts_per_sec"] else float("inf"),
        "semantic_s_per_rollout": s_per,
        "vanilla_s_per_rollout": v_per,
        "semantic_iterations": s["iterations"],
        "vanilla_iterations": v["iterations"],
        "reference_ratio": 16.63 / 0.18,
    }
