"""Operations behind both the HTTP API and the command line.

Each function takes a validated request document and returns a response
document; file paths in requests are read and written on the serving host.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import baselines as B
from . import world as W
from .bench import BenchWriter, ExperimentConfig, run_bench
from .clock import RealClock
from .dataio import (load_checkpoint, load_rewards, load_transitions, save_checkpoint, save_rewards,
                     save_transitions)
from .planner import PlanConfig, SemanticModels, plan as run_plan
from .reward import RewardHyper, reward_from_checkpoint, train_reward
from .schemas import (BenchRequest, BenchResponse, DiagRequest, DiagResponse, GenDataRequest,
                      GenDataResponse, GenWorldRequest, GenWorldResponse, ModelPaths, PlanRequest,
                      PlanResponse, TrainRewardRequest, TrainRewardResponse, TrainTransitionRequest,
                      TrainTransitionResponse)
from .simulators import AdditiveEmbedder, LatentEmbedder, SemanticSimulator
from .transition import TrainHyper, prediction_diagnostics, train_transition, transition_from_checkpoints


class ServiceError(ValueError):
    """A request that is well-formed but cannot be served."""


def _need(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _parent(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def load_models(paths: ModelPaths | dict) -> SemanticModels:
    if isinstance(paths, dict):
        paths = ModelPaths(**paths)
    action = load_checkpoint(_need(paths.action, "action checkpoint"))
    nxt = load_checkpoint(_need(paths.next_state, "next-state checkpoint"))
    reward = load_checkpoint(_need(paths.reward, "reward checkpoint"))
    return SemanticModels(transition_from_checkpoints(action, nxt), reward_from_checkpoint(reward))


# ------------------------------------------------------------------ worlds

def gen_world(req: GenWorldRequest) -> GenWorldResponse:
    if req.kind == "default":
        world = W.default_world(seed=req.seed, n=req.n)
    else:
        world = W.random_world(n_states=req.n_states, n_actions=req.n_actions, n=req.n, seed=req.seed)
    W.save_world(_parent(req.out), world)
    return GenWorldResponse(path=req.out, n_states=world.n_states, n_actions=world.n_actions, n=world.dim,
                            start_states=[int(s) for s in world.starts()])


def gen_data(req: GenDataRequest) -> GenDataResponse:
    world = W.load_world(_need(req.world, "world file"))
    if req.kind == "transitions":
        records = W.gen_transition_dataset(world, req.count, seed=req.seed, episode_len=req.episode_len)
        save_transitions(_parent(req.out), records)
    else:
        records = W.gen_reward_dataset(world, req.count, seed=req.seed)
        save_rewards(_parent(req.out), records)
    return GenDataResponse(path=req.out, count=len(records), dims=world.dim)


# ---------------------------------------------------------------- training

def train_transition_models(req: TrainTransitionRequest) -> TrainTransitionResponse:
    records = load_transitions(_need(req.data, "transition data"))
    if not records:
        raise ServiceError("transition data file holds no records")
    hyper = TrainHyper(epochs=req.epochs, lr=req.lr, batch_size=req.batch_size, hidden=req.hidden,
                       depth=req.depth, valid_fraction=req.valid_fraction, seeds=tuple(range(req.members)),
                       jitter_sigma=req.jitter_sigma, k_mix=req.k_mix, mdn_lr=req.mdn_lr,
                       aux_reward=req.aux_reward)
    head = None
    if req.aux_reward:
        head = reward_from_checkpoint(load_checkpoint(_need(req.reward, "reward checkpoint"))).linear_head()
    ckpts = train_transition(list(records), req.backend, hyper, req.seed, reward_head=head)
    out = Path(req.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "action.json", ckpts.action)
    save_checkpoint(out / "next_state.json", ckpts.next_state)
    return TrainTransitionResponse(action=str(out / "action.json"), next_state=str(out / "next_state.json"),
                                   val_loss_action=float(ckpts.action.extra["val_loss"][-1]),
                                   val_loss_next_state=float(ckpts.next_state.extra["val_loss"][-1]))


def train_reward_model(req: TrainRewardRequest) -> TrainRewardResponse:
    records = load_rewards(_need(req.data, "reward data"))
    if not records:
        raise ServiceError("reward data file holds no records")
    hyper = RewardHyper(epochs=req.epochs, lr=req.lr, batch_size=req.batch_size, linear=req.linear,
                        hidden=req.hidden, valid_fraction=req.valid_fraction)
    ckpt = train_reward(list(records), hyper, req.seed)
    save_checkpoint(_parent(req.out), ckpt)
    return TrainRewardResponse(path=req.out, kind=ckpt.kind, val_loss=float(ckpt.extra["val_loss"][-1]))


# ---------------------------------------------------------------- planning

def _plan_config(s) -> PlanConfig:
    return PlanConfig(gamma=s.gamma, m=s.m, depth=s.depth, lam=s.lam, budget_iters=s.budget_iters,
                      budget_ms=s.budget_ms, reward_scale=s.reward_scale, chance=s.chance, seed=s.seed,
                      workers=s.workers).validate()


def plan(req: PlanRequest) -> PlanResponse:
    cfg = _plan_config(req.config)
    rng = np.random.default_rng(req.config.seed)
    if req.context is not None:
        models = load_models(req.models)
        context = np.asarray(req.context, dtype=float)
        cands = [np.asarray(c, dtype=float) for c in req.candidates]
        if any(c.shape != context.shape for c in cands):
            raise ServiceError("candidate vectors must match the context dimension")
        sim = SemanticSimulator(models.transition, models.reward)
        res = run_plan(sim, AdditiveEmbedder(), context, cands, cfg, RealClock())
        return PlanResponse(method="scope", index=res.index, candidate=req.candidates[res.index],
                            q=res.q, visits=res.visits, stats=_jsonable(res.stats))

    world = W.load_world(_need(req.world, "world file"))
    if not 0 <= req.state < world.n_states:
        raise ServiceError(f"state {req.state} outside 0..{world.n_states - 1}")
    cands = list(req.candidates) if req.candidates is not None else list(range(world.n_actions))
    if not all(isinstance(a, int) and 0 <= a < world.n_actions for a in cands):
        raise ServiceError("world candidates must be action ids")
    q, visits, stats = [], [], {}
    if req.method == "scope":
        models = load_models(req.models)
        res = run_plan(SemanticSimulator(models.transition, models.reward), LatentEmbedder(world), req.state,
                       cands, cfg, RealClock())
        idx, q, visits, stats = res.index, res.q, res.visits, res.stats
    elif req.method == "vanilla":
        idx, res = B.vanilla_mcts(world, req.state, cands, cfg, W.SimLatencyProfile(req.config.latency_ms))
        q, visits, stats = res.q, res.visits, res.stats
    elif req.method == "random":
        idx = B.select_random(cands, rng)
    elif req.method == "greedy0":
        idx = B.select_greedy0(cands, lambda a: world.expected_reward(req.state, a))
    else:
        idx = B.select_greedy1(world, req.state, cands, req.config.greedy1_samples, rng)
    return PlanResponse(method=req.method, index=idx, candidate=cands[idx], q=q, visits=visits,
                        stats=_jsonable(stats))


def _jsonable(stats: dict) -> dict:
    out = {}
    for k, v in stats.items():
        if isinstance(v, float) and not np.isfinite(v):
            v = None
        elif isinstance(v, np.generic):
            v = v.item()
        out[k] = v
    return out


# ---------------------------------------------------------------- bench

def load_bench_world(cfg: ExperimentConfig) -> W.LatentWorld:
    if cfg.world:
        return W.load_world(_need(cfg.world, "world file"))
    return W.default_world(seed=cfg.world_seed)


def bench(req: BenchRequest) -> BenchResponse:
    cfg = req.config
    world = load_bench_world(cfg)
    models = {}
    for method in cfg.methods:
        if method.startswith("scope"):
            if method not in cfg.models:
                raise ServiceError(f"config.models has no checkpoints for {method!r}")
            models[method] = load_models(cfg.models[method])
    writer = BenchWriter(req.out, cfg)
    try:
        run_bench(cfg, world, models, on_row=writer)
    finally:
        # rows so far are already on disk; the summary covers whatever ran
        summary = writer.close()
    return BenchResponse(rows=str(writer.dir / "rows.csv"), summary=str(writer.dir / "summary.csv"),
                         groups=[_jsonable(s) for s in summary])


# ----------------------------------------------------------- diagnostics

def diag(req: DiagRequest) -> DiagResponse:
    model = transition_from_checkpoints(load_checkpoint(_need(req.action, "action checkpoint")),
                                        load_checkpoint(_need(req.next_state, "next-state checkpoint")))
    records = list(load_transitions(_need(req.data, "transition data")))
    if req.limit:
        records = records[:req.limit]
    if not records:
        raise ServiceError("transition data file holds no records")
    out = {}
    for role in ("action", "next_state"):
        rng = np.random.default_rng(req.seed)
        out[role] = prediction_diagnostics(model, records, role=role, mode=req.mode, rng=rng).to_dict()
    if req.out:
        _parent(req.out).write_text(json.dumps(out, sort_keys=True) + "\n")
    return DiagResponse(action=out["action"], next_state=out["next_state"], path=req.out)


OPERATIONS = {
    "gen-world": (GenWorldRequest, gen_world),
    "gen-data": (GenDataRequest, gen_data),
    "train-transition": (TrainTransitionRequest, train_transition_models),
    "train-reward": (TrainRewardRequest, train_reward_model),
    "plan": (PlanRequest, plan),
    "bench": (BenchRequest, bench),
    "diag": (DiagRequest, diag),
}


def error_body(exc: BaseException) -> dict:
    """Machine-readable error object for any failure."""
    return {"error": {"type": type(exc).__name__, "message": str(exc)}}

