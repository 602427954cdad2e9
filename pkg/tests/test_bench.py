import csv
import json
import math
from dataclasses import asdict

import numpy as np
import pytest
from pydantic import ValidationError

from semplan import bench as BN
from semplan import numcore as nc
from semplan import world as W
from semplan.dataio import NormStats
from semplan.planner import SemanticModels
from semplan.reward import linear_reward
from semplan.transition import EnsembleModel, TransitionModel


def _cfg(**kw):
    base = dict(methods=["random", "greedy0"], budgets_iters=[20], trials=2, episodes=3, turns=3)
    base.update(kw)
    return BN.ExperimentConfig(**base)


def _drift_models(world):
    """Deterministic toy models: every action moves the state by its own vector."""
    n = world.dim
    act = EnsembleModel([nc.DenseNet([nc.Layer(np.zeros((n, n)), np.full(n, 0.1), "identity")])],
                        NormStats.identity(n), NormStats.identity(n), jitter_sigma=0.2)
    nxt = EnsembleModel([nc.DenseNet([nc.Layer(np.hstack([np.eye(n), np.eye(n)]), np.zeros(n), "identity")])],
                        NormStats.identity(2 * n), NormStats.identity(n), jitter_sigma=0.0)
    return SemanticModels(TransitionModel(act, nxt), linear_reward(np.ones(n)))


def test_zero_reward_world_gives_zero_rewards():
    base = W.random_world(seed=0)
    world = W.LatentWorld(base.kernel, np.zeros_like(base.rewards), base.embedding, base.mid_embedding)
    rows = BN.run_bench(_cfg(methods=["random"]), world)
    assert len(rows) == 6 and all(r.reward == 0.0 for r in rows)


def test_summary_matches_hand_average():
    rows = BN.run_bench(_cfg(), W.default_world())
    for s in BN.summarize(rows):
        vals = [r.reward for r in rows if r.method == s["method"]]
        assert s["n"] == len(vals) == 6
        assert s["mean"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
        mean = sum(vals) / len(vals)
        sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
        assert s["se"] == pytest.approx(sd / math.sqrt(len(vals)), abs=1e-12)


def test_single_episode_has_nan_se():
    rows = BN.run_bench(_cfg(methods=["random"], trials=1, episodes=1), W.default_world())
    assert math.isnan(BN.summarize(rows)[0]["se"])


def test_rows_paired_across_methods():
    rows = BN.run_bench(_cfg(methods=["random", "greedy0", "greedy1"]), W.default_world())
    by_method = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r.start_state)
    assert by_method["random"] == by_method["greedy0"] == by_method["greedy1"]


def test_writer_outputs_and_recomputed_summary(tmp_path):
    cfg = _cfg(methods=["random", "greedy1", "vanilla"])
    writer = BN.BenchWriter(tmp_path, cfg)
    BN.run_bench(cfg, W.default_world(), on_row=writer)
    summary = writer.close()
    rows_text = (tmp_path / "rows.csv").read_text().splitlines()
    assert rows_text[0].startswith("# config: ")
    assert json.loads(rows_text[0][len("# config: "):])["methods"] == ["random", "greedy1", "vanilla"]
    rows = BN.read_rows(tmp_path / "rows.csv")
    assert len(rows) == 3 * 6
    again = BN.summarize(rows)
    lines = [ln for ln in (tmp_path / "summary.csv").read_text().splitlines() if not ln.startswith("#")]
    written = list(csv.DictReader(lines))
    assert len(written) == len(summary) == 3
    for s, w, a in zip(summary, written, again):
        assert float(w["mean"]) == pytest.approx(a["mean"], abs=1e-9)
        assert float(w["se"]) == pytest.approx(a["se"], abs=1e-9)
        assert s["method"] == w["method"]


def _strip_wall(rows):
    return [{k: v for k, v in asdict(r).items() if k != "wall_time_s"} for r in rows]


def test_rerun_reproduces_rows():
    world = W.default_world()
    models = {"scope-de": _drift_models(world)}
    cfg = _cfg(methods=["scope-de", "vanilla", "greedy1"], budgets_ms=[5.0], budgets_iters=None)
    assert _strip_wall(BN.run_bench(cfg, world, models)) == _strip_wall(BN.run_bench(cfg, world, models))


def test_threads_reproduce_single_threaded_rows():
    world = W.default_world()
    models = {"scope-mdn": _drift_models(world)}
    cfg = _cfg(methods=["scope-mdn", "vanilla", "random"], budgets_ms=[5.0], budgets_iters=None)
    serial = BN.run_bench(cfg, world, models)
    threaded = BN.run_bench(cfg.model_copy(update={"threads": 4}), world, models)
    assert _strip_wall(serial) == _strip_wall(threaded)


def test_vanilla_rows_count_queries():
    rows = BN.run_bench(_cfg(methods=["vanilla"], budgets_iters=[7], depths=[2]), W.default_world())
    assert all(0 < r.sim_queries <= 3 * 7 * 2 for r in rows)


def test_missing_models_rejected():
    with pytest.raises(KeyError):
        BN.run_bench(_cfg(methods=["scope-de"]), W.default_world())


@pytest.mark.parametrize("kw", [
    dict(budgets_iters=None),
    dict(budgets_ms=[10.0]),
    dict(budgets_iters=[]),
    dict(budgets_iters=[0]),
    dict(methods=[]),
    dict(methods=["oracle"]),
    dict(trials=0),
    dict(depths=[0]),
    dict(colour="red"),
])
def test_config_schema(kw):
    with pytest.raises(ValidationError):
        _cfg(**kw)


def test_config_budget_helpers():
    assert _cfg().budget_unit == "iters" and _cfg().budgets == [20]
    ms = _cfg(budgets_iters=None, budgets_ms=[1.5, 3.0])
    assert ms.budget_unit == "ms" and ms.budgets == [1.5, 3.0]


def test_throughput_reports_both_rates():
    world = W.default_world()
    out = BN.throughput(world, _drift_models(world), depth=2, latency_ms=5, semantic_ms=50, vanilla_ms=60)
    assert out["semantic_iterations"] > out["vanilla_iterations"] >= 1
    assert out["ratio"] == pytest.approx(out["semantic_rollouts_per_sec"] / out["vanilla_rollouts_per_sec"])
    assert out["reference_ratio"] == pytest.approx(16.63 / 0.18)
