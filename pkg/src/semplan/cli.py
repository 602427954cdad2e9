"""Command-line front end.

Every subcommand assembles a request document (from ``--config`` and then
the flags, flags winning), sends it to the service layer in-process, or to a
running server with ``--server URL``, and prints the response as JSON. On
failure it prints ``{"error": {"type", "message"}}`` to stderr and exits
nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv(kind):
    def parse(text):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def _common(p, *, budgets=False, grid=False):
    p.add_argument("--config", help="JSON request document; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    p.add_argument("--server", help="send the request to a running server at this URL")
    if budgets:
        p.add_argument("--method")
        g = p.add_mutually_exclusive_group()
        conv = _csv(float) if grid else float
        g.add_argument("--budget-ms", type=conv)
        g.add_argument("--budget-iters", type=_csv(int) if grid else int)
        p.add_argument("--depth", type=_csv(int) if grid else int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semplan", description="Tree search in embedding space with learned models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-world", help="write a latent world file")
    _common(p)
    p.add_argument("--kind", choices=["default", "random"])
    p.add_argument("--dim", type=int, dest="n")
    p.add_argument("--states", type=int, dest="n_states")
    p.add_argument("--actions", type=int, dest="n_actions")

    p = sub.add_parser("gen-data", help="sample a transition or reward dataset from a world")
    _common(p)
    p.add_argument("--world")
    p.add_argument("--kind", choices=["transitions", "rewards"])
    p.add_argument("--count", type=int)

    p = sub.add_parser("train-transition", help="train action and next-state models")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--backend", choices=["ensemble", "mdn"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--members", type=int)
    p.add_argument("--k-mix", type=int, dest="k_mix")
    p.add_argument("--reward", help="linear reward checkpoint for the auxiliary likelihood")
    p.add_argument("--aux-reward", action="store_true", default=None, dest="aux_reward")

    p = sub.add_parser("train-reward", help="train the point-wise reward model")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dense", action="store_true", help="one hidden layer instead of a linear map")

    p = sub.add_parser("plan", help="choose among candidates from one state")
    _common(p, budgets=True)
    p.add_argument("--world")
    p.add_argument("--state", type=int)
    p.add_argument("--candidates", type=_csv(int), help="comma-separated action ids")
    p.add_argument("--models", help="directory with action.json and next_state.json")
    p.add_argument("--reward", help="reward checkpoint")
    p.add_argument("--lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--chance", choices=["single", "widening"])
    p.add_argument("--latency-ms", type=float, dest="latency_ms")

    p = sub.add_parser("bench", help="run a benchmark grid and write CSV rows and a summary")
    _common(p, budgets=True, grid=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("diag", help="prediction diagnostics for transition models")
    _common(p)
    p.add_argument("--models", help="directory with action.json and next_state.json")
    p.add_argument("--data")
    p.add_argument("--mode", choices=["mean", "sample"])
    p.add_argument("--limit", type=int)

    p = sub.add_parser("serve", help="run the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _load_config(path):
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    return doc


def _set(doc, key, value):
    if value is not None:
        doc[key] = value


def request_document(args) -> dict:
    """Merge the config file and flags into the request document for ``args.command``."""
    doc = _load_config(args.config)
    cmd = args.command
    if cmd == "bench":
        cfg = doc
        _set(cfg, "seed", args.seed)
        _set(cfg, "threads", args.threads)
        if args.method:
            cfg["methods"] = [m.strip() for m in args.method.split(",")]
        if args.budget_ms is not None:
            cfg["budgets_ms"], cfg["budgets_iters"] = args.budget_ms, None
        if args.budget_iters is not None:
            cfg["budgets_iters"], cfg["budgets_ms"] = args.budget_iters, None
        _set(cfg, "depths", args.depth)
        _set(cfg, "trials", args.trials)
        _set(cfg, "episodes", args.episodes)
        return {"config": cfg, "out": args.out or doc.pop("out", None) or "bench-out"}

    _set(doc, "out", args.out)
    if cmd == "gen-world":
        for k in ("seed", "kind", "n", "n_states", "n_actions"):
            _set(doc, k, getattr(args, k))
    elif cmd == "gen-data":
        for k in ("seed", "world", "kind", "count"):
            _set(doc, k, getattr(args, k))
    elif cmd == "train-transition":
        for k in ("seed", "data", "backend", "epochs", "members", "k_mix", "reward", "aux_reward"):
            _set(doc, k, getattr(args, k))
    elif cmd == "train-reward":
        for k in ("seed", "data", "epochs"):
            _set(doc, k, getattr(args, k))
        if args.dense:
            doc["linear"] = False
    elif cmd == "plan":
        doc.pop("out", None)
        for k in ("world", "state", "candidates", "method"):
            _set(doc, k, getattr(args, k))
        if doc.get("method") is None and not doc.get("models") and not args.models:
            doc["method"] = "vanilla"
        if args.models:
            d = Path(args.models)
            doc["models"] = {"action": str(d / "action.json"), "next_state": str(d / "next_state.json"),
                             "reward": args.reward or str(d / "reward.json")}
        cfg = doc.setdefault("config", {})
        for k in ("seed", "lam", "gamma", "m", "chance", "latency_ms", "depth"):
            _set(cfg, k, getattr(args, k))
        _set(cfg, "workers", args.threads)
        if args.budget_ms is not None:
            cfg["budget_ms"], cfg["budget_iters"] = args.budget_ms, None
        if args.budget_iters is not None:
            cfg["budget_iters"], cfg["budget_ms"] = args.budget_iters, None
    elif cmd == "diag":
        if args.models:
            d = Path(args.models)
            doc["action"], doc["next_state"] = str(d / "action.json"), str(d / "next_state.json")
        for k in ("seed", "data", "mode", "limit"):
            _set(doc, k, getattr(args, k))
    return doc


def _remote(url, command, doc):
    import httpx

    resp = httpx.post(url.rstrip("/") + "/" + command, json=doc, timeout=None)
    try:
        body = resp.json()
    except ValueError:
        body = {"error": {"type": "HTTPError", "message": f"status {resp.status_code}: {resp.text[:200]}"}}
    if resp.status_code >= 400:
        if "error" not in body:
            body = {"error": {"type": "HTTPError", "message": json.dumps(body)}}
        return None, body
    return body, None


def _local(command, doc):
    from pydantic import ValidationError

    from . import service

    request_model, fn = service.OPERATIONS[command]
    try:
        req = request_model.model_validate(doc)
    except ValidationError as exc:
        msg = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        return None, {"error": {"type": "ValidationError", "message": msg}}
    return fn(req).model_dump(mode="json"), None


def _fail(body, code=EXIT_FAILURE):
    print(json.dumps(body, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .service import error_body

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail({"error": {"type": "UsageError", "message": str(exc)}}, EXIT_USAGE)
    if args.command == "serve":
        import uvicorn

        uvicorn.run("semplan.api:app", host=args.host, port=args.port)
        return 0
    try:
        doc = request_document(args)
        if args.server:
            result, err = _remote(args.server, args.command, doc)
        else:
            result, err = _local(args.command, doc)
    except KeyboardInterrupt:
        return _fail({"error": {"type": "Interrupted", "message": "interrupted; partial results flushed"}},
                     EXIT_INTERRUPTED)
    except Exception as exc:  # reported as a JSON error object
        return _fail(error_body(exc))
    if err is not None:
        return _fail(err)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
