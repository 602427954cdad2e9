"""Datasets, normalisation statistics, splits and checkpoints.

Datasets are newline-delimited JSON: a header ``{"dims": n, "count": N}``
followed by one object per record. Checkpoints are a single JSON object.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

log = logging.getLogger(__name__)

EPS_STD = 1e-6


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint file."""


@dataclass(frozen=True)
class TransitionRecord:
    s: np.ndarray
    s_mid: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        if not (len(self.s) == len(self.s_mid) == len(self.s_next)):
            raise DataFormatError(
                f"dimension mismatch: s={len(self.s)} s_mid={len(self.s_mid)} s_next={len(self.s_next)}")

    @property
    def action(self) -> np.ndarray:
        return self.s_mid - self.s


@dataclass(frozen=True)
class RewardRecord:
    s: np.ndarray
    y: float


class LoadResult(list):
    """A list of records that also remembers the header and warnings."""

    def __init__(self, items=(), dims=None, warnings=None):
        super().__init__(items)
        self.dims = dims
        self.warnings = list(warnings or [])

    @property
    def empty_warning(self) -> bool:
        return "empty" in self.warnings


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def concat(self, other: "NormStats") -> "NormStats":
        return NormStats(np.concatenate([self.mean, other.mean]), np.concatenate([self.std, other.std]))


# ------------------------------------------------------------- datasets

def _vec(obj, key, lineno) -> np.ndarray:
    try:
        arr = np.asarray(obj[key], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"line {lineno}: bad or missing field {key!r}") from exc
    if arr.ndim != 1:
        raise DataFormatError(f"line {lineno}: field {key!r} is not a flat array")
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"line {lineno}: field {key!r} has non-finite values")
    return arr


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc


def _load(path, parse) -> LoadResult:
    lines = _read_lines(path)
    header = next(lines, None)
    if header is None:
        log.warning("%s is empty", path)
        return LoadResult(dims=None, warnings=["empty"])
    lineno, head = header
    if not isinstance(head, dict) or "dims" not in head:
        raise DataFormatError(f"line {lineno}: expected header object with 'dims'")
    dims = int(head["dims"])
    records = []
    for index, (lineno, obj) in enumerate(lines):
        if not isinstance(obj, dict):
            raise DataFormatError(f"line {lineno}: expected an object")
        rec = parse(obj, lineno, index, dims)
        records.append(rec)
    warnings = []
    if "count" in head and int(head["count"]) != len(records):
        warnings.append(f"header count {head['count']} != {len(records)} records")
    if not records:
        warnings.append("empty")
    for w in warnings:
        log.warning("%s: %s", path, w)
    return LoadResult(records, dims=dims, warnings=warnings)


def load_transitions(path) -> LoadResult:
    def parse(obj, lineno, index, dims):
        s, mid, nxt = (_vec(obj, k, lineno) for k in ("s", "s_mid", "s_next"))
        if not (s.size == mid.size == nxt.size == dims):
            raise DataFormatError(
                f"record {index} (line {lineno}): dimension mismatch "
                f"s={s.size} s_mid={mid.size} s_next={nxt.size} dims={dims}")
        return TransitionRecord(s, mid, nxt)

    return _load(path, parse)


def load_rewards(path) -> LoadResult:
    def parse(obj, lineno, index, dims):
        s = _vec(obj, "s", lineno)
        if s.size != dims:
            raise DataFormatError(f"record {index} (line {lineno}): dimension {s.size} != {dims}")
        try:
            y = float(obj["y"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"line {lineno}: bad or missing field 'y'") from exc
        return RewardRecord(s, y)

    return _load(path, parse)


def _write_lines(path, dims, rows: list[dict]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dims": dims, "count": len(rows)}) + "\n")
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def save_transitions(path, records: list[TransitionRecord]):
    dims = len(records[0].s) if records else 0
    _write_lines(path, dims, [
        {"s": r.s.tolist(), "s_mid": r.s_mid.tolist(), "s_next": r.s_next.tolist()} for r in records])


def save_rewards(path, records: list[RewardRecord]):
    dims = len(records[0].s) if records else 0
    _write_lines(path, dims, [{"s": r.s.tolist(), "y": float(r.y)} for r in records])


# --------------------------------------------------------- normalisation

def fit_norm(records: Iterable, field_selector: Callable | str = "s") -> NormStats:
    """Per-dimension mean and population std of one record field.

    ``field_selector`` is an attribute name or a callable mapping a record
    to a vector. Std is floored at ``EPS_STD``.
    """
    get = (lambda r: getattr(r, field_selector)) if isinstance(field_selector, str) else field_selector
    data = np.array([get(r) for r in records], dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("fit_norm needs at least 2 records")
    # sort first so the result is independent of record order
    data = np.sort(data, axis=0)
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), EPS_STD)
    return NormStats(mean, std)


def normalize(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != stats.dim:
        raise ValueError(f"vector of length {x.shape[-1]} does not match stats of length {stats.dim}")
    return (x - stats.mean) / stats.std


def denormalize(z, stats: NormStats) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != stats.dim:
        raise ValueError(f"vector of length {z.shape[-1]} does not match stats of length {stats.dim}")
    return z * stats.std + stats.mean


def split(records, fraction: float, seed: int):
    """Seeded shuffle then cut into (train, valid)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    records = list(records)
    perm = np.random.default_rng(seed).permutation(len(records))
    cut = int(round(fraction * len(records)))
    return [records[i] for i in perm[:cut]], [records[i] for i in perm[cut:]]


# ------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    kind: str
    shapes: list
    params: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    seed: int
    epochs: int
    extra: dict = field(default_factory=dict)

    REQUIRED = ("kind", "shapes", "params", "norm_mean", "norm_std", "seed", "epochs")

    @property
    def norm(self) -> NormStats:
        return NormStats(np.asarray(self.norm_mean), np.asarray(self.norm_std))

    def to_dict(self) -> dict:
        doc = {
            "kind": self.kind,
            "shapes": [list(map(int, s)) for s in self.shapes],
            "params": [float(v) for v in np.asarray(self.params).ravel()],
            "norm_mean": [float(v) for v in np.asarray(self.norm_mean)],
            "norm_std": [float(v) for v in np.asarray(self.norm_std)],
            "seed": int(self.seed),
            "epochs": int(self.epochs),
        }
        doc.update(self.extra)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        missing = [k for k in cls.REQUIRED if k not in doc]
        if missing:
            raise DataFormatError(f"checkpoint missing fields: {missing}")
        extra = {k: v for k, v in doc.items() if k not in cls.REQUIRED}
        ckpt = cls(
            kind=doc["kind"],
            shapes=[tuple(s) for s in doc["shapes"]],
            params=np.asarray(doc["params"], dtype=float),
            norm_mean=np.asarray(doc["norm_mean"], dtype=float),
            norm_std=np.asarray(doc["norm_std"], dtype=float),
            seed=int(doc["seed"]),
            epochs=int(doc["epochs"]),
            extra=extra,
        )
        per_member = sum(i * o + o for i, o in ckpt.shapes)
        members = int(extra.get("members", 1))
        if per_member * members != ckpt.params.size:
            raise DataFormatError(
                f"checkpoint has {ckpt.params.size} params, shapes imply {per_member * members}")
        return ckpt


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_text(json.dumps(ckpt.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed checkpoint ({exc.msg})") from exc
    return Checkpoint.from_dict(doc)
