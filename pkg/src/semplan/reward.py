"""Point-wise reward model over embeddings.

The model scores a single point; a turn's reward is the change in score
between consecutive points, so summed turn rewards telescope. Inputs are
normalised, labels are not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dataio import Checkpoint, NormStats, RewardRecord, fit_norm, normalize, split

LINEAR_KIND = "reward-linear"
DENSE_KIND = "reward-dense"


@dataclass
class RewardModel:
    net: nc.DenseNet
    norm: NormStats
    kind: str = LINEAR_KIND
    val_loss: list = field(default_factory=list)

    def __post_init__(self):
        if self.net.output_dim != 1:
            raise ValueError("reward network must have a scalar output")

    def value(self, h) -> float:
        return float(nc.forward(self.net, normalize(h, self.norm))[0])

    def values(self, hs) -> np.ndarray:
        return nc.forward(self.net, normalize(np.atleast_2d(hs), self.norm))[:, 0]

    def linear_head(self):
        """(R, const) with value(h) == R @ h + const, for single-layer identity nets."""
        if len(self.net.layers) != 1 or self.net.layers[0].activation != "identity":
            raise ValueError("reward model is not linear")
        layer = self.net.layers[0]
        r = layer.weight / self.norm.std[None, :]
        const = float(layer.bias[0] - r[0] @ self.norm.mean)
        return r, const


def instantaneous_reward(model: RewardModel, h_s, h_s_next) -> float:
    h_s, h_s_next = np.asarray(h_s, dtype=float), np.asarray(h_s_next, dtype=float)
    if h_s.shape != h_s_next.shape:
        raise ValueError("state vectors differ in shape")
    return model.value(h_s_next) - model.value(h_s)


@dataclass
class RewardHyper:
    epochs: int = 100
    lr: float = 0.05
    batch_size: int = 64
    linear: bool = True
    hidden: int = 64
    clip: float | None = 5.0
    valid_fraction: float = 0.1


def train_reward(records: list[RewardRecord], hyper: RewardHyper | None = None, seed: int = 0) -> Checkpoint:
    hyper = hyper or RewardHyper()
    if not records:
        raise ValueError("training needs a non-empty labelled set")
    if hyper.valid_fraction > 0 and len(records) > 2:
        train, valid = split(records, 1 - hyper.valid_fraction, seed)
    else:
        train, valid = list(records), []
    norm = fit_norm(train if len(train) > 1 else records, "s")
    rng = np.random.default_rng(seed)
    n = len(records[0].s)
    if hyper.linear:
        net = nc.init_net([n, 1], ["identity"], rng)
        kind = LINEAR_KIND
    else:
        net = nc.init_net([n, hyper.hidden, 1], ["tanh", "identity"], rng)
        kind = DENSE_KIND
    x_tr = normalize(np.array([r.s for r in train]), norm)
    y_tr = np.array([[r.y] for r in train])
    x_va = normalize(np.array([r.s for r in valid]), norm) if valid else np.empty((0, n))
    y_va = np.array([[r.y] for r in valid]) if valid else np.empty((0, 1))

    def val():
        return nc.backward(net, "mse", x_va, y_va).loss if len(x_va) else float("nan")

    history = [val()]
    for epoch in range(hyper.epochs):
        perm = rng.permutation(len(x_tr))
        for start in range(0, len(x_tr), hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            grads = nc.backward(net, "mse", x_tr[idx], y_tr[idx])
            try:
                nc.sgd_step(net, grads, hyper.lr, clip=hyper.clip, inplace=True)
            except nc.TrainingDiverged as exc:
                raise nc.TrainingDiverged(f"reward model diverged at epoch {epoch}: {exc}") from exc
        history.append(val())
    return Checkpoint(kind, net.shapes, net.flat_params(), norm.mean, norm.std, seed, hyper.epochs,
                      {"activations": net.activations, "val_loss": history})


def reward_from_checkpoint(ckpt: Checkpoint) -> RewardModel:
    if ckpt.kind not in (LINEAR_KIND, DENSE_KIND):
        raise ValueError(f"not a reward checkpoint kind: {ckpt.kind!r}")
    net = nc.net_from_flat(ckpt.shapes, ckpt.extra["activations"], ckpt.params)
    return RewardModel(net, ckpt.norm, ckpt.kind, list(ckpt.extra.get("val_loss", [])))


def linear_reward(weights, bias: float = 0.0) -> RewardModel:
    """Exact linear reward model w.h + bias with identity normalisation."""
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    net = nc.DenseNet([nc.Layer(w.copy(), np.array([float(bias)]), "identity")])
    return RewardModel(net, NormStats.identity(w.shape[1]))
