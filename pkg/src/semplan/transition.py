"""Learned stochastic dynamics in embedding space.

Two sub-models make up a transition model: the action model samples an
action vector ``h_a`` given a state ``h_s``; the next-state model samples
``h_s'`` given ``(h_s, h_a)``. Each is backed either by a deep ensemble
(pick a member at random, add Gaussian jitter) or by a mixture density
network. Inputs and targets are normalised with their own statistics;
noise and mixtures live in normalised target units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dataio import Checkpoint, NormStats, TransitionRecord, denormalize, fit_norm, normalize, split

log = logging.getLogger(__name__)

ENSEMBLE_KIND = "dense-ensemble"
MDN_KIND = "mdn"


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class MdnHead:
    phi: np.ndarray  # (K,)
    mu: np.ndarray  # (K, n)
    sigma: np.ndarray  # (K, n)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma))):
            raise ValueError("non-finite MDN head values")
        if np.any(self.phi < 0) or abs(self.phi.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be a distribution")
        if np.any(self.sigma <= 0):
            raise ValueError("component scales must be positive")
        if self.mu.shape != self.sigma.shape or self.mu.shape[0] != self.phi.size:
            raise ValueError("inconsistent head shapes")

    @property
    def k_mix(self) -> int:
        return self.phi.size

    def mean(self) -> np.ndarray:
        return self.phi @ self.mu

    def to_raw(self) -> np.ndarray:
        """Raw network-output layout reproducing this head."""
        logits = np.log(np.maximum(self.phi, 1e-300))
        return np.concatenate([logits, self.mu.ravel(), np.log(self.sigma).ravel()])

    @classmethod
    def from_raw(cls, raw, k_mix: int) -> "MdnHead":
        logits, mu, ls = nc.split_mdn_output(np.atleast_2d(raw), k_mix)
        logits = logits[0] - nc.logsumexp(logits[0])
        return cls(np.exp(logits), mu[0], np.exp(np.clip(ls[0], nc.LOG_SIGMA_MIN, nc.LOG_SIGMA_MAX)))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        cdf = np.cumsum(self.phi)
        count = 1 if size is None else size
        ks = np.minimum(np.searchsorted(cdf, rng.random(count), side="right"), self.k_mix - 1)
        z = self.mu[ks] + self.sigma[ks] * rng.standard_normal((count, self.mu.shape[1]))
        return z[0] if size is None else z


@dataclass
class RewardHeadContext:
    """Linear reward map and anchor used by the auxiliary reward likelihood."""

    r_lin: np.ndarray  # (r, n)
    anchor: np.ndarray  # (n,)

    def __post_init__(self):
        self.r_lin = np.atleast_2d(np.asarray(self.r_lin, dtype=float))
        self.anchor = np.asarray(self.anchor, dtype=float)
        if self.r_lin.shape[1] != self.anchor.size:
            raise ValueError(f"R has {self.r_lin.shape[1]} columns but anchor has length {self.anchor.size}")

    def moments(self, head: MdnHead):
        """Per-component reward mean R(mu_k + anchor) and covariance R Sigma_k R^T."""
        mu_h = (head.mu + self.anchor) @ self.r_lin.T
        cov = np.einsum("in,kn,jn->kij", self.r_lin, head.sigma ** 2, self.r_lin)
        return mu_h, cov


def mdn_loss(head: MdnHead, target, *, drop_constant: bool = False) -> float:
    """-log sum_k phi_k N(target | mu_k, diag sigma_k^2), via log-sum-exp."""
    raw = head.to_raw()[None, :]
    loss, _ = nc.mdn_nll_and_grad(raw, np.atleast_2d(target), head.k_mix, drop_constant=drop_constant)
    return loss


def mdn_loss_aux(head: MdnHead, target, reward_target, ctx: RewardHeadContext, *,
                 drop_constant: bool = False) -> float:
    """Mixture NLL where each component also scores the reward target.

    State and reward likelihoods are treated as independent within a
    component.
    """
    if ctx.r_lin.shape[1] != head.mu.shape[1]:
        raise ValueError("reward matrix does not match the head dimension")
    raw = head.to_raw()[None, :]
    aux = (ctx.r_lin, ctx.anchor[None, :], np.atleast_2d(reward_target))
    loss, _ = nc.mdn_nll_and_grad(raw, np.atleast_2d(target), head.k_mix, drop_constant=drop_constant, aux=aux)
    return loss


# ------------------------------------------------------------------ models

class _Model:
    in_norm: NormStats
    out_norm: NormStats
    trained: bool

    def _check(self):
        if not self.trained:
            raise UntrainedModelError("model has not been trained or loaded")

    def sample(self, x, rng):
        return self.sample_many(x, 1, rng)[0]


@dataclass
class EnsembleModel(_Model):
    members: list[nc.DenseNet]
    in_norm: NormStats
    out_norm: NormStats
    jitter_sigma: float = 0.05
    trained: bool = True
    val_loss: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        dims = {(m.input_dim, m.output_dim) for m in self.members}
        if len(dims) != 1:
            raise ValueError("ensemble members must share input/output dimensions")
        if self.jitter_sigma < 0:
            raise ValueError("jitter must be non-negative")

    kind = ENSEMBLE_KIND

    def member_outputs(self, x) -> np.ndarray:
        z = normalize(x, self.in_norm)
        return np.stack([nc.forward(m, z) for m in self.members])

    def mean(self, x) -> np.ndarray:
        self._check()
        return denormalize(self.member_outputs(x).mean(axis=0), self.out_norm)

    def sample_many(self, x, count: int, rng) -> np.ndarray:
        self._check()
        z_in = normalize(x, self.in_norm)
        picks = rng.integers(len(self.members), size=count)
        if count == 1:
            out = nc.forward(self.members[picks[0]], z_in)[None, :].copy()
        else:
            out = np.empty((count, self.out_norm.dim))
            for i in np.unique(picks):
                out[picks == i] = nc.forward(self.members[i], z_in)
        if self.jitter_sigma > 0:
            out += self.jitter_sigma * rng.standard_normal(out.shape)
        return denormalize(out, self.out_norm)


@dataclass
class MdnModel(_Model):
    net: nc.DenseNet
    k_mix: int
    in_norm: NormStats
    out_norm: NormStats
    trained: bool = True
    val_loss: list = field(default_factory=list)

    kind = MDN_KIND

    def head(self, x) -> MdnHead:
        self._check()
        return MdnHead.from_raw(nc.forward(self.net, normalize(x, self.in_norm)), self.k_mix)

    def mean(self, x) -> np.ndarray:
        return denormalize(self.head(x).mean(), self.out_norm)

    def sample_many(self, x, count: int, rng) -> np.ndarray:
        # same draws as head(x).sample(rng, count), without building a validated head
        self._check()
        raw = nc.forward(self.net, normalize(x, self.in_norm))
        if raw.ndim != 1:
            return denormalize(self.head(x).sample(rng, size=count), self.out_norm)
        k, n = self.k_mix, self.out_norm.dim
        logits = raw[:k]
        cdf = np.cumsum(np.exp(logits - logits.max()))
        ks = np.minimum(np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right"), k - 1)
        mu = raw[k:k + k * n].reshape(k, n)
        sigma = np.exp(np.clip(raw[k + k * n:], nc.LOG_SIGMA_MIN, nc.LOG_SIGMA_MAX)).reshape(k, n)
        z = mu[ks] + sigma[ks] * rng.standard_normal((count, n))
        if not np.isfinite(z).all():
            raise ValueError("non-finite MDN sample")
        return denormalize(z, self.out_norm)


@dataclass
class TransitionModel:
    """Action model plus next-state model."""

    action: _Model
    next_state: _Model

    @property
    def dim(self) -> int:
        return self.action.in_norm.dim


def sample_action(model, h_s, rng) -> np.ndarray:
    if hasattr(model, "sample_action") and not isinstance(model, TransitionModel):
        return model.sample_action(h_s, rng)
    sub = model.action if isinstance(model, TransitionModel) else model
    h_s = np.asarray(h_s, dtype=float)
    if not np.all(np.isfinite(h_s)):
        raise ValueError("state vector has non-finite entries")
    return sub.sample(h_s, rng)


def sample_next_state(model, h_s, h_a, rng) -> np.ndarray:
    if hasattr(model, "sample_next_state") and not isinstance(model, TransitionModel):
        return model.sample_next_state(h_s, h_a, rng)
    sub = model.next_state if isinstance(model, TransitionModel) else model
    x = np.concatenate([np.asarray(h_s, dtype=float), np.asarray(h_a, dtype=float)])
    if not np.all(np.isfinite(x)):
        raise ValueError("input vector has non-finite entries")
    return sub.sample(x, rng)


# ---------------------------------------------------------------- training

@dataclass
class TrainHyper:
    epochs: int = 100
    lr: float = 0.05
    batch_size: int = 64
    hidden: int = 64
    depth: int = 2
    activation: str = "tanh"
    clip: float | None = 5.0
    valid_fraction: float = 0.1
    seeds: tuple = (0, 1, 2, 3)
    jitter_sigma: float = 0.05
    k_mix: int = 16
    mdn_lr: float = 0.01
    aux_reward: bool = False


@dataclass
class TransitionCheckpoints:
    action: Checkpoint
    next_state: Checkpoint


def _layer_sizes(n_in, n_out, hyper):
    sizes = [n_in] + [hyper.hidden] * hyper.depth + [n_out]
    acts = [hyper.activation] * hyper.depth + ["identity"]
    return sizes, acts


def _fit(net, x_tr, y_tr, x_va, y_va, loss_tag, epochs, lr, batch, clip, rng, *, k_mix=None,
         aux_tr=None, aux_va=None, what="model"):
    """Minibatch SGD; returns per-epoch validation loss (entry 0 = before training)."""
    kw = {"k_mix": k_mix} if k_mix else {}

    def val_loss():
        if len(x_va) == 0:
            return float("nan")
        extra = dict(kw)
        if aux_va is not None:
            extra["aux"] = aux_va
        return nc.backward(net, loss_tag, x_va, y_va, **extra).loss

    history = [val_loss()]
    n = len(x_tr)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            extra = dict(kw)
            if aux_tr is not None:
                r_mat, anchor, y = aux_tr
                extra["aux"] = (r_mat, anchor[idx], y[idx])
            grads = nc.backward(net, loss_tag, x_tr[idx], y_tr[idx], **extra)
            try:
                nc.sgd_step(net, grads, lr, clip=clip, inplace=True)
            except nc.TrainingDiverged as exc:
                raise nc.TrainingDiverged(f"{what}: diverged at epoch {epoch}: {exc}") from exc
        history.append(val_loss())
        if not np.isfinite(history[-1]) and len(x_va):
            raise nc.TrainingDiverged(f"{what}: non-finite validation loss at epoch {epoch}")
    return history


def _arrays(records, role):
    s = np.array([r.s for r in records])
    mid = np.array([r.s_mid for r in records])
    nxt = np.array([r.s_next for r in records])
    if role == "action":
        return s, mid - s
    return np.concatenate([s, mid - s], axis=1), nxt


def _norms(records, role):
    action_stats = fit_norm(records, lambda r: r.s_mid - r.s)
    state_stats = fit_norm(records, "s")
    if role == "action":
        return state_stats, action_stats
    return state_stats.concat(action_stats), fit_norm(records, "s_next")


def _reward_aux(records, out_norm, reward_head):
    """Auxiliary reward likelihood expressed in normalised next-state units."""
    r_raw, const = reward_head
    r_raw = np.atleast_2d(r_raw)
    r_norm = r_raw * out_norm.std[None, :]
    offset = r_raw @ out_norm.mean + const
    anchor = (r_norm.T @ np.linalg.lstsq(r_norm @ r_norm.T, np.atleast_1d(offset), rcond=None)[0])
    nxt = np.array([r.s_next for r in records])
    y = nxt @ r_raw.T + const
    return r_norm, np.broadcast_to(anchor, (len(records), anchor.size)).copy(), y


def _train_role(records, role, backend, hyper, seed, reward_head=None):
    if not records:
        raise ValueError("training needs a non-empty record set")
    n_out = len(records[0].s)
    if backend == "ensemble":
        members, logs = [], []
        for member_seed in hyper.seeds:
            s = seed + member_seed
            if hyper.valid_fraction > 0 and len(records) > 1:
                train, valid = split(records, 1 - hyper.valid_fraction, s)
            else:
                train, valid = list(records), []
            in_norm, out_norm = _norms(train if len(train) > 1 else records, role)
            rng = np.random.default_rng(s)
            x_tr, y_tr = _arrays(train, role)
            x_va, y_va = _arrays(valid, role) if valid else (np.empty((0, x_tr.shape[1])), np.empty((0, n_out)))
            x_tr, x_va = normalize(x_tr, in_norm), normalize(x_va, in_norm) if len(x_va) else x_va
            y_tr, y_va = normalize(y_tr, out_norm), normalize(y_va, out_norm) if len(y_va) else y_va
            sizes, acts = _layer_sizes(x_tr.shape[1], n_out, hyper)
            net = nc.init_net(sizes, acts, rng)
            logs.append(_fit(net, x_tr, y_tr, x_va, y_va, "mse", hyper.epochs, hyper.lr, hyper.batch_size,
                             hyper.clip, rng, what=f"{role} member seed {s}"))
            members.append((net, in_norm, out_norm))
        # one normalisation per checkpoint: members share the first member's stats
        base_in, base_out = members[0][1], members[0][2]
        nets = [_renormalize(net, i_n, o_n, base_in, base_out) for net, i_n, o_n in members]
        params = np.concatenate([m.flat_params() for m in nets])
        extra = {
            "role": role, "members": len(nets), "activations": nets[0].activations,
            "target_mean": base_out.mean.tolist(), "target_std": base_out.std.tolist(),
            "jitter_sigma": hyper.jitter_sigma, "member_seeds": [seed + s for s in hyper.seeds],
            "val_loss": np.mean(np.array(logs), axis=0).tolist(),
            "member_val_loss": [list(map(float, lg)) for lg in logs],
        }
        return Checkpoint(ENSEMBLE_KIND, nets[0].shapes, params, base_in.mean, base_in.std, seed,
                          hyper.epochs, extra)

    if backend != "mdn":
        raise ValueError(f"unknown backend {backend!r}")
    if hyper.valid_fraction > 0 and len(records) > 1:
        train, valid = split(records, 1 - hyper.valid_fraction, seed)
    else:
        train, valid = list(records), []
    in_norm, out_norm = _norms(train if len(train) > 1 else records, role)
    rng = np.random.default_rng(seed)
    x_tr, y_tr = _arrays(train, role)
    x_tr, y_tr = normalize(x_tr, in_norm), normalize(y_tr, out_norm)
    if valid:
        x_va, y_va = _arrays(valid, role)
        x_va, y_va = normalize(x_va, in_norm), normalize(y_va, out_norm)
    else:
        x_va, y_va = np.empty((0, x_tr.shape[1])), np.empty((0, n_out))
    k = hyper.k_mix
    sizes, acts = _layer_sizes(x_tr.shape[1], k * (1 + 2 * n_out), hyper)
    net = nc.init_net(sizes, acts, rng)
    _spread_means(net, y_tr, k, rng)
    loss_tag, aux_tr, aux_va = "mdn_nll", None, None
    if reward_head is not None and role == "next_state":
        loss_tag = "mdn_nll_aux"
        aux_tr = _reward_aux(train, out_norm, reward_head)
        aux_va = _reward_aux(valid, out_norm, reward_head) if valid else None
    history = _fit(net, x_tr, y_tr, x_va, y_va, loss_tag, hyper.epochs, hyper.mdn_lr, hyper.batch_size,
                   hyper.clip, rng, k_mix=k, aux_tr=aux_tr, aux_va=aux_va, what=f"{role} mdn")
    extra = {"role": role, "k_mix": k, "activations": net.activations, "loss": loss_tag,
             "target_mean": out_norm.mean.tolist(), "target_std": out_norm.std.tolist(),
             "val_loss": history}
    return Checkpoint(MDN_KIND, net.shapes, net.flat_params(), in_norm.mean, in_norm.std, seed,
                      hyper.epochs, extra)


def _spread_means(net, y, k, rng):
    """Start component means on random training targets so components do not coincide."""
    n = y.shape[1]
    last = net.layers[-1]
    picks = y[rng.choice(len(y), size=k, replace=len(y) < k)]
    last.bias[k:k + k * n] = picks.ravel()
    last.weight[k:k + k * n] *= 0.1


def _renormalize(net, in_a, out_a, in_b, out_b):
    """Rewrite a net trained under stats (in_a, out_a) to accept/emit under (in_b, out_b).

    Both ends are affine, so the first and last layers absorb the change exactly.
    """
    net = net.copy()
    first, last = net.layers[0], net.layers[-1]
    # z_a = (x - m_a)/s_a = (z_b * s_b + m_b - m_a)/s_a
    scale = in_b.std / in_a.std
    shift = (in_b.mean - in_a.mean) / in_a.std
    first.bias = first.bias + first.weight @ shift
    first.weight = first.weight * scale[None, :]
    # y_b = (y_a * s_a + m_a - m_b)/s_b
    oscale = out_a.std / out_b.std
    oshift = (out_a.mean - out_b.mean) / out_b.std
    last.weight = last.weight * oscale[:, None]
    last.bias = last.bias * oscale + oshift
    return net


def train_transition(records: list[TransitionRecord], backend: str = "ensemble",
                     hyper: TrainHyper | None = None, seed: int = 0,
                     reward_head=None) -> TransitionCheckpoints:
    """Train the action and next-state sub-models.

    ``reward_head`` is an optional ``(R, const)`` linear reward map; when
    given and ``hyper.aux_reward`` is set, the next-state MDN is trained with
    the auxiliary reward likelihood.
    """
    hyper = hyper or TrainHyper()
    if backend not in ("ensemble", "mdn"):
        raise ValueError(f"unknown backend {backend!r}")
    head = reward_head if (hyper.aux_reward and backend == "mdn") else None
    return TransitionCheckpoints(
        action=_train_role(records, "action", backend, hyper, seed),
        next_state=_train_role(records, "next_state", backend, hyper, seed, head),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> _Model:
    acts = ckpt.extra["activations"]
    in_norm = ckpt.norm
    out_norm = NormStats(np.asarray(ckpt.extra["target_mean"]), np.asarray(ckpt.extra["target_std"]))
    if ckpt.kind == ENSEMBLE_KIND:
        per = sum(i * o + o for i, o in ckpt.shapes)
        members = [nc.net_from_flat(ckpt.shapes, acts, ckpt.params[j * per:(j + 1) * per])
                   for j in range(int(ckpt.extra.get("members", 1)))]
        return EnsembleModel(members, in_norm, out_norm, float(ckpt.extra.get("jitter_sigma", 0.05)),
                             val_loss=list(ckpt.extra.get("val_loss", [])))
    if ckpt.kind == MDN_KIND:
        net = nc.net_from_flat(ckpt.shapes, acts, ckpt.params)
        return MdnModel(net, int(ckpt.extra["k_mix"]), in_norm, out_norm,
                        val_loss=list(ckpt.extra.get("val_loss", [])))
    raise ValueError(f"not a transition checkpoint kind: {ckpt.kind!r}")


def transition_from_checkpoints(action: Checkpoint, next_state: Checkpoint) -> TransitionModel:
    return TransitionModel(model_from_checkpoint(action), model_from_checkpoint(next_state))


# ------------------------------------------------------------- diagnostics

@dataclass
class DiagnosticsSummary:
    cosine: np.ndarray
    norm_ratio: np.ndarray
    cos_edges: np.ndarray
    ratio_edges: np.ndarray
    counts: np.ndarray  # (len(cos_edges)-1, len(ratio_edges)-1)
    skipped: int

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosine)) if self.cosine.size else float("nan")

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.norm_ratio)) if self.norm_ratio.size else float("nan")

    def to_dict(self) -> dict:
        return {"mean_cosine": self.mean_cosine, "mean_norm_ratio": self.mean_ratio,
                "records": int(self.cosine.size), "skipped": self.skipped,
                "cos_edges": self.cos_edges.tolist(), "ratio_edges": self.ratio_edges.tolist(),
                "counts": self.counts.astype(int).tolist()}


def difference_diagnostics(pred, truth, cos_bins: int = 20, ratio_bins: int = 30,
                           ratio_max: float = 3.0) -> DiagnosticsSummary:
    """Cosine similarity and norm ratio of predicted vs true difference vectors."""
    pred, truth = np.atleast_2d(pred), np.atleast_2d(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    tn = np.linalg.norm(truth, axis=1)
    keep = tn > 0
    pn = np.linalg.norm(pred[keep], axis=1)
    dots = np.sum(pred[keep] * truth[keep], axis=1)
    cos = np.where(pn > 0, dots / np.maximum(pn * tn[keep], 1e-300), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    ratio = pn / tn[keep]
    cos_edges = np.linspace(-1.0, 1.0, cos_bins + 1)
    ratio_edges = np.linspace(0.0, ratio_max, ratio_bins + 1)
    counts, _, _ = np.histogram2d(cos, np.minimum(ratio, ratio_max), bins=[cos_edges, ratio_edges])
    return DiagnosticsSummary(cos, ratio, cos_edges, ratio_edges, counts, int((~keep).sum()))


def prediction_diagnostics(model: TransitionModel, records, role: str = "action", mode: str = "mean",
                           rng=None) -> DiagnosticsSummary:
    """Compare model predictions with recorded transitions.

    ``role="action"`` compares predicted vs true action vectors; for
    ``"next_state"`` both sides are measured from the post-action point
    ``s_mid``. ``mode`` is ``"mean"`` or ``"sample"``.
    """
    rng = rng or np.random.default_rng(0)
    sub = model.action if role == "action" else model.next_state
    pred, truth = [], []
    for r in records:
        if role == "action":
            x, base, tgt = r.s, r.s, r.s_mid
        else:
            x, base, tgt = np.concatenate([r.s, r.s_mid - r.s]), r.s_mid, r.s_next
        y = sub.mean(x) if mode == "mean" else sub.sample(x, rng)
        if role == "action":
            pred.append(y)
            truth.append(tgt - base)
        else:
            pred.append(y - base)
            truth.append(tgt - base)
    return difference_diagnostics(np.array(pred), np.array(truth))
