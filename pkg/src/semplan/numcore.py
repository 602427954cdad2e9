"""Small dense-network kernel with hand-written gradients.

Everything here works on plain numpy arrays. A single sample is a 1-D
array; a batch is a 2-D array with one sample per row. Losses are averaged
over the batch.

MDN heads use the flat layout ``[logits (K), means (K*n), log-sigmas (K*n)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity", "softmax")
LOSS_TAGS = ("mse", "mdn_nll", "mdn_nll_aux")

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 4.0
SIGMA_HARM_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Input shape does not fit the network or loss."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.weight.shape[1]), int(self.weight.shape[0])


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {layer.activation!r}")
            if layer.activation == "softmax" and i != len(self.layers) - 1:
                raise ShapeError("softmax is only allowed on the final layer")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.weight.shape[0]},)")
            if i and layer.weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ShapeError(f"layer {i} input {layer.weight.shape[1]} does not chain")

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weight.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].weight.shape[0])

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [layer.shape for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def flat_params(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weight.ravel())
            parts.append(layer.bias.ravel())
        return np.concatenate(parts)

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


@dataclass
class GradBundle:
    loss: float
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(w * w) + np.sum(b * b) for w, b in zip(self.weights, self.biases))))


def init_net(sizes, activations, rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform initialisation, zero biases.

    ``sizes`` lists layer widths including input and output, so
    ``init_net([2, 8, 1], ["tanh", "identity"], rng)`` builds two layers.
    """
    if len(activations) != len(sizes) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def net_from_flat(shapes, activations, params) -> DenseNet:
    params = np.asarray(params, dtype=float)
    expected = sum(i * o + o for i, o in shapes)
    if params.size != expected:
        raise ShapeError(f"parameter count {params.size} does not match shapes ({expected})")
    layers, pos = [], 0
    for (fan_in, fan_out), act in zip(shapes, activations):
        w = params[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in).copy()
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out].copy()
        pos += fan_out
        layers.append(Layer(w, b, act))
    return DenseNet(layers)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return np.tanh(z)
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return z


def _activation_backward(g: np.ndarray, z: np.ndarray, y: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return g * (1.0 - y * y)
    if act == "relu":
        return g * (z > 0)
    if act == "softmax":
        return y * (g - np.sum(g * y, axis=-1, keepdims=True))
    return g


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ShapeError(f"{what} has shape {x.shape}, expected last dimension {dim}")
    return xb, single


def forward(net: DenseNet, x) -> np.ndarray:
    if type(x) is np.ndarray and x.ndim == 1 and x.shape[0] == net.input_dim:
        h = x  # single-vector fast path used inside tree search
        for layer in net.layers:
            h = _activate(layer.weight @ h + layer.bias, layer.activation)
        return h
    xb, single = _as_batch(x, net.input_dim, "input")
    h = xb
    for layer in net.layers:
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
    return h[0] if single else h


def _forward_cache(net: DenseNet, xb: np.ndarray):
    inputs, pre, post = [], [], []
    h = xb
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = _activate(z, layer.activation)
        pre.append(z)
        post.append(h)
    return inputs, pre, post


# ---------------------------------------------------------------- MDN maths

def split_mdn_output(out: np.ndarray, k_mix: int):
    """Split raw batch output into (logits, means, raw log-sigmas)."""
    b, p = out.shape
    if (p - k_mix) % (2 * k_mix) or p <= k_mix:
        raise ShapeError(f"output width {p} is not a K(1+2n) MDN layout for K={k_mix}")
    n = (p - k_mix) // (2 * k_mix)
    logits = out[:, :k_mix]
    mu = out[:, k_mix:k_mix + k_mix * n].reshape(b, k_mix, n)
    log_sigma = out[:, k_mix + k_mix * n:].reshape(b, k_mix, n)
    return logits, mu, log_sigma


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def mdn_nll_and_grad(out, target, k_mix, *, drop_constant=False, aux=None):
    """Mixture negative log-likelihood and its gradient w.r.t. the raw head.

    ``out`` is (B, K(1+2n)) raw network output, ``target`` is (B, n).
    ``aux`` optionally carries ``(R, anchor, reward_target)`` with R of
    shape (r, n), anchor (B, n) and reward_target (B, r); the reward factor
    uses mean R(mu_k + anchor) and covariance R diag(sigma_k^2) R^T.
    Returns (mean loss, d loss / d out).
    """
    out = np.asarray(out, dtype=float)
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(out)):
        raise TrainingDiverged("non-finite MDN head values")
    logits, mu, raw_ls = split_mdn_output(out, k_mix)
    bsz, _, n = mu.shape
    if target.shape != (bsz, n):
        raise ShapeError(f"target shape {target.shape} does not match head ({bsz}, {n})")
    log_sigma = np.clip(raw_ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    ls_mask = (raw_ls >= LOG_SIGMA_MIN) & (raw_ls <= LOG_SIGMA_MAX)

    log_phi = logits - logsumexp(logits)[:, None]
    inv_var = np.exp(-2.0 * log_sigma)
    diff = target[:, None, :] - mu
    comp = log_phi - 0.5 * np.sum(diff * diff * inv_var, axis=2) - np.sum(log_sigma, axis=2)
    if not drop_constant:
        comp = comp - 0.5 * n * LOG_2PI

    dmu_inner = diff * inv_var
    ds_inner = diff * diff * inv_var - 1.0
    if aux is not None:
        r_mat, anchor, y = aux
        r_mat = np.atleast_2d(np.asarray(r_mat, dtype=float))
        r = r_mat.shape[0]
        if r_mat.shape[1] != n:
            raise ShapeError(f"reward matrix has {r_mat.shape[1]} columns, head has n={n}")
        if r > n:
            raise ShapeError(f"reward matrix has {r} rows but only n={n} columns; "
                             "its covariance R Sigma R^T would be singular")
        anchor = np.broadcast_to(np.asarray(anchor, dtype=float), (bsz, n))
        y = np.asarray(y, dtype=float).reshape(bsz, r)
        var = np.exp(2.0 * log_sigma)
        mu_h = (mu + anchor[:, None, :]) @ r_mat.T  # (B,K,r)
        sig_h = np.einsum("in,bkn,jn->bkij", r_mat, var, r_mat)
        floor_mask = np.ones((bsz, k_mix))
        if r == 1:
            floored = sig_h[..., 0, 0] < SIGMA_HARM_FLOOR
            sig_h[..., 0, 0] = np.where(floored, SIGMA_HARM_FLOOR, sig_h[..., 0, 0])
            floor_mask = (~floored).astype(float)
        try:
            sinv = np.linalg.inv(sig_h)
        except np.linalg.LinAlgError as exc:
            raise ValueError("reward covariance R Sigma R^T is singular; R must have full row rank") from exc
        _, logdet = np.linalg.slogdet(sig_h)
        delta = y[:, None, :] - mu_h
        sd = np.einsum("bkij,bkj->bki", sinv, delta)
        comp = comp - 0.5 * np.sum(delta * sd, axis=2) - 0.5 * logdet
        if not drop_constant:
            comp = comp - 0.5 * r * LOG_2PI
        dmu_inner = dmu_inner + sd @ r_mat
        g_mat = 0.5 * (np.einsum("bki,bkj->bkij", sd, sd) - sinv)
        rgr = np.einsum("in,bkij,jn->bkn", r_mat, g_mat, r_mat)
        ds_inner = ds_inner + 2.0 * var * rgr * floor_mask[:, :, None]

    lse = logsumexp(comp)
    loss = -float(np.mean(lse))
    resp = np.exp(comp - lse[:, None])
    phi = np.exp(log_phi)

    d_logits = (phi - resp) / bsz
    d_mu = -resp[:, :, None] * dmu_inner / bsz
    d_ls = -resp[:, :, None] * ds_inner * ls_mask / bsz
    grad = np.concatenate([d_logits, d_mu.reshape(bsz, -1), d_ls.reshape(bsz, -1)], axis=1)
    return loss, grad


# ------------------------------------------------------------ backward

def backward(net: DenseNet, loss_tag: str, x, target, *, k_mix: int | None = None,
             drop_constant: bool = False, aux=None) -> GradBundle:
    """Loss value and parameter gradients for one sample or a batch.

    ``mse`` is the squared error summed over outputs and averaged over
    samples. ``mdn_nll`` needs ``k_mix``; ``mdn_nll_aux`` additionally needs
    ``aux=(R, anchor, reward_target)``.
    """
    if loss_tag not in LOSS_TAGS:
        raise ValueError(f"unknown loss tag {loss_tag!r}")
    xb, _ = _as_batch(x, net.input_dim, "input")
    tgt = np.asarray(target, dtype=float)
    if tgt.ndim == 1 and xb.shape[0] == 1 and loss_tag == "mse":
        tgt = tgt[None, :]
    inputs, pre, post = _forward_cache(net, xb)
    out = post[-1]
    bsz = xb.shape[0]

    if loss_tag == "mse":
        if tgt.shape != out.shape:
            raise ShapeError(f"target shape {tgt.shape} does not match output {out.shape}")
        err = out - tgt
        loss = float(np.sum(err * err) / bsz)
        g = 2.0 * err / bsz
    else:
        if k_mix is None:
            raise ValueError("MDN losses need k_mix")
        if net.layers[-1].activation != "identity":
            raise ShapeError("MDN head must be a raw (identity) output layer")
        if tgt.ndim == 1:
            tgt = tgt[None, :]
        if loss_tag == "mdn_nll_aux":
            if aux is None:
                raise ValueError("mdn_nll_aux needs aux=(R, anchor, reward_target)")
            r_mat, anchor, y = aux
            anchor = np.asarray(anchor, dtype=float)
            if anchor.ndim == 1:
                anchor = np.broadcast_to(anchor, (bsz, anchor.size))
            y = np.asarray(y, dtype=float).reshape(bsz, -1)
            aux = (r_mat, anchor, y)
        else:
            aux = None
        loss, g = mdn_nll_and_grad(out, tgt, k_mix, drop_constant=drop_constant, aux=aux)

    gw, gb = [None] * len(net.layers), [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = _activation_backward(g, pre[i], post[i], layer.activation)
        gw[i] = g.T @ inputs[i]
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ layer.weight
    return GradBundle(loss, gw, gb)


def sgd_step(net: DenseNet, grads: GradBundle, lr: float, *, clip: float | None = 5.0,
             inplace: bool = False) -> DenseNet:
    """One plain SGD update, optionally clipping the gradient's global L2 norm."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    norm = grads.norm()
    if not math.isfinite(norm) or not math.isfinite(grads.loss):
        raise TrainingDiverged(f"non-finite gradient (norm={norm}, loss={grads.loss})")
    scale = lr
    if clip is not None and norm > clip:
        scale = lr * clip / norm
    target = net if inplace else net.copy()
    for layer, gw, gb in zip(target.layers, grads.weights, grads.biases):
        layer.weight -= scale * gw
        layer.bias -= scale * gb
    return target


def gaussian_logpdf_diag(x, mu, sigma, *, drop_constant: bool = False) -> float:
    """Log density of a diagonal Gaussian.

    With ``drop_constant`` the ``-(n/2) log 2pi`` constant is left out.
    """
    x, mu, sigma = (np.asarray(v, dtype=float) for v in (x, mu, sigma))
    if not (x.shape == mu.shape == sigma.shape):
        raise ShapeError("x, mu and sigma must share a shape")
    if np.any(sigma <= 0):
        raise ValueError("sigma entries must be positive")
    val = -0.5 * np.sum(((x - mu) / sigma) ** 2) - np.sum(np.log(sigma))
    if not drop_constant:
        val -= 0.5 * x.size * LOG_2PI
    return float(val)


def numerical_grad(fn, net: DenseNet, eps: float | None = None, order: int = 2) -> np.ndarray:
    """Finite-difference gradient of ``fn(net)`` over every parameter, flat order.

    ``order=2`` is the classic central difference (default step 1e-5).
    ``order=4`` uses the five-point stencil (default step 1e-3), whose
    smaller round-off matters when the loss is large and some gradient
    entries are tiny.
    """
    if order == 2:
        offsets, weights, default = (1, -1), (1.0, -1.0), 1e-5
        scale = 2.0
    elif order == 4:
        offsets, weights, default = (2, 1, -1, -2), (-1.0, 8.0, -8.0, 1.0), 1e-3
        scale = 12.0
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    h = default if eps is None else eps
    probe = net.copy()
    out = []
    for layer in probe.layers:
        for arr in (layer.weight, layer.bias):
            flat = arr.reshape(-1)
            for j in range(flat.size):
                old = flat[j]
                acc = 0.0
                for d, w in zip(offsets, weights):
                    flat[j] = old + d * h
                    acc += w * fn(probe)
                flat[j] = old
                out.append(acc / (scale * h))
    return np.array(out)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a-b| / max(|a|, |b|, floor) over entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
