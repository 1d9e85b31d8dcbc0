"""Dense layer primitives with hand-written backward passes.

Every forward function that needs to be differentiated returns ``(out, cache)``
and has a matching ``*_backward(dout, cache)``. Arrays are float64 numpy
arrays; sequence layers take a leading batch axis ``(B, N, ...)`` and also
accept a single ``(N, ...)`` sequence.

LSTM gate blocks are laid out along the last axis of the weight matrices in
the fixed order (input, forget, candidate, output).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, InputFormatError, NonFiniteGradientError, NumericalError, NumericalWarning

DTYPE = np.float64
GATE_ORDER = ("input", "forget", "candidate", "output")

ParamSet = dict  # name -> np.ndarray, insertion order is the canonical order
GradSet = dict


def _as_float(x) -> np.ndarray:
    # keep float64/longdouble as given, promote everything else to float64
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(DTYPE)


def new_rng(seed: int) -> np.random.Generator:
    """Seeded generator backed by PCG64 (numpy's default bit generator)."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# lookup and window sliding
# ---------------------------------------------------------------------------

def embedding_forward(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].flat[0]
        raise InputFormatError(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")
    return table[ids]


def embedding_backward(dout: np.ndarray, ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Scatter-add rows of ``dout`` into a table-shaped gradient."""
    d = dout.shape[-1]
    dtable = np.zeros((vocab_size, d), dtype=dout.dtype)
    np.add.at(dtable, np.asarray(ids).reshape(-1), dout.reshape(-1, d))
    return dtable


def window_concat(embeds: np.ndarray, none_row: np.ndarray, window: int = 5) -> np.ndarray:
    """Concatenate each position with its ``window // 2`` neighbours on each side.

    Slots falling outside ``[0, N)`` read ``none_row``. Output shape is
    ``(..., N, window * d)`` with the slots ordered left to right.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be a positive odd integer, got {window}")
    half = window // 2
    n, d = embeds.shape[-2], embeds.shape[-1]
    lead = embeds.shape[:-2]
    pad = np.broadcast_to(none_row, lead + (half, d))
    padded = np.concatenate([pad, embeds, pad], axis=-2)
    slots = [padded[..., k:k + n, :] for k in range(window)]
    return np.concatenate(slots, axis=-1)


def window_concat_backward(dout: np.ndarray, window: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(d_embeds, d_none_row)``; the none row collects every padded slot."""
    half = window // 2
    n = dout.shape[-2]
    d = dout.shape[-1] // window
    lead = dout.shape[:-2]
    dpadded = np.zeros(lead + (n + 2 * half, d), dtype=dout.dtype)
    for k in range(window):
        dpadded[..., k:k + n, :] += dout[..., k * d:(k + 1) * d]
    d_embeds = dpadded[..., half:half + n, :]
    d_none = dpadded[..., :half, :].reshape(-1, d).sum(axis=0) + dpadded[..., half + n:, :].reshape(-1, d).sum(axis=0)
    return d_embeds, d_none


# ---------------------------------------------------------------------------
# affine maps and activations
# ---------------------------------------------------------------------------

def _check_affine(weight: np.ndarray, bias: np.ndarray, x: np.ndarray, what: str) -> None:
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ConfigError(
            f"{what}: shape mismatch, input {x.shape}, weight {weight.shape}, bias {bias.shape}")


def conv_forward(weight: np.ndarray, bias: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """1-D convolution written as one affine map applied to every window row."""
    _check_affine(weight, bias, windows, "conv")
    return windows @ weight + bias


def conv_backward(dout, weight, windows):
    """Return ``(d_windows, d_weight, d_bias)``."""
    k = windows.shape[-1]
    c = dout.shape[-1]
    flat_x = windows.reshape(-1, k)
    flat_d = dout.reshape(-1, c)
    return dout @ weight.T, flat_x.T @ flat_d, flat_d.sum(axis=0)


def linear(weight: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``W^T x + b`` with ``W`` stored as ``(in, out)``; works row-wise on batches."""
    _check_affine(weight, bias, x, "linear")
    return x @ weight + bias


linear_backward = conv_backward


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return dout * (x > 0)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_backward(dout, x):
    return dout * sigmoid(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow: exp is only taken of ``-|x|``."""
    x = _as_float(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid_backward(dout, y):
    """Gradient through a sigmoid given its *output* ``y``."""
    return dout * y * (1.0 - y)


ACTIVATIONS = {
    "relu": (relu, relu_backward),
    "softplus": (softplus, softplus_backward),
}


def softmax(x: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    x = _as_float(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


PROB_FLOOR = 1e-12


def cross_entropy(p: np.ndarray, gold) -> np.ndarray | float:
    """``-ln p[gold]``; a zero probability is clamped at 1e-12 with a warning.

    ``p`` may be a single distribution with an int ``gold`` or a ``(B, M)``
    batch with a ``(B,)`` array of indices (returns per-sample losses).
    """
    p = _as_float(p)
    if p.ndim == 1:
        picked = p[int(gold)]
    else:
        gold = np.asarray(gold)
        picked = p[np.arange(p.shape[0]), gold]
    if np.any(picked < PROB_FLOOR):
        warnings.warn("gold-class probability below 1e-12, clamped", NumericalWarning, stacklevel=2)
        picked = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(picked)
    return loss[()] if loss.ndim == 0 else loss


def softmax_cross_entropy_backward(p: np.ndarray, gold) -> np.ndarray:
    """Gradient of the cross-entropy with respect to the logits: ``p - onehot(gold)``."""
    g = np.array(_as_float(p), copy=True)
    if g.ndim == 1:
        g[int(gold)] -= 1.0
    else:
        g[np.arange(g.shape[0]), np.asarray(gold)] -= 1.0
    return g


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmCache:
    x: np.ndarray
    h: np.ndarray      # (B, N+1, H), h[:, 0] is the zero initial state
    c: np.ndarray      # (B, N+1, H)
    gates: np.ndarray  # (B, N, 4H) post-nonlinearity
    tanh_c: np.ndarray
    squeeze: bool


def lstm_forward(W: np.ndarray, U: np.ndarray, b: np.ndarray, seq: np.ndarray):
    """Run an LSTM from zero state over ``seq`` and emit every hidden state.

    ``W`` is ``(in, 4H)``, ``U`` is ``(H, 4H)``, ``b`` is ``(4H,)``.
    Returns ``(hidden (B, N, H), cache)``.
    """
    squeeze = seq.ndim == 2
    x = seq[None] if squeeze else seq
    bsz, n, d_in = x.shape
    hdim = U.shape[0]
    if W.shape != (d_in, 4 * hdim) or U.shape != (hdim, 4 * hdim) or b.shape != (4 * hdim,):
        raise ConfigError(
            f"lstm: shape mismatch, input {x.shape}, W {W.shape}, U {U.shape}, b {b.shape}")
    # scaling the candidate block by 2 lets one sigmoid serve all four gates:
    # tanh(z) = 2 * sigmoid(2z) - 1
    gate_scale = np.ones(4 * hdim, dtype=W.dtype)
    gate_scale[2 * hdim:3 * hdim] = 2.0
    xw = (x @ W + b) * gate_scale
    Us = U * gate_scale
    dt = xw.dtype
    h = np.zeros((bsz, n + 1, hdim), dtype=dt)
    c = np.zeros((bsz, n + 1, hdim), dtype=dt)
    gates = np.empty((bsz, n, 4 * hdim), dtype=dt)
    tanh_c = np.empty((bsz, n, hdim), dtype=dt)
    for t in range(n):
        gz = sigmoid(xw[:, t] + h[:, t] @ Us)
        gz[:, 2 * hdim:3 * hdim] = 2.0 * gz[:, 2 * hdim:3 * hdim] - 1.0
        gates[:, t] = gz
        i, f, g, o = gz[:, :hdim], gz[:, hdim:2 * hdim], gz[:, 2 * hdim:3 * hdim], gz[:, 3 * hdim:]
        c[:, t + 1] = f * c[:, t] + i * g
        tanh_c[:, t] = np.tanh(c[:, t + 1])
        h[:, t + 1] = o * tanh_c[:, t]
    out = h[:, 1:]
    cache = LstmCache(x=x, h=h, c=c, gates=gates, tanh_c=tanh_c, squeeze=squeeze)
    return (out[0] if squeeze else out), cache


def lstm_backward(dout: np.ndarray, W: np.ndarray, U: np.ndarray, cache: LstmCache):
    """Backpropagation through time. Returns ``(d_seq, dW, dU, db)``."""
    dh_seq = dout[None] if cache.squeeze else dout
    x, h, c, gates, tanh_c = cache.x, cache.h, cache.c, cache.gates, cache.tanh_c
    bsz, n, _ = x.shape
    hdim = U.shape[0]
    dt = np.result_type(dh_seq, U)
    dz = np.empty((bsz, n, 4 * hdim), dtype=dt)
    dh_next = np.zeros((bsz, hdim), dtype=dt)
    dc_next = np.zeros((bsz, hdim), dtype=dt)
    for t in range(n - 1, -1, -1):
        gz = gates[:, t]
        i, f, g, o = gz[:, :hdim], gz[:, hdim:2 * hdim], gz[:, 2 * hdim:3 * hdim], gz[:, 3 * hdim:]
        dh = dh_seq[:, t] + dh_next
        tc = tanh_c[:, t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dzt = dz[:, t]
        dzt[:, :hdim] = dc * g * i * (1.0 - i)
        dzt[:, hdim:2 * hdim] = dc * c[:, t] * f * (1.0 - f)
        dzt[:, 2 * hdim:3 * hdim] = dc * i * (1.0 - g * g)
        dzt[:, 3 * hdim:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dzt @ U.T
    flat_dz = dz.reshape(-1, 4 * hdim)
    dW = x.reshape(-1, x.shape[-1]).T @ flat_dz
    dU = h[:, :-1].reshape(-1, hdim).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz @ W.T
    return (dx[0] if cache.squeeze else dx), dW, dU, db


# ---------------------------------------------------------------------------
# dropout and pooling
# ---------------------------------------------------------------------------

def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive.

    The mask already carries the ``1 / (1 - rate)`` scale, so backward is a
    plain multiply.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def masked_mean(h: np.ndarray, mask: np.ndarray, mean_by: str = "padded"):
    """Pool ``(..., N, H)`` over positions with a 0/1 mask.

    ``mean_by="padded"`` divides by the padded length N; ``"valid"`` divides
    by the number of unmasked positions (an all-zero mask then pools to zero).
    Returns ``(pooled, scale)`` where ``scale`` is the per-position weight
    ``mask / divisor`` shaped ``(..., N, 1)``, which is all backward needs.
    """
    mask = np.asarray(mask, dtype=h.dtype)
    n = h.shape[-2]
    if mean_by == "padded":
        scale = mask / n
    elif mean_by == "valid":
        count = mask.sum(axis=-1, keepdims=True)
        scale = np.divide(mask, count, out=np.zeros_like(mask), where=count > 0)
    else:
        raise ConfigError(f"mean_by must be 'padded' or 'valid', got {mean_by!r}")
    scale = scale[..., None]
    return (h * scale).sum(axis=-2), scale


def masked_mean_backward(dout: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return dout[..., None, :] * scale


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place.

    All gradients are checked before anything is touched, so a non-finite
    gradient leaves both parameters and state unchanged.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def _check_indices(size: int, rng: np.random.Generator, max_full: int, subsample: int) -> np.ndarray:
    if size <= max_full:
        return np.arange(size)
    return np.sort(rng.choice(size, size=subsample, replace=False))


def grad_check_detail(params: Mapping[str, np.ndarray], loss_fn: Callable[[], float],
                      analytic: Mapping[str, np.ndarray], eps: float = 1e-5, *,
                      max_full: int = 500, subsample: int = 200, seed: int = 0) -> dict[str, float]:
    """Per-tensor max relative error between ``analytic`` and central differences.

    ``loss_fn`` must read the current contents of ``params`` (entries are
    perturbed in place and restored). It may evaluate in a wider type such
    as ``np.longdouble``; the difference quotient is taken in that type. Tensors with more than ``max_full``
    entries are checked on a seeded subsample of ``subsample`` entries.
    """
    rng = new_rng(seed)
    out = {}
    for name, p in params.items():
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        worst = 0.0
        for idx in _check_indices(flat.size, rng, max_full, subsample):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = flat[idx]
            lp = loss_fn()
            flat[idx] = orig - eps
            down = flat[idx]
            lm = loss_fn()
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericalError(f"non-finite loss while perturbing {name}[{idx}]")
            # divide by the step actually stored, not the nominal 2 * eps
            num = float((lp - lm) / (up - down))
            a = a_flat[idx]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        out[name] = worst
    return out


def grad_check(params, loss_fn, analytic, eps: float = 1e-5, **kw) -> float:
    """Maximum relative error over all checked entries (see ``grad_check_detail``)."""
    detail = grad_check_detail(params, loss_fn, analytic, eps, **kw)
    return max(detail.values(), default=0.0)
