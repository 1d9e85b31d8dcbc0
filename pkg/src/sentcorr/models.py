"""CNN-LSTM2 and CNN-LSTM2-STACK assembled from the layers in ``nn_core``.

Both models share the feature part (lookup, 5-wide window, convolution,
activation) and the sentiment part (two LSTMs, dropout, masked mean, output
linear, softmax). The stack variant adds ``sigmoid(linear(embedding))`` per
position, masked-mean pooled into the same vector as the LSTM path.

Parameters live in a plain ordered dict. The order of ``param_shapes`` is
the order tensors are written to checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Sequence

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, InputFormatError, NumericalError
from .features import NUM_CLASSES, EncodedSample, SentimentLabel


class ModelKind(str, Enum):
    CNN_LSTM2 = "cnn_lstm2"
    CNN_LSTM2_STACK = "cnn_lstm2_stack"

    @property
    def short(self) -> str:
        return "M1" if self is ModelKind.CNN_LSTM2 else "M2"


@dataclass
class ModelConfig:
    embed_dim: int = 100
    conv_out: int = 100
    lstm_hidden: int = 128
    stack_dim: int = 128
    num_classes: int = NUM_CLASSES
    window: int = 5
    dropout_rate: float = 0.5
    seq_len: int = 0  # 0: derive from the longest training document
    activation: str = "relu"
    mean_by: str = "padded"

    def validate(self) -> "ModelConfig":
        for name in ("embed_dim", "conv_out", "lstm_hidden", "stack_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError(f"window must be a positive odd integer, got {self.window}")
        if self.stack_dim != self.lstm_hidden:
            raise ConfigError("stack_dim must equal lstm_hidden (the stack path is added to the pooled LSTM output)")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError(f"num_classes must be {NUM_CLASSES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {', '.join(nn.ACTIVATIONS)}")
        if self.mean_by not in ("padded", "valid"):
            raise ConfigError("mean_by must be 'padded' or 'valid'")
        if self.seq_len < 0:
            raise ConfigError("seq_len must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(kind: ModelKind, config: ModelConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d, c, h, m, w = config.embed_dim, config.conv_out, config.lstm_hidden, config.num_classes, config.window
    shapes = {
        "embedding": (vocab_size, d),
        "conv.W": (w * d, c),
        "conv.b": (c,),
        "lstm1.W": (c, 4 * h),
        "lstm1.U": (h, 4 * h),
        "lstm1.b": (4 * h,),
        "lstm2.W": (h, 4 * h),
        "lstm2.U": (h, 4 * h),
        "lstm2.b": (4 * h,),
    }
    if ModelKind(kind) is ModelKind.CNN_LSTM2_STACK:
        shapes["stack.W"] = (d, config.stack_dim)
        shapes["stack.b"] = (config.stack_dim,)
    shapes["out.W"] = (h, m)
    shapes["out.b"] = (m,)
    return shapes


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(kind: ModelKind, config: ModelConfig, vocab_size: int, rng: np.random.Generator) -> dict:
    """Random parameters: embeddings U(-0.1, 0.1), Glorot-uniform weights,
    zero biases except the LSTM forget gates (1.0)."""
    if vocab_size < 2:
        raise ConfigError("vocabulary must hold at least the two reserved tokens")
    config.validate()
    h = config.lstm_hidden
    params = {}
    for name, shape in param_shapes(kind, config, vocab_size).items():
        if name == "embedding":
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif name.endswith(".b"):
            b = np.zeros(shape)
            if name.startswith("lstm"):
                b[h:2 * h] = 1.0
            params[name] = b
        elif name.startswith("lstm"):
            # per-gate fan-out
            params[name] = _glorot(rng, shape, shape[0], h)
        else:
            params[name] = _glorot(rng, shape, shape[0], shape[1])
    return params


def infer_kind(params: dict) -> ModelKind:
    return ModelKind.CNN_LSTM2_STACK if "stack.W" in params else ModelKind.CNN_LSTM2


@dataclass
class ForwardTrace:
    """Activations of one forward pass, batch axis first.

    ``h1`` conv pre-activation, ``h2`` activation, ``h3``/``h4`` LSTM outputs,
    ``h5`` after dropout, ``h6`` pooled vector, ``h7`` logits, ``h8``/``h9``
    stack path (stack variant only).
    """

    ids: np.ndarray
    mask: np.ndarray
    embeds: np.ndarray
    windows: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    h3: np.ndarray
    h4: np.ndarray
    h5: np.ndarray
    h6: np.ndarray
    h7: np.ndarray
    probs: np.ndarray
    pool_scale: np.ndarray
    dropout_mask: np.ndarray | None
    lstm1_cache: nn.LstmCache
    lstm2_cache: nn.LstmCache
    h8: np.ndarray | None = None
    h9: np.ndarray | None = None


def stack_samples(samples: Sequence[EncodedSample]):
    """Stack encoded samples into ``(ids, mask, labels)`` arrays."""
    if not samples:
        raise ConfigError("empty batch")
    lengths = {len(s.ids) for s in samples}
    if len(lengths) != 1:
        raise InputFormatError(f"samples in one batch must share a length, got {sorted(lengths)}")
    ids = np.stack([s.ids for s in samples])
    mask = np.stack([s.mask for s in samples]).astype(np.float64)
    labels = np.array([-1 if s.label is None else int(s.label) for s in samples], dtype=np.int64)
    return ids, mask, labels


def forward_arrays(params: dict, config: ModelConfig, ids: np.ndarray, mask: np.ndarray,
                   training: bool = False, rng: np.random.Generator | None = None) -> ForwardTrace:
    act, _ = nn.ACTIVATIONS[config.activation]
    table = params["embedding"]
    embeds = nn.embedding_forward(table, ids)
    windows = nn.window_concat(embeds, table[0], config.window)
    h1 = nn.conv_forward(params["conv.W"], params["conv.b"], windows)
    h2 = act(h1)
    h3, c1 = nn.lstm_forward(params["lstm1.W"], params["lstm1.U"], params["lstm1.b"], h2)
    h4, c2 = nn.lstm_forward(params["lstm2.W"], params["lstm2.U"], params["lstm2.b"], h3)
    h5, drop_mask = nn.dropout(h4, config.dropout_rate, rng, training)
    h6, scale = nn.masked_mean(h5, mask, config.mean_by)
    h8 = h9 = None
    if "stack.W" in params:
        h8 = nn.linear(params["stack.W"], params["stack.b"], embeds)
        h9 = nn.sigmoid(h8)
        h6 = h6 + (h9 * scale).sum(axis=-2)
    h7 = nn.linear(params["out.W"], params["out.b"], h6)
    probs = nn.softmax(h7)
    return ForwardTrace(ids, mask, embeds, windows, h1, h2, h3, h4, h5, h6, h7, probs, scale,
                        drop_mask, c1, c2, h8, h9)


def forward(params: dict, config: ModelConfig, sample: EncodedSample | Sequence[EncodedSample],
            training: bool = False, rng: np.random.Generator | None = None) -> ForwardTrace:
    """Forward pass over one sample (batch of one) or a list of samples."""
    batch = [sample] if isinstance(sample, EncodedSample) else list(sample)
    ids, mask, _ = stack_samples(batch)
    return forward_arrays(params, config, ids, mask, training, rng)


def backward(params: dict, config: ModelConfig, trace: ForwardTrace, labels: np.ndarray) -> dict:
    """Gradients of the *mean* batch cross-entropy with respect to every parameter."""
    _, act_backward = nn.ACTIVATIONS[config.activation]
    bsz = trace.probs.shape[0]
    grads = {}
    dh7 = nn.softmax_cross_entropy_backward(trace.probs, labels) / bsz
    grads["out.W"] = trace.h6.T @ dh7
    grads["out.b"] = dh7.sum(axis=0)
    dh6 = dh7 @ params["out.W"].T
    dpos = nn.masked_mean_backward(dh6, trace.pool_scale)  # same for h5 and h9
    d_embeds_stack = None
    if trace.h9 is not None:
        dh8 = nn.sigmoid_backward(dpos, trace.h9)
        d_embeds_stack, grads["stack.W"], grads["stack.b"] = nn.linear_backward(dh8, params["stack.W"], trace.embeds)
    dh4 = nn.dropout_backward(dpos, trace.dropout_mask)
    dh3, grads["lstm2.W"], grads["lstm2.U"], grads["lstm2.b"] = nn.lstm_backward(
        dh4, params["lstm2.W"], params["lstm2.U"], trace.lstm2_cache)
    dh2, grads["lstm1.W"], grads["lstm1.U"], grads["lstm1.b"] = nn.lstm_backward(
        dh3, params["lstm1.W"], params["lstm1.U"], trace.lstm1_cache)
    dh1 = act_backward(dh2, trace.h1)
    dwin, grads["conv.W"], grads["conv.b"] = nn.conv_backward(dh1, params["conv.W"], trace.windows)
    d_embeds, d_none = nn.window_concat_backward(dwin, config.window)
    if d_embeds_stack is not None:
        d_embeds = d_embeds + d_embeds_stack
    dtable = nn.embedding_backward(d_embeds, trace.ids, params["embedding"].shape[0])
    dtable[0] += d_none
    grads["embedding"] = dtable
    return {name: grads[name] for name in params}


def batch_loss(trace: ForwardTrace, labels: np.ndarray) -> np.ndarray:
    return np.atleast_1d(nn.cross_entropy(trace.probs, labels))


def loss_and_grads_arrays(params, config, ids, mask, labels, rng=None, training=True,
                          sample_ids: Sequence[str] | None = None):
    trace = forward_arrays(params, config, ids, mask, training, rng)
    losses = batch_loss(trace, labels)
    bad = ~np.isfinite(losses)
    if bad.any():
        which = int(np.flatnonzero(bad)[0])
        name = sample_ids[which] if sample_ids is not None else f"#{which}"
        raise NumericalError(f"non-finite loss on sample {name}")
    return float(losses.mean()), backward(params, config, trace, labels)


def loss_and_grads(params: dict, config: ModelConfig, batch: Sequence[EncodedSample],
                   rng: np.random.Generator | None = None, training: bool = True):
    """Mean cross-entropy over ``batch`` and its exact gradient.

    Dropout masks are drawn from ``rng`` in sample order. Pass
    ``training=False`` (or a zero dropout rate) for a deterministic pass.
    """
    batch = list(batch)
    if not batch:
        raise ConfigError("loss_and_grads needs a non-empty batch")
    if any(s.label is None for s in batch):
        raise InputFormatError("every training sample needs a gold label")
    ids, mask, labels = stack_samples(batch)
    return loss_and_grads_arrays(params, config, ids, mask, labels, rng, training, [s.id for s in batch])


def mean_loss(params: dict, config: ModelConfig, batch: Sequence[EncodedSample], dtype=np.float64):
    """Eval-mode mean cross-entropy with every parameter cast to ``dtype``.

    With ``np.longdouble`` this is the finite-difference oracle used by the
    gradient checks: forward only, evaluated in extended precision.
    """
    ids, mask, labels = stack_samples(list(batch))
    cast = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    trace = forward_arrays(cast, config, ids, mask.astype(dtype), training=False)
    return batch_loss(trace, labels).mean()


@dataclass
class Prediction:
    probs: np.ndarray
    label: SentimentLabel


def argmax_label(probs: np.ndarray) -> SentimentLabel:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return SentimentLabel(int(np.argmax(probs)))


def predict(params: dict, config: ModelConfig, sample: EncodedSample) -> Prediction:
    probs = forward(params, config, sample, training=False).probs[0]
    return Prediction(probs, argmax_label(probs))


def predict_probs(params: dict, config: ModelConfig, samples: Sequence[EncodedSample], chunk: int = 256) -> np.ndarray:
    """Eval-mode class probabilities for many samples, shape ``(len(samples), 6)``."""
    out = []
    for start in range(0, len(samples), chunk):
        out.append(forward(params, config, samples[start:start + chunk], training=False).probs)
    if not out:
        return np.zeros((0, NUM_CLASSES))
    return np.concatenate(out)


TINY_CONFIG = dict(embed_dim=4, conv_out=4, lstm_hidden=5, stack_dim=5, seq_len=7, dropout_rate=0.0)
TINY_VOCAB = 20


def random_samples(rng: np.random.Generator, count: int, seq_len: int, vocab_size: int) -> list[EncodedSample]:
    """Labelled samples with random valid lengths and ids, for checks."""
    out = []
    for j in range(count):
        length = int(rng.integers(1, seq_len + 1))
        ids = np.zeros(seq_len, dtype=np.int64)
        ids[:length] = rng.integers(1, vocab_size, size=length)
        mask = np.zeros(seq_len, dtype=np.int8)
        mask[:length] = 1
        out.append(EncodedSample(f"r{j}", ids, mask, SentimentLabel(int(rng.integers(0, NUM_CLASSES)))))
    return out


def full_grad_check(kind: ModelKind, seed: int = 0, config: ModelConfig | None = None,
                    vocab_size: int = TINY_VOCAB, n_samples: int = 2, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every parameter of a freshly initialised model.

    Analytic gradients come from the float64 backward pass; the difference
    quotients from an eval-mode forward in extended precision. Returns the
    per-tensor maximum relative error.
    """
    config = config or ModelConfig(**TINY_CONFIG)
    if config.dropout_rate:
        raise ConfigError("gradient checks need dropout disabled")
    rng = nn.new_rng(seed)
    params = init_model(kind, config, vocab_size, rng)
    samples = random_samples(rng, n_samples, config.seq_len, vocab_size)
    _, grads = loss_and_grads(params, config, samples, training=False)
    return nn.grad_check_detail(params, lambda: mean_loss(params, config, samples, np.longdouble),
                                grads, eps, seed=seed)
