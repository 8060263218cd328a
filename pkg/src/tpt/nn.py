"""Parameterized layers, initialization, Adam and the plateau scheduler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor, TensorError

ACTIVATIONS = {"gelu": tt.gelu, "relu": tt.relu, "tanh": tt.tanh}


class NonFiniteGradientError(TensorError, FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass
class LinearLayer:
    weight: Tensor  # [in, out]
    bias: Tensor | None  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError("LinearLayer", self.weight.shape, detail="weight must be 2-D")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("LinearLayer", self.weight.shape, self.bias.shape)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FeedForward:
    inner: LinearLayer
    outer: LinearLayer


@dataclass
class EmbeddingTable:
    table: Tensor  # [vocab, word_dim]
    trainable: bool = True
    source: str | None = None

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    """``x @ W + b`` broadcast over leading axes."""
    if x.shape[-1] != layer.in_features:
        raise ShapeError("linear", x.shape, layer.weight.shape, detail="trailing extent != in_features")
    squeeze = x.ndim == 1
    if squeeze:
        x = tt.reshape(x, (1, x.shape[0]))
    y = tt.matmul(x, layer.weight)
    if layer.bias is not None:
        y = y + layer.bias
    if squeeze:
        y = tt.reshape(y, (layer.out_features,))
    return y


def apply_layer_norm(ln: LayerNormParams, x: Tensor, eps: float = 1e-5) -> Tensor:
    return tt.layer_norm(x, ln.gain, ln.bias, eps)


def feed_forward(ff: FeedForward, x: Tensor, act: str = "gelu") -> Tensor:
    return linear_forward(ff.outer, activation(act)(linear_forward(ff.inner, x)))


# -- initialization -----------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def new_linear(rng, fan_in: int, fan_out: int, dtype, bias: bool = True) -> LinearLayer:
    w = tt.parameter(glorot_uniform(rng, fan_in, fan_out, dtype), dtype=dtype)
    b = tt.parameter(np.zeros(fan_out), dtype=dtype) if bias else None
    return LinearLayer(w, b)


def new_layer_norm(d: int, dtype) -> LayerNormParams:
    return LayerNormParams(tt.parameter(np.ones(d), dtype=dtype), tt.parameter(np.zeros(d), dtype=dtype))


def new_feed_forward(rng, d: int, d_ff: int, dtype) -> FeedForward:
    return FeedForward(new_linear(rng, d, d_ff, dtype), new_linear(rng, d_ff, d, dtype))


def new_embedding(rng, vocab: int, dim: int, dtype, trainable: bool = True) -> EmbeddingTable:
    table = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(vocab, dim))
    t = tt.Tensor(table.astype(dtype), requires_grad=trainable)
    return EmbeddingTable(t, trainable=trainable)


def load_embedding_file(emb: EmbeddingTable, vocab: Mapping[str, int], path: str | Path) -> int:
    """Overwrite rows of ``emb`` from a whitespace-separated vector file.

    Each line is a token followed by ``word_dim`` floats. Tokens absent from
    ``vocab`` are skipped. Returns the number of rows replaced.
    """
    dim = emb.table.shape[1]
    replaced = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected token + {dim} floats, got {len(parts) - 1}")
            idx = vocab.get(parts[0])
            if idx is None:
                continue
            emb.table.data[idx] = np.asarray(parts[1:], dtype=np.float64)
            replaced += 1
    emb.source = str(path)
    return replaced


# -- parameter traversal ------------------------------------------------------

def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted.name, tensor)`` for every tensor reachable through dataclasses and lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


def trainable_parameters(obj) -> dict[str, Tensor]:
    return {name: t for name, t in named_tensors(obj) if t.requires_grad}


# -- optimization -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """One bias-corrected Adam update in place. Gradients are left for the caller to zero."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


@dataclass
class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without strict improvement.

    ``best`` starts at +inf unless the caller seeds it with :meth:`start`
    (the training loop seeds it with the loss of the untrained model).
    """

    lr: float = 1e-4
    patience: int = 5
    factor: float = 0.5
    best: float = math.inf
    bad_epochs: int = 0
    halvings: int = 0

    def start(self, reference_loss: float) -> None:
        self.best = float(reference_loss)
        self.bad_epochs = 0

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best:
            self.best = float(epoch_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.halvings += 1
                self.bad_epochs = 0
        return self.lr


def scheduler_epoch(sched: PlateauScheduler, epoch_loss: float) -> float:
    return sched.step(epoch_loss)
