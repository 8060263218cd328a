"""Multi-head multimodal attention, the multimodal transformer layer, and R-layer blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .config import TptConfig
from .nn import (FeedForward, LayerNormParams, apply_layer_norm, feed_forward,
                 glorot_uniform, new_feed_forward, new_layer_norm)
from .tensor import MaskedRowError, ShapeError, Tensor

RESIDUAL_MODES = ("ln-primary", "plain-primary", "external")


@dataclass
class MmaParams:
    ln_query: LayerNormParams
    ln_context: LayerNormParams
    w_q: Tensor  # [d, d], column block h is head h's projection
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int
    scale_per_head: bool = False

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


@dataclass
class MtlParams:
    attn: MmaParams
    ln_ff: LayerNormParams
    ff: FeedForward


@dataclass
class BlockParams:
    layers: list[MtlParams]


def init_mma(rng: np.random.Generator, config: TptConfig) -> MmaParams:
    d, dtype = config.d_model, config.dtype
    h = config.heads
    # each head's d x d/H slice is initialized with its own fan
    def heads_matrix():
        return tt.parameter(np.concatenate([glorot_uniform(rng, d, d // h, dtype) for _ in range(h)], axis=1),
                            dtype=dtype)
    return MmaParams(
        new_layer_norm(d, dtype), new_layer_norm(d, dtype),
        heads_matrix(), heads_matrix(), heads_matrix(),
        tt.parameter(glorot_uniform(rng, d, d, dtype), dtype=dtype),
        heads=h, scale_per_head=config.scale_per_head,
    )


def init_mtl(rng, config: TptConfig) -> MtlParams:
    return MtlParams(init_mma(rng, config), new_layer_norm(config.d_model, config.dtype),
                     new_feed_forward(rng, config.d_model, config.ff_width, config.dtype))


def init_block(rng, config: TptConfig, layers: int | None = None) -> BlockParams:
    return BlockParams([init_mtl(rng, config) for _ in range(config.layers if layers is None else layers)])


def mask_bias(kv_mask, dtype) -> np.ndarray | None:
    """Additive logit bias ``[..., 1, 1, Lk]``: 0 for real keys, -inf for padding."""
    if kv_mask is None:
        return None
    m = np.asarray(kv_mask, dtype=bool)
    if (~m.any(axis=-1)).any():
        raise MaskedRowError("attention: key/value sequence is fully masked")
    bias = np.where(m, 0.0, -np.inf).astype(dtype)
    return bias[..., None, None, :]


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, L, d = x.shape
    x = tt.reshape(x, tuple(lead) + (L, h, d // h))
    n = x.ndim
    return tt.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))   # [..., H, L, d/H]


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dh = x.shape
    n = x.ndim
    x = tt.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))      # [..., L, H, d/H]
    return tt.reshape(x, tuple(lead) + (L, h * dh))


def attend(params: MmaParams, query: Tensor, kv: Tensor, kv_mask=None, eps: float = 1e-5):
    """Full MMA computation; returns ``(output, LN(query), attention weights)``."""
    d = params.d_model
    if query.shape[-1] != d or kv.shape[-1] != d:
        raise ShapeError("mma", query.shape, kv.shape, detail=f"width must be {d}")
    if kv_mask is not None and np.shape(kv_mask)[-1] != kv.shape[-2]:
        raise ShapeError("mma", kv.shape, np.shape(kv_mask), detail="mask length != key count")
    h = params.heads
    lq = apply_layer_norm(params.ln_query, query, eps)
    lk = apply_layer_norm(params.ln_context, kv, eps)
    fq = _split_heads(tt.matmul(lq, params.w_q), h)
    fk = _split_heads(tt.matmul(lk, params.w_k), h)
    fv = _split_heads(tt.matmul(lk, params.w_v), h)
    scale = math.sqrt(d / h) if params.scale_per_head else math.sqrt(d)
    logits = tt.scale(tt.matmul(fq, tt.transpose_last_two(fk)), 1.0 / scale)
    bias = mask_bias(kv_mask, logits.dtype)
    if bias is not None:
        logits = logits + bias
    weights = tt.softmax_last(logits)                                      # [..., H, Lq, Lk]
    out = tt.matmul(_merge_heads(tt.matmul(weights, fv)), params.w_o)
    return out, lq, weights


def mma(params: MmaParams, query: Tensor, kv: Tensor, kv_mask=None, eps: float = 1e-5) -> Tensor:
    """Multi-head multimodal attention: ``query`` attends over ``kv``; output has query's length."""
    return attend(params, query, kv, kv_mask, eps)[0]


def mt_layer(params: MtlParams, primary: Tensor, context: Tensor, mask=None,
             residual_mode: str = "ln-primary", external: Tensor | None = None,
             eps: float = 1e-5) -> Tensor:
    """One multimodal transformer layer.

    ``Z = base + MMA(primary, context)`` where ``base`` is ``LN(primary)``
    (ln-primary), ``primary`` (plain-primary) or ``external``; then
    ``out = Z + FF(LN(Z))``.
    """
    if residual_mode not in RESIDUAL_MODES:
        raise ValueError(f"residual_mode must be one of {RESIDUAL_MODES}, got {residual_mode!r}")
    att, lq, _ = attend(params.attn, primary, context, mask, eps)
    if residual_mode == "ln-primary":
        base = lq
    elif residual_mode == "plain-primary":
        base = primary
    else:
        if external is None or external.shape[-2] != primary.shape[-2]:
            raise ShapeError("mt_layer", primary.shape, () if external is None else external.shape,
                             detail="external residual must match the primary stream length")
        base = external
    z = base + att
    return z + feed_forward(params.ff, apply_layer_norm(params.ln_ff, z, eps))


def mt_block(params: BlockParams, primary: Tensor, context: Tensor, mask=None,
             residual_mode: str = "ln-primary", eps: float = 1e-5) -> Tensor:
    x = primary
    for layer in params.layers:
        x = mt_layer(layer, x, context, mask, residual_mode, eps=eps)
    return x
