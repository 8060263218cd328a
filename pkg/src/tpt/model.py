"""QT and VI pyramids, output fusion, parameter sets and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields, is_dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as tt
from .attention import BlockParams, MtlParams, init_block, init_mtl, mt_block, mt_layer
from .config import TptConfig
from .heads import init_head
from .nn import named_tensors
from .pyramid import LevelFeatures, PyramidParams, RawVideoFeatures, build_pyramid, init_pyramid
from .tensor import ShapeError, Tensor
from .text import TextParams, TokenSequence, encode_text, init_text

CHECKPOINT_MAGIC = b"TPTC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class QtParams:
    levels: list[BlockParams]       # index i drives pyramid level i+1


@dataclass
class ViParams:
    levels: list[BlockParams]       # index i drives pyramid level i+1
    fusion: list[MtlParams]         # fusion[i] merges level i+2 into level i+1


@dataclass
class TptParams:
    text: TextParams
    pyramid: PyramidParams
    qt: QtParams
    vi: ViParams
    head: Any = None


@dataclass
class FusedOutput:
    o_bar: Tensor          # [..., 2d]
    q_hat_pooled: Tensor   # [..., d]
    x_hat_pooled: Tensor   # [..., d]


def init_params(config: TptConfig, seed: int, vocab_size: int, regime: str | None = None,
                n_answers: int | None = None) -> TptParams:
    """Glorot-uniform weights, zero biases, unit LN gains; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    n_levels = len(config.pyramid_levels())
    text = init_text(rng, config, vocab_size)
    pyramid = init_pyramid(rng, config)
    qt = QtParams([init_block(rng, config) for _ in range(n_levels)])
    vi = ViParams([init_block(rng, config) for _ in range(n_levels)],
                  [init_mtl(rng, config) for _ in range(n_levels - 1)])
    head = init_head(rng, config, regime, n_answers) if regime is not None else None
    return TptParams(text, pyramid, qt, vi, head)


def _check_levels(pyramid: Sequence[LevelFeatures], expected: int, what: str) -> None:
    if len(pyramid) != expected:
        raise ShapeError(what, (len(pyramid),), (expected,), detail="pyramid level count != parameter levels")


def qt_forward(params: QtParams, question: TokenSequence, pyramid: Sequence[LevelFeatures],
               eps: float = 1e-5, return_levels: bool = False):
    """Coarse-to-fine question refinement with an external residual around every block."""
    _check_levels(pyramid, len(params.levels), "qt_forward")
    q = question.tokens
    history = [q]
    for block, level in zip(params.levels, pyramid):
        q = mt_block(block, q, level.x, None, "ln-primary", eps) + q
        history.append(q)
    return (q, history) if return_levels else q


def vi_forward(params: ViParams, q_hat: Tensor, pyramid: Sequence[LevelFeatures], q_mask=None,
               eps: float = 1e-5, return_levels: bool = False):
    """Fine-to-coarse visual inference; returns the level-1 clue ``[..., T+1, d]``.

    With ``return_levels`` also returns a dict holding, per level (1-based),
    the block output before the external residual, the fused input, and X-hat.
    """
    N = len(params.levels)
    _check_levels(pyramid, N, "vi_forward")
    if len(params.fusion) != N - 1:
        raise ShapeError("vi_forward", (len(params.fusion),), (N - 1,), detail="fusion layer count")
    trace: dict[str, dict[int, Tensor]] = {"block": {}, "fused": {}, "x_hat": {}}
    top = pyramid[-1].x
    out = mt_block(params.levels[-1], top, q_hat, q_mask, "plain-primary", eps)
    x_hat = out + top
    trace["block"][N], trace["x_hat"][N] = out, x_hat
    for i in range(N - 2, -1, -1):
        x = pyramid[i].x
        # the query stream is X^n, so the residual term that matches its length is X^n itself
        x_tilde = mt_layer(params.fusion[i], x, x_hat, None, "external", external=x, eps=eps)
        out = mt_block(params.levels[i], x_tilde, q_hat, q_mask, "plain-primary", eps)
        x_hat = out + x_tilde
        trace["fused"][i + 1], trace["block"][i + 1], trace["x_hat"][i + 1] = x_tilde, out, x_hat
    return (x_hat, trace) if return_levels else x_hat


def masked_mean(x: Tensor, mask=None) -> Tensor:
    """Mean over the sequence axis (-2), excluding positions where ``mask`` is False."""
    if mask is None:
        return tt.mean(x, axis=-2)
    m = np.asarray(mask, dtype=x.dtype)
    weights = m / m.sum(axis=-1, keepdims=True)
    return tt.sum(x * weights[..., None], axis=-2)


def fuse(q_hat: Tensor, x_hat: Tensor, q_mask=None) -> FusedOutput:
    qp = masked_mean(q_hat, q_mask)
    xp = masked_mean(x_hat)
    lead = np.broadcast_shapes(qp.shape[:-1], xp.shape[:-1])
    qb = qp if qp.shape[:-1] == lead else tt.broadcast_to(qp, lead + qp.shape[-1:])
    xb = xp if xp.shape[:-1] == lead else tt.broadcast_to(xp, lead + xp.shape[-1:])
    return FusedOutput(tt.concat([qb, xb], axis=-1), qp, xp)


def _lift_levels(pyramid: Sequence[LevelFeatures], extra: int) -> list[LevelFeatures]:
    """Insert ``extra`` singleton axes before the sequence axis so levels broadcast against text."""
    if extra <= 0:
        return list(pyramid)
    out = []
    for lv in pyramid:
        x = lv.x
        x = tt.reshape(x, x.shape[:-2] + (1,) * extra + x.shape[-2:])
        out.append(LevelFeatures(lv.level, x, lv.mask, lv.segment_spans))
    return out


def tpt_body(params: TptParams, text: TokenSequence, pyramid: Sequence[LevelFeatures],
             config: TptConfig) -> FusedOutput:
    """QT then VI then pooling, on an already assembled pyramid.

    ``text`` may carry more leading axes than the pyramid (e.g. ``[B, K, L, d]``
    for multi-choice against ``[B, L, d]`` levels); levels are broadcast.
    """
    extra = text.tokens.ndim - pyramid[0].x.ndim
    levels = _lift_levels(pyramid, extra)
    eps = config.ln_eps
    if config.use_qt:
        q_hat = qt_forward(params.qt, text, levels, eps)
    else:
        q_hat = text.tokens
    x_hat = vi_forward(params.vi, q_hat, levels, text.mask, eps)
    return fuse(q_hat, x_hat, text.mask)


def tpt_forward(params: TptParams, text: TokenSequence | tuple, raw: RawVideoFeatures | Sequence[RawVideoFeatures],
                config: TptConfig) -> FusedOutput:
    """Full pass: pyramid assembly, QT, VI, fusion. ``text`` is a TokenSequence or ``(ids, mask)``."""
    if not isinstance(text, TokenSequence):
        ids, mask = text
        text = encode_text(params.text, ids, mask, config.ln_eps)
    pyramid = build_pyramid(raw, config, params.pyramid)
    return tpt_body(params, text, pyramid, config)


# -- parameter utilities ------------------------------------------------------

def parameters(params: TptParams) -> dict[str, Tensor]:
    return dict(named_tensors(params))


def iter_mtl(obj):
    if isinstance(obj, MtlParams):
        yield obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from iter_mtl(getattr(obj, f.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_mtl(item)


def zero_branches(obj) -> int:
    """Zero every attention output matrix and feed-forward outer layer below ``obj``."""
    count = 0
    for layer in iter_mtl(obj):
        layer.attn.w_o.data[...] = 0
        layer.ff.outer.weight.data[...] = 0
        if layer.ff.outer.bias is not None:
            layer.ff.outer.bias.data[...] = 0
        count += 1
    return count


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path: str | Path, params: TptParams, meta: dict) -> None:
    """Container: magic, version, JSON metadata, then named float32 tensors (little-endian)."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    named = list(named_tensors(params))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    return meta, tensors


def load_into(params: TptParams, tensors: dict[str, np.ndarray]) -> None:
    named = dict(named_tensors(params))
    missing = sorted(set(named) - set(tensors))
    extra = sorted(set(tensors) - set(named))
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors differ: missing={missing[:5]} unexpected={extra[:5]}")
    for name, t in named.items():
        src = tensors[name]
        if src.shape != t.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {t.shape}")
        t.data[...] = src.astype(t.dtype)
