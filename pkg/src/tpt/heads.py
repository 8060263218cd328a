"""Answer decoders for the three regimes, their losses, and answer selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .config import TptConfig
from .nn import LinearLayer, activation, linear_forward, new_linear
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

REGIMES = ("open-ended", "count", "multi-choice")
PROB_FLOOR = 1e-12


@dataclass
class OpenEndedHead:
    hidden: LinearLayer   # 2d -> d
    out: LinearLayer      # d -> |A|
    activation: str = "gelu"

    def __post_init__(self):
        if self.out.out_features < 2:
            raise ValueError("open-ended head needs at least two answer classes")


@dataclass
class CountHead:
    hidden: LinearLayer   # 2d -> d
    out: LinearLayer      # d -> 1
    count_min: int = 0
    count_max: int = 10
    activation: str = "gelu"

    def __post_init__(self):
        if self.count_min > self.count_max:
            raise ValueError("count_min must not exceed count_max")


@dataclass
class MultiChoiceHead:
    hidden: LinearLayer   # 4d -> d
    out: LinearLayer      # d -> 1
    activation: str = "gelu"
    reduction: str = "mean"


def init_head(rng, config: TptConfig, regime: str, n_answers: int | None = None):
    d, dtype, act = config.d_model, config.dtype, config.activation
    if regime == "open-ended":
        if not n_answers or n_answers < 2:
            raise ValueError("open-ended regime needs n_answers >= 2")
        return OpenEndedHead(new_linear(rng, 2 * d, d, dtype), new_linear(rng, d, n_answers, dtype), act)
    if regime == "count":
        return CountHead(new_linear(rng, 2 * d, d, dtype), new_linear(rng, d, 1, dtype),
                         config.count_min, config.count_max, act)
    if regime == "multi-choice":
        return MultiChoiceHead(new_linear(rng, 4 * d, d, dtype), new_linear(rng, d, 1, dtype), act,
                               config.hinge_reduction)
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def regime_of(head) -> str:
    if isinstance(head, OpenEndedHead):
        return "open-ended"
    if isinstance(head, CountHead):
        return "count"
    if isinstance(head, MultiChoiceHead):
        return "multi-choice"
    raise TypeError(f"not a decoder head: {type(head).__name__}")


def _mlp(head, x: Tensor) -> Tensor:
    return linear_forward(head.out, activation(head.activation)(linear_forward(head.hidden, x)))


# -- open-ended ---------------------------------------------------------------

def open_ended_logits(head: OpenEndedHead, o_bar: Tensor) -> Tensor:
    return _mlp(head, o_bar)


def open_ended_forward(head: OpenEndedHead, o_bar: Tensor) -> Tensor:
    """Class probabilities ``[..., |A|]``."""
    return tt.softmax_last(open_ended_logits(head, o_bar))


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Mean of ``-log P[target]`` with probabilities floored at 1e-12."""
    target = np.asarray(target, dtype=np.int64)
    if probs.ndim == 1:
        probs = tt.reshape(probs, (1, probs.shape[0]))
        target = target.reshape(1)
    picked = tt.take_last(probs, target)
    floored = int((picked.data <= PROB_FLOOR).sum())
    if floored:
        log.warning("cross_entropy: %d target probabilities clamped to %.0e", floored, PROB_FLOOR)
    return tt.mean(tt.neg(tt.log(picked, floor=PROB_FLOOR)))


# -- count --------------------------------------------------------------------

def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def count_answer(raw, count_min: int = 0, count_max: int = 10) -> np.ndarray:
    return np.clip(round_half_away(raw), count_min, count_max).astype(np.int64)


def count_forward(head: CountHead, o_bar: Tensor) -> tuple[Tensor, np.ndarray]:
    """Real-valued count ``[...]`` (used by the loss) and the clamped integer answer."""
    raw = _mlp(head, o_bar)
    raw = tt.reshape(raw, raw.shape[:-1])
    return raw, count_answer(raw.data, head.count_min, head.count_max)


def mse_loss(raw: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=raw.dtype).reshape(raw.shape)
    diff = raw - target
    return tt.mean(diff * diff)


# -- multi-choice -------------------------------------------------------------

def multi_choice_forward(head: MultiChoiceHead, o_bar_q: Tensor, o_bar_a) -> Tensor:
    """Candidate scores ``[..., K]``.

    ``o_bar_q`` is ``[..., 2d]``; ``o_bar_a`` is ``[..., K, 2d]`` or a list of
    K tensors ``[..., 2d]``.
    """
    if isinstance(o_bar_a, (list, tuple)):
        o_bar_a = tt.stack(o_bar_a, axis=-2)
    K = o_bar_a.shape[-2]
    if K < 2:
        raise ValueError(f"multi-choice needs at least 2 candidates, got {K}")
    if o_bar_q.shape[-1] != o_bar_a.shape[-1]:
        raise ShapeError("multi_choice_forward", o_bar_q.shape, o_bar_a.shape)
    q = tt.reshape(o_bar_q, o_bar_q.shape[:-1] + (1, o_bar_q.shape[-1]))
    q = tt.broadcast_to(q, o_bar_a.shape)
    scores = _mlp(head, tt.concat([q, o_bar_a], axis=-1))
    return tt.reshape(scores, scores.shape[:-1])


def hinge_loss(scores: Tensor, gt_index, reduction: str = "mean") -> Tensor:
    """``max(0, 1 + p_k - p_gt)`` over wrong candidates, reduced per example then batch-averaged."""
    if scores.ndim == 1:
        scores = tt.reshape(scores, (1, scores.shape[0]))
    gt = np.asarray(gt_index, dtype=np.int64).reshape(scores.shape[:-1])
    K = scores.shape[-1]
    p_gt = tt.take_last(scores, gt)
    margins = tt.relu(tt.add(tt.sub(scores, tt.reshape(p_gt, p_gt.shape + (1,))), 1.0))
    wrong = (np.arange(K) != gt[..., None]).astype(scores.dtype)
    per_example = tt.sum(margins * wrong, axis=-1)
    if reduction == "mean":
        per_example = tt.scale(per_example, 1.0 / (K - 1))
    return tt.mean(per_example)


# -- answer selection ---------------------------------------------------------

def predict(regime: str, outputs, count_min: int = 0, count_max: int = 10) -> np.ndarray:
    """Argmax class / clamped rounded count / argmax candidate. Ties go to the lowest index."""
    values = outputs.data if isinstance(outputs, Tensor) else np.asarray(outputs)
    if regime in ("open-ended", "multi-choice"):
        return np.argmax(values, axis=-1)
    if regime == "count":
        return count_answer(values, count_min, count_max)
    raise ValueError(f"unknown regime {regime!r}")
