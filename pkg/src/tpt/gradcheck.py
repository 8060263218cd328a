"""End-to-end finite-difference check of the whole model through each loss."""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .config import TptConfig
from .data import Example
from .heads import REGIMES
from .model import init_params, parameters
from .pyramid import from_frames
from .train import collate, forward_batch


def random_batch(config: TptConfig, regime: str, batch: int = 2, vocab_size: int = 12,
                 n_answers: int = 3, n_candidates: int = 3, seed: int = 0) -> list[Example]:
    """Small random examples with ragged question lengths (so padding is exercised)."""
    rng = np.random.default_rng(seed)
    frames = 2 ** (config.levels - 1) * config.frames_per_segment + 1
    out = []
    for i in range(batch):
        video = from_frames(rng.normal(size=(frames, config.appearance_dim)), "mean")
        question = [int(v) for v in rng.integers(2, vocab_size, size=3 + i)]
        if regime == "multi-choice":
            cands = [[int(v) for v in rng.integers(2, vocab_size, size=1 + (k % 2))] for k in range(n_candidates)]
            target = int(rng.integers(n_candidates))
        elif regime == "count":
            cands, target = None, int(rng.integers(0, 6))
        else:
            cands, target = None, int(rng.integers(n_answers))
        out.append(Example(f"gc-{i}", video, question, regime, target, cands))
    return out


def check_model_gradients(config: TptConfig, regime: str, seed: int = 0, max_entries: int | None = 6,
                          step: float = 1e-5, report: dict | None = None) -> float:
    """Worst relative error over every parameter tensor of a freshly initialised model.

    Requires a float64 ``config``. ``max_entries`` samples that many entries per
    tensor (all of them when None).
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    if config.precision != "float64":
        raise tt.PrecisionError("gradient checks need precision=float64")
    if config.appearance_dim != config.motion_dim:
        raise ValueError("gradient check videos pool motion from frames; appearance_dim must equal motion_dim")
    vocab_size, n_answers = 12, 3
    params = init_params(config, seed, vocab_size, regime, n_answers if regime == "open-ended" else None)
    examples = random_batch(config, regime, vocab_size=vocab_size, n_answers=n_answers, seed=seed + 1)
    batch = collate(examples, config)
    with_params = parameters(params)
    return tt.grad_check(lambda: forward_batch(params, batch, config)[0], with_params,
                         step=step, max_entries=max_entries, seed=seed, report=report)
