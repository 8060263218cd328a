"""Fixed protocols for the directional ablations on the synthetic tasks.

Each protocol pins the task, data sizes and training budget up front; the
variants under comparison share data, data order and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .config import RunConfig, TptConfig, tiny_config
from .data import gen_synthetic
from .train import AblationGrid, AblationRow, ablate


@dataclass(frozen=True)
class Protocol:
    task: str
    grid: AblationGrid
    n_train: int
    n_test: int
    epochs: int
    batch_size: int
    lr: float = 1e-4
    model: TptConfig = field(default_factory=lambda: tiny_config(levels=3))


PROTOCOLS = {
    # multi-scale pyramid against the coarsest level alone, on counting
    "levels": Protocol("scale-count", AblationGrid(levels=[3], fixed_levels=[1]),
                       n_train=256, n_test=200, epochs=30, batch_size=16),
    # full model against skipping question refinement, on before/after questions
    "question": Protocol("transition", AblationGrid(levels=[3], drop_qt=True),
                         n_train=512, n_test=400, epochs=50, batch_size=64),
}


def run_protocol(name: str, seeds: Sequence[int] = (0, 1, 2), out_dir=None) -> list[AblationRow]:
    """Train and score every variant of a protocol; returns one row per variant."""
    p = PROTOCOLS[name]
    train_ds = gen_synthetic(p.task, p.n_train, 0, p.model)
    test_ds = gen_synthetic(p.task, p.n_test, 1, p.model, vocab=train_ds.vocab)
    run = RunConfig(model=p.model, batch_size=p.batch_size, epochs=p.epochs, lr=p.lr)
    return ablate(run, train_ds.examples, len(train_ds.vocab), train_ds.n_answers, p.grid, seeds,
                  test_examples=test_ds.examples, out_dir=out_dir)
