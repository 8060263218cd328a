"""Training, evaluation and ablation loops with CSV metrics and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .config import RunConfig, TptConfig
from .data import Example, split_examples
from .heads import (cross_entropy, count_forward, hinge_loss, mse_loss, multi_choice_forward,
                    open_ended_forward, predict, regime_of)
from .model import TptParams, init_params, load_into, read_checkpoint, save_checkpoint, tpt_body
from .nn import AdamState, PlateauScheduler, adam_step, named_tensors, trainable_parameters
from .pyramid import assemble_level, gather_levels
from .text import encode_text, pad_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "loss", "accuracy", "mse", "lr", "seconds")


class TrainingError(RuntimeError):
    pass


class ConfigMismatchError(ValueError):
    def __init__(self, diffs: dict):
        self.diffs = diffs
        shown = ", ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in sorted(diffs.items()))
        super().__init__(f"checkpoint config differs: {shown}")


@dataclass
class Batch:
    keys: list[str]
    ids: np.ndarray          # [B, L] or [B, K+1, L] (question first) for multi-choice
    mask: np.ndarray
    levels: list[tuple[int, np.ndarray, np.ndarray]]   # (n, V [B,S,T,Da], M [B,S,Dm])
    targets: np.ndarray
    regime: str

    def digest(self) -> str:
        return hashlib.sha1("\n".join(self.keys).encode()).hexdigest()[:16]


class LevelCache:
    """Raw per-level gathers, keyed by example id; these depend only on the data."""

    def __init__(self, config: TptConfig):
        self.config = config
        self._store: dict[str, list] = {}

    def get(self, ex: Example):
        hit = self._store.get(ex.id)
        if hit is None:
            hit = self._store[ex.id] = gather_levels(ex.video, self.config)
        return hit


def collate(examples: Sequence[Example], config: TptConfig, cache: LevelCache | None = None) -> Batch:
    regimes = {ex.regime for ex in examples}
    if len(regimes) != 1:
        raise TrainingError(f"mixed regimes in one batch: {sorted(regimes)}")
    regime = regimes.pop()
    cache = cache or LevelCache(config)
    if regime == "multi-choice":
        K = {len(ex.candidates) for ex in examples}
        if len(K) != 1:
            raise TrainingError("multi-choice examples in a batch must share the candidate count")
        seqs = [[ex.question] + list(ex.candidates) for ex in examples]
        L = max(len(s) for group in seqs for s in group)
        pairs = [pad_batch(group, L) for group in seqs]
        ids = np.stack([p[0] for p in pairs])
        mask = np.stack([p[1] for p in pairs])
    else:
        ids, mask = pad_batch([ex.question for ex in examples])
    gathered = [cache.get(ex) for ex in examples]
    levels = []
    for i, n in enumerate(config.pyramid_levels()):
        V = np.stack([g[i][1] for g in gathered])
        M = np.stack([g[i][2] for g in gathered])
        levels.append((n, V, M))
    targets = np.asarray([ex.target for ex in examples], dtype=np.int64)
    return Batch([ex.id for ex in examples], ids, mask, levels, targets, regime)


def forward_batch(params: TptParams, batch: Batch, config: TptConfig):
    """Returns ``(loss, head outputs)``: probabilities, raw counts, or candidate scores."""
    dtype = config.dtype
    pyramid = [
        assemble_level(V.astype(dtype, copy=False), M.astype(dtype, copy=False), params.pyramid,
                       params.pyramid.positions[i], n)
        for i, (n, V, M) in enumerate(batch.levels)
    ]
    text = encode_text(params.text, batch.ids, batch.mask, config.ln_eps)
    fused = tpt_body(params, text, pyramid, config)
    head = params.head
    if batch.regime == "open-ended":
        probs = open_ended_forward(head, fused.o_bar)
        return cross_entropy(probs, batch.targets), probs.data
    if batch.regime == "count":
        raw, _ = count_forward(head, fused.o_bar)
        return mse_loss(raw, batch.targets), raw.data
    K1 = fused.o_bar.shape[-2]
    q = tt.reshape(tt.slice_axis(fused.o_bar, 0, 1, axis=-2), fused.o_bar.shape[:-2] + fused.o_bar.shape[-1:])
    cands = tt.slice_axis(fused.o_bar, 1, K1, axis=-2)
    scores = multi_choice_forward(head, q, cands)
    return hinge_loss(scores, batch.targets, head.reduction), scores.data


def batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class EvalResult:
    loss: float
    accuracy: float | None
    mse: float | None
    mse_raw: float | None
    predictions: np.ndarray
    targets: np.ndarray
    confusion: dict = field(default_factory=dict)

    def metric(self, regime: str) -> float:
        return self.mse if regime == "count" else self.accuracy


def evaluate_examples(params: TptParams, examples: Sequence[Example], config: TptConfig,
                      batch_size: int = 64, cache: LevelCache | None = None) -> EvalResult:
    regime = regime_of(params.head)
    cache = cache or LevelCache(config)
    total, preds, raws = 0.0, [], []
    with tt.no_grad():
        for idx in batches(len(examples), batch_size):
            batch = collate([examples[i] for i in idx], config, cache)
            loss, out = forward_batch(params, batch, config)
            total += loss.item() * len(idx)
            raws.append(out)
            preds.append(predict(regime, out, config.count_min, config.count_max))
    pred = np.concatenate(preds)
    targets = np.asarray([ex.target for ex in examples])
    loss = total / len(examples)
    if regime == "count":
        raw = np.concatenate(raws)
        mse = float(np.mean((pred - targets) ** 2))
        mse_raw = float(np.mean((raw - targets) ** 2))
        acc = None
    else:
        acc = float(np.mean(pred == targets))
        mse = mse_raw = None
    confusion: dict[str, int] = {}
    for t, p in zip(targets.tolist(), pred.tolist()):
        key = f"{t}->{p}"
        confusion[key] = confusion.get(key, 0) + 1
    return EvalResult(loss, acc, mse, mse_raw, pred, targets, confusion)


# -- metrics ------------------------------------------------------------------

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class MetricsWriter:
    """Append-only CSV with a fixed header."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def write(self, row: dict) -> None:
        if not self.path:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([
                row["epoch"], row["split"], _fmt(row["loss"]), _fmt(row["accuracy"]),
                _fmt(row["mse"]), _fmt(row["lr"]), f"{row['seconds']:.3f}",
            ])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({
                "epoch": int(r["epoch"]), "split": r["split"],
                **{k: (float(r[k]) if r[k] != "" else None) for k in ("loss", "accuracy", "mse", "lr", "seconds")},
            })
    return rows


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    params: TptParams
    rows: list[dict]
    best_metric: float | None
    best_epoch: int
    best_state: dict[str, np.ndarray]
    batch_hashes: list[str]
    steps: int
    checkpoint: Path | None = None

    def best_params(self) -> TptParams:
        """A copy of the model restored to the best-validation weights."""
        params = _clone_params(self.params)
        for name, t in named_tensors(params):
            t.data[...] = self.best_state[name]
        return params


def _clone_params(params: TptParams) -> TptParams:
    import copy
    return copy.deepcopy(params)


def _better(regime: str, new: float, old: float | None) -> bool:
    if old is None:
        return True
    return new < old if regime == "count" else new > old


def checkpoint_meta(run: RunConfig, regime: str, vocab_size: int, n_answers: int | None, epoch: int) -> dict:
    return {"config": dataclasses.asdict(run.model), "regime": regime, "vocab_size": vocab_size,
            "n_answers": n_answers, "seed": run.seed, "epoch": epoch}


def train(run: RunConfig, examples: Sequence[Example], vocab_size: int, n_answers: int | None = None,
          out_dir: str | Path | None = None, val_examples: Sequence[Example] | None = None,
          clock=time.perf_counter) -> TrainResult:
    """Mini-batch Adam with the plateau scheduler; checkpoints the best validation metric.

    Without ``val_examples`` a seeded ``run.val_fraction`` split of ``examples``
    is held out. The scheduler is seeded with the untrained model's loss.
    ``clock`` feeds the wall-clock ``seconds`` column of the metrics file.
    """
    config = run.model
    regimes = {ex.regime for ex in examples}
    if len(regimes) != 1:
        raise TrainingError(f"a run needs one regime, found {sorted(regimes)}")
    regime = regimes.pop()
    if val_examples is None:
        train_ex, val_ex = split_examples(examples, run.seed, run.val_fraction)
    else:
        train_ex, val_ex = list(examples), list(val_examples)
    out = Path(out_dir or run.out_dir) if (out_dir or run.out_dir) else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.csv" if out else None)
    params = init_params(config, run.seed, vocab_size, regime, n_answers)
    trainable = trainable_parameters(params)
    adam = AdamState(lr=run.lr)
    sched = PlateauScheduler(lr=run.lr, patience=run.patience)
    cache = LevelCache(config)
    t0 = clock()
    rows: list[dict] = []

    def emit(epoch, split, res: EvalResult | None, loss, acc=None, mse=None):
        row = {"epoch": epoch, "split": split, "loss": loss,
               "accuracy": res.accuracy if res else acc, "mse": res.mse if res else mse,
               "lr": sched.lr, "seconds": clock() - t0}
        rows.append(row)
        writer.write(row)

    start_train = evaluate_examples(params, train_ex, config, run.batch_size, cache)
    start_val = evaluate_examples(params, val_ex, config, run.batch_size, cache) if val_ex else None
    emit(0, "train", start_train, start_train.loss)
    if start_val:
        emit(0, "val", start_val, start_val.loss)
    sched.start(start_val.loss if (run.plateau_on == "val" and start_val) else start_train.loss)

    best_metric, best_epoch = None, 0
    best_state = {k: t.data.copy() for k, t in named_tensors(params)}
    hashes: list[str] = []
    steps = 0
    meta_args = (run, regime, vocab_size, n_answers)
    for epoch in range(1, run.epochs + 1):
        order = np.random.default_rng([run.seed, epoch]).permutation(len(train_ex))
        loss_sum, n_seen, correct, sq_err = 0.0, 0, 0, 0.0
        for b, idx in enumerate(batches(len(train_ex), run.batch_size, order)):
            batch = collate([train_ex[i] for i in idx], config, cache)
            hashes.append(batch.digest())
            loss, scores = forward_batch(params, batch, config)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} batch {b} "
                                    f"(examples {batch.keys[:4]}...)")
            tt.backward(loss)
            adam_step(adam, trainable)
            tt.zero_grads(trainable.values())
            steps += 1
            loss_sum += value * len(idx)
            n_seen += len(idx)
            pred = predict(regime, scores, config.count_min, config.count_max)
            if regime == "count":
                sq_err += float(np.sum((pred - batch.targets) ** 2))
            else:
                correct += int(np.sum(pred == batch.targets))
            if run.max_steps is not None and steps >= run.max_steps:
                break
        train_loss = loss_sum / n_seen
        val = evaluate_examples(params, val_ex, config, run.batch_size, cache) if val_ex else None
        monitored = val.loss if (run.plateau_on == "val" and val) else train_loss
        adam.lr = sched.step(monitored)
        if regime == "count":
            emit(epoch, "train", None, train_loss, mse=sq_err / n_seen)
        else:
            emit(epoch, "train", None, train_loss, acc=correct / n_seen)
        if val:
            emit(epoch, "val", val, val.loss)
        score = val.metric(regime) if val else -train_loss if regime != "count" else train_loss
        if _better(regime, score, best_metric):
            best_metric, best_epoch = score, epoch
            best_state = {k: t.data.copy() for k, t in named_tensors(params)}
            if out:
                save_checkpoint(out / "best.ckpt", params, checkpoint_meta(*meta_args, epoch))
        if run.max_steps is not None and steps >= run.max_steps:
            break
    if out:
        save_checkpoint(out / "last.ckpt", params, checkpoint_meta(*meta_args, epoch))
        (out / "batches.log").write_text("\n".join(hashes) + "\n", encoding="utf-8")
    log.info("trained %d steps; best %s=%.4f at epoch %d", steps,
             "mse" if regime == "count" else "accuracy", best_metric if best_metric is not None else float("nan"),
             best_epoch)
    return TrainResult(params, rows, best_metric, best_epoch, best_state, hashes, steps,
                       out / "best.ckpt" if out else None)


def load_model(checkpoint: str | Path, config: TptConfig | None = None) -> tuple[TptParams, dict]:
    """Rebuild a model from a checkpoint, refusing a mismatched ``config``."""
    meta, tensors = read_checkpoint(checkpoint)
    saved = TptConfig(**meta["config"])
    if config is not None:
        a, b = dataclasses.asdict(saved), dataclasses.asdict(config)
        diffs = {k: (a[k], b[k]) for k in a if a[k] != b[k]}
        if diffs:
            raise ConfigMismatchError(diffs)
    params = init_params(saved, meta.get("seed", 0), meta["vocab_size"], meta["regime"], meta["n_answers"])
    load_into(params, tensors)
    return params, meta


def evaluate(checkpoint: str | Path, examples: Sequence[Example], config: TptConfig | None = None,
             batch_size: int = 64) -> EvalResult:
    params, meta = load_model(checkpoint, config)
    saved = TptConfig(**meta["config"])
    return evaluate_examples(params, examples, saved, batch_size)


# -- ablation -----------------------------------------------------------------

@dataclass
class AblationGrid:
    levels: list[int] = field(default_factory=list)         # full-pyramid variants, one per N
    fixed_levels: list[int] = field(default_factory=list)   # single-level variants
    drop_qt: bool = False


@dataclass
class AblationRow:
    variant: str
    metric: str
    values: list[float]
    data_hash: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def spread(self) -> float:
        return float(np.std(self.values))


def ablation_variants(base: TptConfig, grid: AblationGrid) -> list[tuple[str, TptConfig]]:
    out = []
    for n in grid.levels:
        out.append((f"N={n}", base.replace(levels=n, fixed_level=None, use_qt=True)))
    for lv in grid.fixed_levels:
        out.append((f"w/o TP, L={lv}", base.replace(fixed_level=lv, use_qt=True)))
    if grid.drop_qt:
        out.append(("w/o QT", base.replace(fixed_level=None, use_qt=False)))
    if not out:
        raise ValueError("ablation grid is empty")
    return out


def ablate(run: RunConfig, examples: Sequence[Example], vocab_size: int, n_answers: int | None,
           grid: AblationGrid, seeds: Sequence[int] = (0, 1, 2),
           test_examples: Sequence[Example] | None = None, out_dir: str | Path | None = None) -> list[AblationRow]:
    """Train every variant under every seed on identical data and data order.

    Each trained model is scored (best-validation weights) on ``test_examples``
    when given, otherwise on its validation split.
    """
    regime = examples[0].regime
    metric = "mse" if regime == "count" else "accuracy"
    rows = []
    for name, cfg in ablation_variants(run.model, grid):
        values, order_hashes = [], []
        for seed in seeds:
            r = dataclasses.replace(run, model=cfg, seed=seed, out_dir=None)
            res = train(r, examples, vocab_size, n_answers)
            if test_examples is not None:
                scored = evaluate_examples(res.best_params(), test_examples, cfg, run.batch_size)
            else:
                _, val = split_examples(examples, seed, run.val_fraction)
                scored = evaluate_examples(res.best_params(), val, cfg, run.batch_size)
            values.append(scored.metric(regime))
            order_hashes.append(hashlib.sha1("".join(res.batch_hashes).encode()).hexdigest()[:12])
        rows.append(AblationRow(name, metric, values, "/".join(order_hashes)))
        log.info("ablation %s: %s=%.4f +- %.4f", name, metric, rows[-1].mean, rows[-1].spread)
    if out_dir:
        write_ablation_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_table(rows: Sequence[AblationRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "metric", "mean", "spread", "values", "data_order"])
        for r in rows:
            w.writerow([r.variant, r.metric, repr(r.mean), repr(r.spread),
                        " ".join(repr(v) for v in r.values), r.data_hash])


def format_ablation(rows: Sequence[AblationRow]) -> str:
    width = max(len(r.variant) for r in rows)
    lines = [f"{'variant'.ljust(width)}  metric    mean +- spread"]
    for r in rows:
        lines.append(f"{r.variant.ljust(width)}  {r.metric:<8}  {r.mean:.4f} +- {r.spread:.4f}")
    return "\n".join(lines)
