"""Synthetic VideoQA tasks, dataset manifests, and train/validation splitting.

Four seeded tasks stand in for the benchmark question types:

* ``scale-count``  a motif is added to k random frames; target k (count regime).
* ``global-class`` every frame leans toward a class prototype; the video-wide
  mean identifies the class (open-ended).
* ``transition``   two motif bursts, one per half; the question names one burst
  and asks what happens before/after it (multi-choice over motif names).
* ``frame-class``  a single frame carries the class prototype (open-ended).

Manifests are JSON Lines; each record has the fields ``id``, ``video``
(``{"file": path}`` relative to the manifest, or ``{"recipe": {...}}``),
``question`` (token ids), ``question_text``, ``regime``, ``target`` and, for
multi-choice, ``candidates`` / ``candidates_text``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TptConfig
from .heads import REGIMES
from .pyramid import RawVideoFeatures, from_frames, read_feature_file, window_table, write_feature_file
from .text import Vocab

TASKS = ("scale-count", "global-class", "transition", "frame-class")
TASK_REGIME = {
    "scale-count": "count",
    "global-class": "open-ended",
    "transition": "multi-choice",
    "frame-class": "open-ended",
}
MOTIF_NAMES = ("jump", "spin", "wave", "clap", "kick", "nod", "roll", "bow")
FILLERS = ("please", "the", "video", "clip", "now", "tell", "me", "in", "this", "scene")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    frames: int | None = None     # defaults to 2^(N-1) * T of the config
    dim: int | None = None        # defaults to the config's appearance dim
    n_classes: int = 4
    n_motifs: int = 4
    count_max: int = 10
    noise: float = 1.0
    strength: float = 3.0
    class_strength: float = 0.6
    distractors: int = 2
    reducer: str = "max"          # motion provider pooling
    world: int = 0                # seeds the motif and class vectors shared across datasets


@dataclass
class Example:
    id: str
    video: RawVideoFeatures
    question: list[int]
    regime: str
    target: int
    candidates: list[list[int]] | None = None


@dataclass
class SyntheticDataset:
    task: str
    examples: list[Example]
    vocab: Vocab
    answers: list[str]
    records: list[dict] = field(default_factory=list)

    @property
    def regime(self) -> str:
        return TASK_REGIME[self.task]

    @property
    def n_answers(self) -> int | None:
        return len(self.answers) if self.answers else None


def resolve_params(params: SynthParams | None, config: TptConfig) -> SynthParams:
    params = params or SynthParams()
    frames = params.frames or 2 ** (config.levels - 1) * config.frames_per_segment
    dim = params.dim or config.appearance_dim
    if dim != config.motion_dim or dim != config.appearance_dim:
        raise ValueError("synthetic videos pool motion from frames, so appearance_dim must equal motion_dim")
    return SynthParams(**{**asdict(params), "frames": frames, "dim": dim})


def _world(p: SynthParams):
    rng = np.random.default_rng([p.world, 0xC0FFEE])
    motifs = rng.normal(size=(max(p.n_motifs, 1), p.dim))
    protos = rng.normal(size=(max(p.n_classes, 1), p.dim))
    return motifs, protos


def _question(rng, words: list[str], p: SynthParams) -> str:
    words = list(words)
    for _ in range(int(rng.integers(0, p.distractors + 1))):
        words.insert(int(rng.integers(1, len(words) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
    return " ".join(words)


def synth_example(task: str, seed: int, index: int, p: SynthParams, target: int | None = None):
    """Frames, question text, target and candidate texts for one example (pure function of its args)."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    motifs, protos = _world(p)
    rng = np.random.default_rng([seed, index])
    F, D = p.frames, p.dim
    frames = rng.normal(scale=p.noise, size=(F, D))
    candidates = None
    if task == "scale-count":
        k = int(rng.integers(0, min(p.count_max, F) + 1)) if target is None else int(target)
        pos = rng.choice(F, size=k, replace=False)
        frames[pos] += p.strength * motifs[0]
        text = _question(rng, ["count", "how", "many", "times", "does", "the", MOTIF_NAMES[0], "happen"], p)
        target = k
    elif task == "global-class":
        c = int(rng.integers(p.n_classes)) if target is None else int(target)
        frames += p.class_strength * protos[c]
        text = _question(rng, ["global", "what", "is", "the", "overall", "class"], p)
        target = c
    elif task == "frame-class":
        c = int(rng.integers(p.n_classes)) if target is None else int(target)
        frames[int(rng.integers(F))] += p.strength * protos[c]
        text = _question(rng, ["frame", "which", "class", "appears", "in", "one", "frame"], p)
        target = c
    else:
        a, b = (int(v) for v in rng.choice(p.n_motifs, size=2, replace=False))
        half = F // 2
        burst = max(1, F // 4)
        for m, lo, hi in ((a, 0, half), (b, half, F)):
            start = int(rng.integers(lo, max(lo + 1, hi - burst + 1)))
            frames[start:min(start + burst, hi)] += p.strength * motifs[m]
        if rng.random() < 0.5:
            words, answer = ["transition", "what", "happens", "after", "the", MOTIF_NAMES[a]], b
        else:
            words, answer = ["transition", "what", "happens", "before", "the", MOTIF_NAMES[b]], a
        text = _question(rng, words, p)
        order = [int(v) for v in rng.permutation(p.n_motifs)]
        candidates = [MOTIF_NAMES[m] for m in order]
        target = order.index(answer)
    return frames, text, int(target), candidates


def _balanced_targets(task: str, size: int, seed: int, p: SynthParams) -> list[int | None]:
    if task in ("global-class", "frame-class"):
        base = np.arange(size) % p.n_classes
        return [int(v) for v in np.random.default_rng([seed, 0xBA1]).permutation(base)]
    if task == "scale-count":
        hi = min(p.count_max, p.frames)
        return [int(v) for v in np.random.default_rng([seed, 0xC0]).integers(0, hi + 1, size=size)]
    return [None] * size


def gen_synthetic(task: str, size: int, seed: int, config: TptConfig, params: SynthParams | None = None,
                  out_dir: str | Path | None = None, features: str = "file",
                  vocab: Vocab | None = None) -> SyntheticDataset:
    """Deterministic synthetic dataset; optionally written as manifest + feature files.

    ``features`` selects how written records reference videos: ``"file"``
    (binary feature files) or ``"recipe"`` (regenerated on load).
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    p = resolve_params(params, config)
    if task == "transition" and p.n_motifs > len(MOTIF_NAMES):
        raise ValueError(f"at most {len(MOTIF_NAMES)} motifs are supported")
    targets = _balanced_targets(task, size, seed, p)
    raw = [synth_example(task, seed, i, p, targets[i]) for i in range(size)]
    if vocab is None:
        texts = [r[1] for r in raw] + [c for r in raw for c in (r[3] or [])]
        vocab = Vocab.build(texts)
    regime = TASK_REGIME[task]
    answers = [f"class{c}" for c in range(p.n_classes)] if regime == "open-ended" else []
    examples, records = [], []
    for i, (frames, text, target, cands) in enumerate(raw):
        ex_id = f"{task}-{seed}-{i:05d}"
        cand_ids = [vocab.encode(c) for c in cands] if cands else None
        examples.append(Example(ex_id, from_frames(frames.astype(np.float32), p.reducer),
                                vocab.encode(text), regime, target, cand_ids))
        rec = {"id": ex_id, "question": vocab.encode(text), "question_text": text,
               "regime": regime, "target": target}
        if cands:
            rec["candidates"] = cand_ids
            rec["candidates_text"] = cands
        rec["video"] = {"recipe": {"task": task, "seed": seed, "index": i, "target": target,
                                   "params": asdict(p)}}
        records.append(rec)
    ds = SyntheticDataset(task, examples, vocab, answers, records)
    if out_dir is not None:
        write_dataset(ds, out_dir, features=features, max_level=max(config.pyramid_levels() + [config.levels]))
    return ds


def write_dataset(ds: SyntheticDataset, out_dir: str | Path, features: str = "file", max_level: int = 3) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if features not in ("file", "recipe"):
        raise ValueError("features must be 'file' or 'recipe'")
    lines = []
    for ex, rec in zip(ds.examples, ds.records):
        rec = dict(rec)
        if features == "file":
            (out / "features").mkdir(exist_ok=True)
            rel = f"features/{ex.id}.tptf"
            write_feature_file(out / rel, ex.video.frame_features, window_table(ex.video, max_level))
            rec["video"] = {"file": rel}
        lines.append(json.dumps(rec, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ds.vocab.save(out / "vocab.txt")
    if ds.answers:
        (out / "answers.txt").write_text("\n".join(ds.answers) + "\n", encoding="utf-8")
    return out / "manifest.jsonl"


# -- manifests ----------------------------------------------------------------

def _check_record(rec: dict, where: str) -> None:
    for key in ("id", "video", "question", "regime", "target"):
        if key not in rec:
            raise ManifestError(f"{where}: missing field {key!r}")
    regime = rec["regime"]
    if regime not in REGIMES:
        raise ManifestError(f"{where}: unknown regime {regime!r}")
    target = rec["target"]
    if not isinstance(target, int) or isinstance(target, bool):
        raise ManifestError(f"{where}: target must be an integer")
    if not rec["question"]:
        raise ManifestError(f"{where}: empty question")
    if regime == "multi-choice":
        cands = rec.get("candidates")
        if not cands or len(cands) < 2:
            raise ManifestError(f"{where}: multi-choice needs >= 2 candidates")
        if not 0 <= target < len(cands):
            raise ManifestError(f"{where}: target {target} outside candidate range")
    elif regime == "open-ended" and target < 0:
        raise ManifestError(f"{where}: class id must be >= 0")


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        _check_record(rec, f"{path}:{lineno}")
        records.append(rec)
    if not records:
        raise ManifestError(f"{path}: no records")
    return records


def load_video(ref: dict, base: Path) -> RawVideoFeatures:
    if "file" in ref:
        fp = base / ref["file"]
        if not fp.is_file():
            raise ManifestError(f"feature file not found: {fp}")
        return read_feature_file(fp)
    if "recipe" in ref:
        r = ref["recipe"]
        p = SynthParams(**r["params"])
        frames, *_ = synth_example(r["task"], r["seed"], r["index"], p, r.get("target"))
        return from_frames(frames.astype(np.float32), p.reducer)
    raise ManifestError(f"video reference needs 'file' or 'recipe': {ref}")


def load_examples(path: str | Path) -> list[Example]:
    path = Path(path)
    examples = []
    for rec in read_manifest(path):
        video = load_video(rec["video"], path.parent)
        examples.append(Example(str(rec["id"]), video, list(rec["question"]), rec["regime"],
                                int(rec["target"]), rec.get("candidates")))
    return examples


def dataset_info(path: str | Path, examples: Sequence[Example]) -> tuple[int, int | None]:
    """``(vocab_size, n_answers)`` from the files beside a manifest, else from the records."""
    base = Path(path).parent
    vocab_file, answers_file = base / "vocab.txt", base / "answers.txt"
    if vocab_file.is_file():
        vocab_size = len(Vocab.load(vocab_file))
    else:
        ids = [i for ex in examples for i in ex.question + [t for c in (ex.candidates or []) for t in c]]
        vocab_size = max(ids) + 1
    n_answers = None
    if examples[0].regime == "open-ended":
        if answers_file.is_file():
            n_answers = len([ln for ln in answers_file.read_text(encoding="utf-8").splitlines() if ln])
        else:
            n_answers = max(ex.target for ex in examples) + 1
    return vocab_size, n_answers


def split_examples(examples: Sequence[Example], seed: int, val_fraction: float = 0.2):
    """Seeded train/validation split."""
    n = len(examples)
    order = np.random.default_rng([seed, 0x5717]).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val >= n:
        n_val = n - 1
    val = [examples[i] for i in sorted(order[:n_val])]
    train = [examples[i] for i in sorted(order[n_val:])]
    return train, val
