import json

import numpy as np
import pytest

from tpt.config import tiny_config
from tpt.data import (MOTIF_NAMES, TASK_REGIME, TASKS, ManifestError, SynthParams, _world, dataset_info, gen_synthetic,
                      load_examples, read_manifest, resolve_params, split_examples)
from tpt.pyramid import extract_level

CFG = tiny_config(appearance_dim=16, motion_dim=16)


@pytest.mark.parametrize("task", TASKS)
def test_generation_is_deterministic_and_file_backed(task, tmp_path):
    a = gen_synthetic(task, 6, 3, CFG, out_dir=tmp_path / "a")
    gen_synthetic(task, 6, 3, CFG, out_dir=tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    loaded = load_examples(tmp_path / "a" / "manifest.jsonl")
    assert [e.id for e in loaded] == [e.id for e in a.examples]
    for mem, disk in zip(a.examples, loaded):
        assert mem.regime == TASK_REGIME[task] == disk.regime
        np.testing.assert_array_equal(mem.video.frame_features, disk.video.frame_features)
        for n in (1, 2):
            np.testing.assert_array_equal(extract_level(mem.video, n, 4)[1], extract_level(disk.video, n, 4)[1])


def test_recipe_manifests_regenerate_identical_videos(tmp_path):
    ds = gen_synthetic("frame-class", 4, 1, CFG, out_dir=tmp_path, features="recipe")
    assert not (tmp_path / "features").exists()
    for mem, disk in zip(ds.examples, load_examples(tmp_path / "manifest.jsonl")):
        np.testing.assert_array_equal(mem.video.frame_features, disk.video.frame_features)


def test_count_targets_are_uniform_over_range():
    ds = gen_synthetic("scale-count", 1100, 0, CFG, SynthParams(frames=32))
    counts = np.bincount([e.target for e in ds.examples], minlength=11)
    assert len(counts) == 11
    # chi-square with 10 degrees of freedom; 29.6 is the 0.1% critical value
    expected = len(ds.examples) / 11
    assert ((counts - expected) ** 2 / expected).sum() < 29.6


def test_count_videos_carry_exactly_k_motifs():
    p = SynthParams(noise=0.0, frames=32)
    ds = gen_synthetic("scale-count", 20, 0, CFG, p)
    for ex in ds.examples:
        active = np.abs(ex.video.frame_features).sum(axis=1) > 0
        assert active.sum() == ex.target


def test_global_class_is_linearly_solvable_from_level_one_mean():
    """A least-squares probe on the level-1 frame mean separates the classes."""
    train = gen_synthetic("global-class", 400, 0, CFG)
    test = gen_synthetic("global-class", 200, 1, CFG)

    def feats(ds):
        X = np.stack([extract_level(e.video, 1, CFG.frames_per_segment)[0][0].mean(0) for e in ds.examples])
        return np.hstack([X, np.ones((len(X), 1))]), np.array([e.target for e in ds.examples])

    X, y = feats(train)
    W, *_ = np.linalg.lstsq(X, np.eye(4)[y], rcond=None)
    Xt, yt = feats(test)
    assert np.mean(np.argmax(Xt @ W, 1) == yt) >= 0.95


def test_transition_answers_follow_burst_order():
    p = resolve_params(SynthParams(noise=0.0), CFG)
    motifs, _ = _world(p)
    ds = gen_synthetic("transition", 12, 0, CFG, p)
    half = p.frames // 2
    for ex, rec in zip(ds.examples, ds.records):
        frames = ex.video.frame_features

        def motif_in(rows):
            row = rows[np.abs(rows).sum(1) > 0][0] / p.strength
            return MOTIF_NAMES[int(np.argmin(np.abs(motifs - row).sum(1)))]

        first, second = motif_in(frames[:half]), motif_in(frames[half:])
        words = rec["question_text"].split()
        answer = rec["candidates_text"][ex.target]
        if "after" in words:
            assert first in words and answer == second
        else:
            assert second in words and answer == first


def test_shared_world_across_seeds():
    a = gen_synthetic("frame-class", 2, 0, CFG, SynthParams(noise=0.0))
    b = gen_synthetic("frame-class", 2, 9, CFG, SynthParams(noise=0.0))
    rows_a = {tuple(r) for e in a.examples for r in e.video.frame_features if r.any()}
    rows_b = {tuple(r) for e in b.examples for r in e.video.frame_features if r.any()}
    assert rows_a == rows_b and len(rows_a) == 2


def test_manifest_validation(tmp_path):
    path = tmp_path / "m.jsonl"
    good = {"id": "x", "video": {"file": "f"}, "question": [2], "regime": "count", "target": 3}
    path.write_text(json.dumps({**good, "regime": "ranking"}) + "\n")
    with pytest.raises(ManifestError, match="regime"):
        read_manifest(path)
    path.write_text(json.dumps({k: v for k, v in good.items() if k != "target"}) + "\n")
    with pytest.raises(ManifestError, match="target"):
        read_manifest(path)
    path.write_text(json.dumps({**good, "regime": "multi-choice", "candidates": [[2], [3]], "target": 5}) + "\n")
    with pytest.raises(ManifestError, match="candidate"):
        read_manifest(path)
    path.write_text("{not json\n")
    with pytest.raises(ManifestError):
        read_manifest(path)
    path.write_text(json.dumps(good) + "\n")
    with pytest.raises(ManifestError, match="feature file not found"):
        load_examples(path)
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "absent.jsonl")


def test_dataset_info_and_split(tmp_path):
    ds = gen_synthetic("global-class", 10, 0, CFG, out_dir=tmp_path)
    assert dataset_info(tmp_path / "manifest.jsonl", ds.examples) == (len(ds.vocab), 4)
    train, val = split_examples(ds.examples, 0, 0.2)
    assert len(val) == 2 and len(train) == 8
    assert {e.id for e in train}.isdisjoint(e.id for e in val)
    again = split_examples(ds.examples, 0, 0.2)
    assert [e.id for e in again[1]] == [e.id for e in val]
