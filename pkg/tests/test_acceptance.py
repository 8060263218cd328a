"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Every check runs at its stated tolerance and time budget.
"""

import math
import time

import numpy as np
import pytest

from tpt import tensor as tt
from tpt import train as train_mod
from tpt.attention import attend, init_block, init_mma, mt_block
from tpt.config import RunConfig, tiny_config
from tpt.data import gen_synthetic
from tpt.experiments import run_protocol
from tpt.gradcheck import check_model_gradients
from tpt.heads import count_answer, cross_entropy, hinge_loss
from tpt.model import init_params, vi_forward, zero_branches
from tpt.nn import PlateauScheduler
from tpt.pyramid import build_pyramid, from_frames
from tpt.tensor import Tensor
from tpt.train import evaluate_examples, read_metrics, train

RESULTS: list[str] = []


@pytest.fixture
def report(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number: int, title: str, ok: bool, detail: str):
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        RESULTS.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return emit


def test_c01_shape_law(report):
    t0 = time.perf_counter()
    rows = {}
    for N in (1, 2, 3):
        for T in (2, 4, 16):
            cfg = tiny_config(levels=N, frames_per_segment=T, appearance_dim=8, motion_dim=8)
            params = init_params(cfg, 0, 4).pyramid
            raw = from_frames(np.random.default_rng(N * T).normal(size=(2 ** (N - 1) * T + 3, 8)))
            for lv in build_pyramid(raw, cfg, params):
                rows[(N, T, lv.level)] = (lv.x.shape[0], 2 ** (lv.level - 1) * (T + 1))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in rows.items() if v[0] != v[1]}
    ok = not bad and len(rows) == 3 * (1 + 2 + 3) and elapsed < 1.0
    assert report(1, "shape law", ok, f"{len(rows)} (N, T, n) cases, mismatches={bad}, {elapsed:.2f}s")


def test_c02_gradient_fidelity(report):
    cfg = tiny_config(precision="float64")
    assert (cfg.levels, cfg.frames_per_segment, cfg.layers, cfg.d_model, cfg.heads) == (2, 4, 1, 32, 4)
    t0 = time.perf_counter()
    worst = {}
    for regime in ("open-ended", "count", "multi-choice"):
        worst[regime] = check_model_gradients(cfg, regime, seed=0, max_entries=12)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    assert report(2, "gradient fidelity", ok, f"worst rel. error {detail} (< 1e-4), {elapsed:.1f}s")


@pytest.mark.parametrize("precision", ["float64", "float32"])
def test_c03_attention_normalization_and_permutation(report, precision):
    cfg = tiny_config(precision=precision)
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_sum, worst_perm = 0.0, 0.0
    for trial in range(20):
        p = init_mma(rng, cfg)
        lq, lk = rng.integers(1, 40, size=2)
        q = Tensor(rng.normal(size=(2, lq, cfg.d_model)).astype(cfg.dtype))
        kv = rng.normal(size=(2, lk, cfg.d_model)).astype(cfg.dtype)
        mask = rng.random((2, lk)) < 0.7
        mask[:, 0] = True
        out, _, w = attend(p, q, Tensor(kv), mask)
        worst_sum = max(worst_sum, float(np.abs(w.data.astype(np.float64).sum(-1) - 1).max()))
        perm = rng.permutation(lk)
        out_p, _, _ = attend(p, q, Tensor(kv[:, perm]), mask[:, perm])
        worst_perm = max(worst_perm, float(np.abs(out_p.data - out.data).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_sum <= 1e-6 and worst_perm <= 1e-6 and elapsed < 10
    assert report(3, f"attention normalization/permutation ({precision})", ok,
                  f"max |row sum - 1| {worst_sum:.1e}, max permutation drift {worst_perm:.1e} (<= 1e-6), "
                  f"{elapsed:.2f}s")


def test_c04_residual_identity(report):
    cfg = tiny_config(precision="float64", levels=3, layers=3)
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    block = init_block(rng, cfg)
    zero_branches(block)
    x = Tensor(rng.normal(size=(5, 7, cfg.d_model)))
    c = Tensor(rng.normal(size=(5, 3, cfg.d_model)))
    block_identity = np.array_equal(mt_block(block, x, c, None, "plain-primary").data, x.data)

    params = init_params(cfg, 0, 10)
    zero_branches(params)
    pyramid = build_pyramid(from_frames(rng.normal(size=(16, cfg.appearance_dim))), cfg, params.pyramid)
    q_hat = Tensor(rng.normal(size=(4, cfg.d_model)))
    _, trace = vi_forward(params.vi, q_hat, pyramid, return_levels=True)
    top = pyramid[-1].x.data
    level_block = np.array_equal(trace["block"][cfg.levels].data, top)
    # the external residual around the top block adds X^N once more
    level_hat = np.array_equal(trace["x_hat"][cfg.levels].data, 2 * top)
    elapsed = time.perf_counter() - t0
    ok = block_identity and level_block and level_hat and elapsed < 10
    assert report(4, "residual identity", ok,
                  f"mt_block identity={block_identity}, level-N block output == X^N: {level_block}, "
                  f"X-hat^N == 2 X^N: {level_hat} (bit-exact, 64-bit), {elapsed:.2f}s")


def test_c05_overfit(report):
    cfg = tiny_config()
    ds = gen_synthetic("global-class", 32, 0, cfg)
    run = RunConfig(model=cfg, batch_size=8, epochs=1000, lr=1e-4, max_steps=500)
    t0 = time.perf_counter()
    res = train(run, ds.examples, len(ds.vocab), ds.n_answers, val_examples=[])
    scored = evaluate_examples(res.params, ds.examples, cfg)
    elapsed = time.perf_counter() - t0
    ok = res.steps <= 500 and scored.accuracy == 1.0 and scored.loss < 0.05 and elapsed < 300
    assert report(5, "overfit 32 examples", ok,
                  f"{res.steps} steps, train accuracy {scored.accuracy:.3f}, loss {scored.loss:.4f} (< 0.05), "
                  f"{elapsed:.0f}s")


def test_c06_pyramid_beats_single_level_on_counting(report):
    t0 = time.perf_counter()
    full, single = run_protocol("levels", seeds=(0, 1, 2))
    elapsed = time.perf_counter() - t0
    ok = full.mean <= single.mean and elapsed < 1800
    assert report(6, "levels ablation (scale-count MSE)", ok,
                  f"N=3 {full.mean:.3f} +- {full.spread:.3f} vs L=1 {single.mean:.3f} +- {single.spread:.3f} "
                  f"(lower is better), seeds {full.values} / {single.values}, {elapsed:.0f}s")


def test_c07_question_refinement_on_transitions(report):
    t0 = time.perf_counter()
    full, no_qt = run_protocol("question", seeds=(0, 1, 2))
    elapsed = time.perf_counter() - t0
    ok = full.mean >= no_qt.mean and elapsed < 1800
    assert report(7, "question-refinement ablation (transition accuracy)", ok,
                  f"full {full.mean:.3f} +- {full.spread:.3f} vs no-QT {no_qt.mean:.3f} +- {no_qt.spread:.3f} "
                  f"(higher is better), seeds {full.values} / {no_qt.values}, {elapsed:.0f}s")


def test_c08_scheduler_contract(report, monkeypatch):
    t0 = time.perf_counter()
    sched = PlateauScheduler(lr=1e-4, patience=5)
    sched.start(1.0)
    trace = [sched.step(1.0) for _ in range(12)]
    expected = [1e-4] * 4 + [5e-5] * 5 + [2.5e-5] * 3

    # the same contract observed through the training loop with a constant-loss stub
    def constant_loss(params, batch, config):
        anchor = params.head.out.bias
        loss = tt.add(tt.scale(tt.sum(anchor), 0.0), 0.7)
        return loss, np.zeros((len(batch.keys), 4))

    monkeypatch.setattr(train_mod, "forward_batch", constant_loss)
    cfg = tiny_config()
    ds = gen_synthetic("global-class", 8, 0, cfg)
    res = train(RunConfig(model=cfg, epochs=12, batch_size=8), ds.examples, len(ds.vocab), 4, val_examples=[])
    loop_trace = [r["lr"] for r in res.rows if r["split"] == "train" and r["epoch"] >= 1]
    elapsed = time.perf_counter() - t0
    ok = trace == expected and loop_trace == expected and elapsed < 1.0
    assert report(8, "scheduler contract", ok,
                  f"lr by epoch {trace} (unit), training loop matches={loop_trace == expected}, {elapsed:.2f}s")


def test_c09_loss_unit_cases(report):
    t0 = time.perf_counter()
    ce = cross_entropy(Tensor(np.full((1, 4), 0.25, dtype=np.float64)), [2]).item()
    hinge = hinge_loss(Tensor(np.array([0.0, 0.5, -3.0])), 0).item()
    rounding = count_answer([3.5, 2.4]).tolist()
    elapsed = time.perf_counter() - t0
    ok = abs(ce - math.log(4)) <= 1e-9 and abs(hinge - 0.75) <= 1e-9 and rounding == [4, 2] and elapsed < 1.0
    assert report(9, "loss unit cases", ok,
                  f"CE(uniform 4) - ln4 = {ce - math.log(4):.1e}, hinge = {hinge}, rounding 3.5,2.4 -> {rounding}")


def test_c10_determinism(report, tmp_path):
    cfg = tiny_config()
    ds = gen_synthetic("scale-count", 40, 0, cfg)
    run = RunConfig(model=cfg, batch_size=8, epochs=4, lr=1e-3, seed=5)
    t0 = time.perf_counter()
    fixed_clock = lambda: 0.0
    for name in ("a", "b"):
        train(run, ds.examples, len(ds.vocab), None, tmp_path / name, clock=fixed_clock)
    for name in ("c", "d"):
        train(run, ds.examples, len(ds.vocab), None, tmp_path / name)
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("best.ckpt", "last.ckpt", "metrics.csv", "batches.log")}
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    wall_clock_runs = (strip(read_metrics(tmp_path / "c" / "metrics.csv"))
                       == strip(read_metrics(tmp_path / "a" / "metrics.csv"))
                       and (tmp_path / "c" / "last.ckpt").read_bytes() == (tmp_path / "a" / "last.ckpt").read_bytes())
    elapsed = time.perf_counter() - t0
    ok = all(same.values()) and wall_clock_runs and elapsed < 300
    assert report(10, "determinism", ok,
                  f"byte-identical {same}; real-clock runs equal apart from the seconds column: {wall_clock_runs}, "
                  f"{elapsed:.0f}s")
