import math

import numpy as np
import pytest

from tpt import tensor as tt
from tpt.config import tiny_config
from tpt.heads import (CountHead, count_answer, count_forward, cross_entropy, hinge_loss, init_head, mse_loss,
                       multi_choice_forward, open_ended_forward, predict, regime_of, round_half_away)
from tpt.tensor import Tensor

CFG = tiny_config(precision="float64", d_model=8, heads=2, d_ff=16)


def test_head_shapes(rng):
    o = Tensor(rng.normal(size=(3, 16)))
    probs = open_ended_forward(init_head(rng, CFG, "open-ended", 5), o)
    assert probs.shape == (3, 5)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0)
    raw, ans = count_forward(init_head(rng, CFG, "count"), o)
    assert raw.shape == (3,) and ans.dtype == np.int64
    mc = init_head(rng, CFG, "multi-choice")
    assert multi_choice_forward(mc, o, Tensor(rng.normal(size=(3, 4, 16)))).shape == (3, 4)
    listed = multi_choice_forward(mc, o, [Tensor(rng.normal(size=(3, 16))) for _ in range(2)])
    assert listed.shape == (3, 2)
    with pytest.raises(ValueError):
        multi_choice_forward(mc, o, Tensor(rng.normal(size=(3, 1, 16))))
    with pytest.raises(ValueError):
        init_head(rng, CFG, "open-ended", 1)
    assert regime_of(mc) == "multi-choice"


def test_cross_entropy_values():
    uniform = Tensor(np.full((2, 4), 0.25))
    assert cross_entropy(uniform, [0, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    hard = Tensor(np.array([[0.0, 1.0]]))
    assert cross_entropy(hard, [0]).item() == pytest.approx(-math.log(1e-12))


def test_hinge_mean_and_sum():
    s = Tensor(np.array([0.0, 0.5, -3.0]))
    assert hinge_loss(s, 0).item() == pytest.approx(0.75, abs=1e-12)
    assert hinge_loss(s, 0, "sum").item() == pytest.approx(1.5, abs=1e-12)
    assert hinge_loss(Tensor(np.array([[5.0, 0.0, 1.0]])), [0]).item() == 0.0


def test_rounding_and_clamping():
    assert round_half_away([3.5, 2.4, -0.5, 2.5]).tolist() == [4, 2, -1, 3]
    assert count_answer([-3.2, 4.5, 12.0], 0, 10).tolist() == [0, 5, 10]
    with pytest.raises(ValueError):
        CountHead(None, None, count_min=3, count_max=1)


def test_mse_loss():
    assert mse_loss(Tensor(np.array([1.0, 3.0])), [0, 5]).item() == pytest.approx(2.5)


def test_argmax_ties_pick_lowest_index():
    assert predict("open-ended", np.array([[0.3, 0.3, 0.1]])).tolist() == [0]
    assert predict("multi-choice", np.array([[1.0, 2.0, 2.0]])).tolist() == [1]
    with pytest.raises(ValueError):
        predict("ranking", np.zeros(2))


@pytest.mark.parametrize("regime", ["open-ended", "count", "multi-choice"])
def test_head_gradients(rng, regime):
    head = init_head(rng, CFG, regime, 4)
    o = tt.parameter(rng.normal(size=(2, 16)), np.float64)
    if regime == "open-ended":
        f = lambda: cross_entropy(open_ended_forward(head, o), [1, 3])
    elif regime == "count":
        f = lambda: mse_loss(count_forward(head, o)[0], [2, 7])
    else:
        cands = tt.parameter(rng.normal(size=(2, 3, 16)), np.float64)
        f = lambda: hinge_loss(multi_choice_forward(head, o, cands), [0, 2])
    named = {"o": o, "hidden": head.hidden.weight, "out": head.out.weight}
    if regime != "multi-choice":
        named["b"] = head.out.bias
    assert tt.grad_check(f, named) < 1e-4
    if regime == "multi-choice":
        # a shift shared by every candidate score cancels inside the margins
        assert head.out.bias.grad[0] == 0.0
