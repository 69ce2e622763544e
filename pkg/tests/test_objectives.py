from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import model_gradient_ok, random_moe_instance
from regionmoe.errors import StratificationError
from regionmoe.moe import GATE_MODES
from regionmoe.nn import stable_softmax
from regionmoe.objectives import (
    LossConfig,
    class_weights_from_counts,
    diversity_grad,
    diversity_penalty,
    gate_entropy,
    total_loss,
    weighted_ce,
)

# frozen from exact rational evaluation of sum(counts) / (C * count_c)
TABLE1_WEIGHTS = (0.8006279434850864, 0.9156193895870736, 1.5178571428571428)


def test_class_weights():
    assert class_weights_from_counts([10, 10, 10]).tolist() == [1.0, 1.0, 1.0]
    assert np.allclose(class_weights_from_counts([637, 557, 336]), TABLE1_WEIGHTS, rtol=0, atol=1e-15)
    assert np.allclose(class_weights_from_counts([1, 99]), [50.0, 0.5050505050505051], rtol=0, atol=1e-14)
    with pytest.raises(StratificationError):
        class_weights_from_counts([5, 0, 3])


def test_weighted_ce_examples():
    assert weighted_ce([0.0, 1.0, 0.0], 1, [1, 1, 1])[0] == 0.0
    assert weighted_ce([1 / 3] * 3, 0, [1, 1, 1])[0] == pytest.approx(math.log(3), abs=1e-15)
    assert weighted_ce([0.7, 0.2, 0.1], 1, [1, 2, 1])[0] == pytest.approx(3.2188758248682, abs=1e-12)


def test_weighted_ce_clamps_zero_probability():
    assert weighted_ce([1.0, 0.0], 1, [1, 1])[0] == pytest.approx(-math.log(1e-12))


def test_entropy_examples():
    assert gate_entropy([0.0, 1.0, 0.0])[0] == 0.0
    assert gate_entropy([0.25] * 4)[0] == pytest.approx(math.log(4), abs=1e-15)
    assert gate_entropy([0.5, 0.5])[0] == pytest.approx(0.6931471805599453, abs=1e-15)


def test_diversity_examples():
    both = np.array([[1.0, 2.0, 4.0], [1.0, 2.0, 4.0]])
    assert diversity_penalty(both, [True, True])[0] == pytest.approx(1.0, abs=1e-15)
    orth = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, -2.0]])
    assert diversity_penalty(orth, [True, True])[0] == pytest.approx(0.0, abs=1e-15)


def _naive_diversity(h, active):
    rows = [np.asarray(r) - np.mean(r) for r, a in zip(h, active) if a]
    pairs, total = 0, 0.0
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            pairs += 1
            ni, nj = math.sqrt(sum(v * v for v in rows[i])), math.sqrt(sum(v * v for v in rows[j]))
            if ni < 1e-12 or nj < 1e-12:
                continue
            c = sum(a * b for a, b in zip(rows[i], rows[j])) / (ni * nj)
            total += c * c
    return total / pairs if pairs else 0.0


def test_diversity_matches_naive_pairwise():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h = rng.normal(size=(3, 3))
        assert abs(diversity_penalty(h, [True] * 3)[0] - _naive_diversity(h, [True] * 3)) <= 1e-12
    h = rng.normal(size=(6, 4))
    h[2] = 7.0  # constant row has zero centred norm
    act = [True, True, True, False, True, True]
    assert abs(diversity_penalty(h, act)[0] - _naive_diversity(h, act)) <= 1e-12
    assert diversity_penalty(h[:1], [True])[0] == 0.0


def test_diversity_gradient_finite_differences():
    from conftest import central_diff, grad_close

    rng = np.random.default_rng(4)
    h = rng.normal(size=(1, 4, 3))
    act = np.array([[True, True, False, True]])
    numeric = central_diff(lambda: float(diversity_penalty(h, act)[0]), h)
    assert grad_close(diversity_grad(h, act), numeric)


def _fake_prediction(probs):
    return SimpleNamespace(class_probs=np.atleast_2d(probs))


def test_switched_off_penalties_give_mean_ce():
    rng = np.random.default_rng(0)
    model, X, avail, y = random_moe_instance(rng, "hier", n=6)
    pred = model.predict(X, avail)
    w = np.array([1.0, 2.0, 0.5])
    loss, _ = total_loss(pred, y, LossConfig(0.0, 0.0), w)
    assert loss.total == pytest.approx(weighted_ce(pred.class_probs, y, w).mean(), abs=1e-15)


def test_perfect_one_hot_prediction_has_zero_loss():
    from regionmoe.moe import GateOutput, Prediction

    g = np.array([[0.0, 1.0]])
    gate = GateOutput(g, g.copy(), [g.copy()], np.ones((1, 2), bool), np.ones((1, 2), bool))
    pred = Prediction(np.array([[1.0, 0.0, 0.0]]), np.array([[800.0, 0.0, 0.0]]), gate, np.zeros((1, 2, 3)))
    loss, _ = total_loss(pred, np.array([0]), LossConfig(), np.ones(3))
    assert (loss.total, loss.ce, loss.sparsity, loss.diversity) == (0.0, 0.0, 0.0, 0.0)


def test_breakdown_is_additive():
    rng = np.random.default_rng(2)
    model, X, avail, y = random_moe_instance(rng, "flat", n=5)
    cfg = LossConfig(0.3, 0.7)
    loss, _ = total_loss(model.predict(X, avail), y, cfg, np.ones(3))
    assert loss.total == loss.ce + 0.3 * loss.sparsity + 0.7 * loss.diversity


def test_baseline_predictions_carry_no_penalty():
    loss, grads = total_loss(_fake_prediction([[0.5, 0.25, 0.25]]), np.array([0]), LossConfig(), np.ones(3))
    assert loss.sparsity == loss.diversity == 0.0 and grads.gate is None


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        LossConfig(lambda_sparsity=-1.0)
    with pytest.raises(ValueError):
        LossConfig(class_weighting="inverse")
    assert LossConfig(class_weighting="none").weights_for(np.array([0, 0, 1]), 3).tolist() == [1.0, 1.0, 1.0]


@pytest.mark.parametrize("lam", [(0.5, 0.0), (0.0, 0.5), (0.01, 0.01)])
@pytest.mark.parametrize("mode", GATE_MODES)
def test_total_loss_gradients_each_term(mode, lam):
    rng = np.random.default_rng(sum(map(ord, mode)) + int(lam[0] * 10))
    model, X, avail, y = random_moe_instance(rng, mode, n=4, top_k_prob=0.0)
    assert model_gradient_ok(model, X, avail, y, LossConfig(*lam), np.array([0.8, 1.1, 1.4]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_penalty_ranges(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 8))
    g = stable_softmax(rng.normal(size=N) * 3)
    g[rng.random(N) < 0.3] = 0.0
    if g.sum() == 0:
        g[0] = 1.0
    g /= g.sum()
    H = gate_entropy(g)[0]
    assert -1e-15 <= H <= math.log(np.count_nonzero(g)) + 1e-12
    h = rng.normal(size=(N, 3))
    D = diversity_penalty(h, rng.random(N) < 0.8)[0]
    assert 0.0 <= D <= 1.0 + 1e-12
    p = stable_softmax(rng.normal(size=3))
    assert weighted_ce(p, int(rng.integers(3)), [1, 1, 1])[0] >= 0.0
