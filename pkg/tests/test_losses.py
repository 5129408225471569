import math

import numpy as np
import pytest

from protuberseg.losses import (
    DICE_GUARD,
    LossConfig,
    ce_loss,
    combined_loss,
    dice_loss,
    step1_loss,
    step2_loss,
    step3_loss,
)
from protuberseg.tensornet import Tensor, sigmoid, tsum, mul

from gradcheck import gradcheck


# ---------------------------------------------------------------------------
# scalar-loop oracles

def dice_oracle(pred, target, guard=DICE_GUARD, squared=True):
    """Naive per-channel loop evaluation of the dice loss."""
    total = 0.0
    n_ch = pred.shape[1]
    for c in range(n_ch):
        inter = sp = st = 0.0
        for p, t in zip(pred[:, c].ravel(), target[:, c].ravel()):
            inter += p * t
            sp += p * p if squared else p
            st += t * t if squared else t
        total += 1.0 - (2.0 * inter + guard) / (sp + st + guard)
    return total / n_ch


def ce_oracle(pred, target, eps=0.0):
    acc = 0.0
    for p, t in zip(pred.ravel(), target.ravel()):
        ts = t * (1.0 - eps) + eps / 2.0
        acc += -(ts * math.log(p) + (1.0 - ts) * math.log(1.0 - p))
    return acc / pred.size


def random_pair(rng, shape=(1, 1, 4, 4, 4)):
    pred = rng.uniform(0.02, 0.98, shape)
    target = (rng.random(shape) < 0.5).astype(np.float64)
    return pred, target


# ---------------------------------------------------------------------------
# dice

def test_dice_perfect_binary_prediction():
    rng = np.random.default_rng(0)
    t = (rng.random((1, 1, 4, 4, 4)) < 0.5).astype(np.float64)
    loss = dice_loss(Tensor(t), Tensor(t))
    assert loss.item() < 1e-6


def test_dice_disjoint_prediction():
    t = np.zeros((1, 1, 4, 4, 4))
    t[0, 0, :2] = 1.0
    p = 1.0 - t
    loss = dice_loss(Tensor(p), Tensor(t))
    assert loss.item() >= 1.0 - 1e-6


def test_dice_uniform_half_closed_form():
    n = 4 * 4 * 4
    t = np.zeros((1, 1, 4, 4, 4))
    t.ravel()[: n // 2] = 1.0
    p = np.full_like(t, 0.5)
    loss = dice_loss(Tensor(p), Tensor(t))
    inter, sp, st = 0.5 * (n // 2), 0.25 * n, float(n // 2)
    expected = 1.0 - (2 * inter + DICE_GUARD) / (sp + st + DICE_GUARD)
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_dice_matches_oracle_random():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, t = random_pair(rng, (2, 2, 3, 3, 3))
        got = dice_loss(Tensor(p), Tensor(t)).item()
        assert got == pytest.approx(dice_oracle(p, t), abs=1e-6)
        got_plain = dice_loss(Tensor(p), Tensor(t), squared=False).item()
        assert got_plain == pytest.approx(dice_oracle(p, t, squared=False),
                                          abs=1e-6)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(Tensor(np.zeros((1, 1, 2, 2, 2))),
                  Tensor(np.zeros((1, 1, 2, 2, 4))))


# ---------------------------------------------------------------------------
# cross-entropy

def test_ce_perfect_no_smoothing():
    # a fully saturated prediction bottoms out at the probability floor
    ones = np.full((1, 1, 2, 2, 2), 1.0 - 1e-12)
    t = np.ones_like(ones)
    assert ce_loss(Tensor(ones), Tensor(t), 0.0).item() < 1e-6


def test_ce_smoothed_optimum_at_0995():
    # with eps=0.01 and target 1, gradient w.r.t. the logit vanishes at 0.995
    logit = Tensor(np.full((1, 1, 1, 1, 1), math.log(0.995 / 0.005)),
                   requires_grad=True)
    pred = sigmoid(logit)
    loss = ce_loss(pred, Tensor(np.ones((1, 1, 1, 1, 1))), 0.01)
    loss.backward()
    assert abs(logit.grad[0, 0, 0, 0, 0]) < 1e-12


def test_ce_matches_oracle_random():
    rng = np.random.default_rng(2)
    for eps in (0.0, 0.01, 0.1):
        p, t = random_pair(rng)
        got = ce_loss(Tensor(p), Tensor(t), eps).item()
        assert got == pytest.approx(ce_oracle(p, t, eps), abs=1e-6)


def test_ce_rejects_bad_smoothing():
    p, t = random_pair(np.random.default_rng(3))
    with pytest.raises(ValueError):
        ce_loss(Tensor(p), Tensor(t), 0.7)


# ---------------------------------------------------------------------------
# step objectives

def step1_oracle(pred, target):
    return 0.5 * dice_oracle(pred, target) + 0.5 * ce_oracle(pred, target)


def test_step1_perfect_and_wrong():
    rng = np.random.default_rng(4)
    t = (rng.random((1, 2, 4, 4, 4)) < 0.5).astype(np.float64)
    near_t = np.clip(t, 1e-9, 1.0 - 1e-9)
    assert step1_loss(Tensor(near_t), Tensor(t)).item() < 1e-4
    wrong = np.clip(1.0 - t, 1e-9, 1.0 - 1e-9)
    assert step1_loss(Tensor(wrong), Tensor(t)).item() > 1.0


def test_step1_matches_oracle():
    rng = np.random.default_rng(5)
    p, t = random_pair(rng, (1, 2, 3, 3, 3))
    got = step1_loss(Tensor(p), Tensor(t)).item()
    assert got == pytest.approx(step1_oracle(p, t), abs=1e-6)


def test_step2_is_smoothed_ce():
    rng = np.random.default_rng(6)
    p, t = random_pair(rng)
    got = step2_loss(Tensor(p), Tensor(t)).item()
    assert got == pytest.approx(ce_oracle(p, t, 0.01), abs=1e-6)


def test_step3_supervision_active():
    rng = np.random.default_rng(7)
    t = (rng.random((1, 2, 4, 4, 4)) < 0.5).astype(np.float64)
    tum = t[:, 1:2]
    perfect_fusion = np.clip(tum, 1e-9, 1.0 - 1e-9)
    perfect_base = np.clip(t, 1e-9, 1.0 - 1e-9)
    near_zero = step3_loss(Tensor(perfect_fusion), Tensor(perfect_base),
                           Tensor(t)).item()
    assert near_zero < 1e-3
    wrong_base = np.clip(1.0 - t, 1e-6, 1.0 - 1e-6)
    still_penalized = step3_loss(Tensor(perfect_fusion), Tensor(wrong_base),
                                 Tensor(t)).item()
    assert still_penalized > 0.5  # intermediate supervision is active


def test_step3_matches_oracle():
    rng = np.random.default_rng(8)
    base_p, t = random_pair(rng, (1, 2, 3, 3, 3))
    fus_p = rng.uniform(0.02, 0.98, (1, 1, 3, 3, 3))
    got = step3_loss(Tensor(fus_p), Tensor(base_p), Tensor(t)).item()
    want = step1_oracle(fus_p, t[:, 1:2]) + step1_oracle(base_p, t)
    assert got == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# properties

def test_losses_decrease_toward_target():
    rng = np.random.default_rng(9)
    for _ in range(5):
        p, t = random_pair(rng)
        t_soft = np.clip(t, 0.01, 0.99)
        alphas = np.linspace(0.0, 1.0, 6)
        dvals = [dice_loss(Tensor(p + a * (t_soft - p)), Tensor(t)).item()
                 for a in alphas]
        cvals = [ce_loss(Tensor(p + a * (t_soft - p)), Tensor(t)).item()
                 for a in alphas]
        assert all(x >= y - 1e-12 for x, y in zip(dvals, dvals[1:]))
        assert all(x >= y - 1e-12 for x, y in zip(cvals, cvals[1:]))


def test_loss_gradients():
    rng = np.random.default_rng(10)
    p = Tensor(rng.uniform(0.05, 0.95, (1, 2, 3, 3, 3)), requires_grad=True)
    t = Tensor((rng.random((1, 2, 3, 3, 3)) < 0.5).astype(np.float64))
    gradcheck(lambda p: dice_loss(p, t), [p], rng)
    gradcheck(lambda p: ce_loss(p, t, 0.01), [p], rng)
    gradcheck(lambda p: step1_loss(p, t), [p], rng)
    fus = Tensor(rng.uniform(0.05, 0.95, (1, 1, 3, 3, 3)),
                 requires_grad=True)
    gradcheck(lambda f, b: step3_loss(f, b, t), [fus, p], rng)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(dice_weight=-1.0)
    with pytest.raises(ValueError):
        LossConfig(smoothing=0.6)
