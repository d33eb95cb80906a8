import math

import numpy as np
import pytest
from scipy.stats import chisquare

from gcote.data import ContextIndex, FilterIndex
from gcote.numeric import check_gradients
from gcote.ote import OTEModel, gram_schmidt
from gcote.train import (
    AdamState,
    NegativeBatch,
    TrainConfig,
    TrainData,
    TrainingDivergedError,
    adam_step,
    adversarial_weights,
    batch_objective,
    corrupt,
    guard_orientation,
    loss,
    sample_negatives,
    self_adversarial_loss,
    stream,
    train,
    train_step,
)

from conftest import random_store, toy_model


def _data(n_ent=10, n_rel=3, n=40, seed=3):
    store = random_store(n_ent, n_rel, n, seed=seed)
    return TrainData(store, None, FilterIndex([store]), ContextIndex(store, n_ent))


def test_corrupt_two_entities_always_flips():
    out = corrupt(np.array([0, 1, 0]), 50, 2, np.random.default_rng(0))
    assert np.array_equal(out, np.tile([[1], [0], [1]], (1, 50)))


def test_corrupt_needs_two_entities():
    with pytest.raises(ValueError):
        corrupt([0], 1, 1, np.random.default_rng(0))


def test_corrupt_is_uniform_over_the_rest():
    draws = corrupt([37], 100_000, 100, np.random.default_rng(5))[0]
    assert not np.any(draws == 37)
    counts = np.bincount(draws, minlength=100)
    others = np.delete(counts, 37)
    assert chisquare(others).pvalue > 0.01


def test_sample_negatives_modes():
    negs = sample_negatives((1, 2, 3), 5, "head", 10, np.random.default_rng(0))
    assert negs.triples.shape == (5, 3)
    assert np.all(negs.triples[:, 1:] == [2, 3]) and not np.any(negs.entities == 1)
    with pytest.raises(ValueError):
        sample_negatives((1, 2, 3), 5, "middle", 10, np.random.default_rng(0))


def test_adversarial_weights_cases():
    assert np.allclose(adversarial_weights(np.array([1.0, 5.0, 9.0]), 0.0), 1 / 3)
    assert np.allclose(adversarial_weights(np.array([1.0, 3.0]), 1.0), [0.8808, 0.1192], atol=1e-4)
    d = np.array([0.3, 2.0, 4.5])
    assert np.allclose(adversarial_weights(d, 0.7), adversarial_weights(d + 100.0, 0.7), atol=1e-12)


def test_loss_at_margin_is_two_log_two():
    negs = NegativeBatch((0, 0, 1), "tail", np.array([2, 3, 4]), scores=np.full(3, 6.0))
    assert loss(6.0, negs, gamma=6.0, alpha=1.0) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_loss_vanishes_when_well_separated():
    value, _, _ = self_adversarial_loss(0.0, np.full(4, 200.0), gamma=100.0, alpha=1.0)
    assert 0 <= value < 1e-40


def test_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    pos, neg = 4.2, rng.uniform(2, 10, 6)
    value, dpos, dneg = self_adversarial_loss(pos, neg, 6.0, 0.5)
    h = 1e-6

    def f(p, n):
        return self_adversarial_loss(p, n, 6.0, 0.5)[0]

    assert dpos == pytest.approx((f(pos + h, neg) - f(pos - h, neg)) / (2 * h), rel=1e-6)
    # the weights are constants in the gradient, so compare against a frozen-weight copy
    w = adversarial_weights(neg, 0.5, 6.0)
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        lp = -np.sum(w * np.log(1 / (1 + np.exp(-(neg + e - 6.0)))))
        lm = -np.sum(w * np.log(1 / (1 + np.exp(-(neg - e - 6.0)))))
        assert dneg[j] == pytest.approx((lp - lm) / (2 * h), rel=1e-6)


def test_adam_zero_gradient_is_no_op():
    p = {"x": np.array([1.0, -2.0])}
    adam_step(p, {"x": np.zeros(2)}, AdamState(), lr=0.1)
    assert p["x"].tolist() == [1.0, -2.0]


def test_adam_constant_gradient_steps_by_lr():
    p = {"x": np.array([0.0])}
    state = AdamState()
    for _ in range(5):
        before = p["x"].copy()
        adam_step(p, {"x": np.array([3.0])}, state, lr=0.01)
        assert before[0] - p["x"][0] == pytest.approx(0.01, rel=1e-6)


def test_adam_matches_hand_stepped_oracle():
    x = np.array([1.5])
    p = {"x": x.copy()}
    state = AdamState()
    xs, m, v = 1.5, 0.0, 0.0
    for t in range(1, 11):
        g = 2 * (xs - 0.5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        xs -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step(p, {"x": 2 * (p["x"] - 0.5)}, state, lr=0.05)
    assert p["x"][0] == pytest.approx(xs, abs=1e-10)
    assert state.t == 10


@pytest.mark.parametrize("objective", ["pretrain", "all"])
def test_batch_objective_gradient(objective):
    model = toy_model()
    data = _data()
    rng = np.random.default_rng(4)
    pos = data.train.array[:5]
    nt = corrupt(pos[:, 2], 4, 10, rng)
    nh = corrupt(pos[:, 0], 4, 10, rng)

    # alpha = 0 makes the weights truly constant, matching the stop-gradient convention
    def fn(p):
        return batch_objective(OTEModel(model.cfg, p), pos, nh, nt, 6.0, 0.0, objective, data.context)

    report = check_gradients(fn, model.params, max_coords=120)
    assert report.passed, str(report)


def test_stream_is_keyed_by_name_and_step():
    a = stream(0, "batches", 3).random(4)
    assert np.array_equal(a, stream(0, "batches", 3).random(4))
    assert not np.array_equal(a, stream(0, "batches", 4).random(4))
    assert not np.array_equal(a, stream(0, "negatives", 3).random(4))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0)
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")
    assert TrainConfig(stage="finetune").objective == "all"


def _cfg(**kw):
    base = dict(lr=0.02, gamma=4.0, n_neg=8, batch_size=16, max_steps=60, log_interval=0, det_check_interval=20)
    base.update(kw)
    return TrainConfig(**base)


def test_toy_training_reduces_loss():
    result = train(toy_model(dtype=np.float32), _data(), _cfg())
    assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])


def test_seeded_training_is_deterministic():
    a = train(toy_model(dtype=np.float32), _data(), _cfg(max_steps=15))
    b = train(toy_model(dtype=np.float32), _data(), _cfg(max_steps=15))
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_resumed_run_equals_unbroken(stage):
    data = _data()
    whole = train(toy_model(), data, _cfg(max_steps=12, stage=stage))
    first = train(toy_model(), data, _cfg(max_steps=5, stage=stage))
    rest = train(first.model, data, _cfg(max_steps=12, stage=stage), state=first.optimizer, start_step=5)
    assert rest.step == 12
    for k in whole.model.params:
        assert np.array_equal(whole.model.params[k], rest.model.params[k])


def test_orientation_guard_resets_crossing_matrix():
    model = toy_model()
    before = model.params["rel_mat"].copy()
    state = AdamState(m={"rel_mat": np.ones_like(before)}, v={"rel_mat": np.ones_like(before)})
    model.params["rel_mat"][1, 0, :, 0] *= -1
    flipped = guard_orientation(model, before, state)
    assert flipped == [(1, 0)]
    assert np.allclose(model.params["rel_mat"][1, 0], gram_schmidt(before[1, 0]), atol=1e-12)
    assert np.all(state.m["rel_mat"][1, 0] == 0) and np.all(state.v["rel_mat"][1, 1] == 1)


def test_nonfinite_loss_raises():
    model = toy_model()
    model.params["entity"][:] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(TrainingDivergedError):
        train_step(model, _data(), _cfg(), AdamState(), 0)
