import itertools
import math

import numpy as np
import pytest

from faith import tensor as T
from faith.data import SamplingError
from faith.trainer import (Adam, TrainConfig, evaluate, init_model, rng_for, train, train_step)

SMALL = dict(n=2, k=3, q=4, p=2, gin_layers=2, gin_hidden=16, embed_dim=16, sampler_hidden=16,
             d_s=16, d_p=16, d_t=16)


def small_state(ds, **over):
    cfg = TrainConfig(**{**SMALL, **over})
    return init_model(cfg, ds.num_features, len(ds.base_classes))


def snapshot(state):
    return {k: v.data.copy() for k, v in state.params.items()}


def test_config_validation():
    with pytest.raises(ValueError, match="d_p must equal d_t"):
        TrainConfig(d_p=10, d_t=12)
    with pytest.raises(ValueError, match="sampler"):
        TrainConfig(sampler="greedy")
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"n": 2, "lr": 0.1})
    with pytest.raises(ValueError):
        TrainConfig(k=0)
    cfg = TrainConfig(n=3, seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_defaults_match_published_settings():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.dropout, cfg.alpha) == (1e-3, 0.5, 1.0)
    assert (cfg.p, cfg.q, cfg.steps, cfg.test_episodes) == (10, 10, 1000, 200)
    assert (cfg.gin_layers, cfg.embed_dim, cfg.d_s, cfg.d_p, cfg.d_t) == (5, 128, 300, 300, 300)


def test_named_streams_are_independent():
    a = rng_for(0, "episodes").random(4)
    assert not np.array_equal(a, rng_for(0, "dropout").random(4))
    assert np.array_equal(a, rng_for(0, "episodes").random(4))
    assert not np.array_equal(rng_for(0, "eval", 1).random(), rng_for(0, "eval", 2).random())


def test_adam_first_step_is_signed_lr():
    p = T.parameter(np.array([0.5, -2.0, 3.0]))
    opt = Adam(lr=0.01)
    g = np.array([3.0, -1e-3, 250.0])
    p.grad = g.copy()
    opt.step({"p": p})
    np.testing.assert_allclose(p.data - np.array([0.5, -2.0, 3.0]), -0.01 * np.sign(g), rtol=1e-5)
    for _ in range(5):
        p.grad = g.copy()
        before = p.data.copy()
        opt.step({"p": p})
        np.testing.assert_allclose(p.data - before, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_skips_missing_grads():
    p = T.parameter(np.ones(2))
    Adam().step({"p": p})
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_zero_learning_rate_leaves_params_untouched(motif_dataset):
    state = small_state(motif_dataset, learning_rate=0.0)
    before = snapshot(state)
    train(state, motif_dataset, steps=3)
    for k, v in before.items():
        assert np.array_equal(v, state.params[k].data), k


def test_training_is_deterministic(motif_dataset):
    runs = []
    for _ in range(2):
        state = small_state(motif_dataset, seed=5)
        runs.append([r["total_loss"] for r in train(state, motif_dataset, steps=10)])
    assert runs[0] == runs[1]


def test_step_report_fields(motif_dataset):
    state = small_state(motif_dataset)
    rep = train_step(state, motif_dataset, rng_for(0, "episodes"))
    assert set(rep) == {"total_loss", "class_loss", "sample_loss", "train_acc"}
    assert math.isclose(rep["total_loss"], rep["class_loss"] + rep["sample_loss"], rel_tol=1e-12)
    assert all(p.grad is None for p in state.params.values())


@pytest.mark.parametrize("sampler,hierarchy,classifier",
                         list(itertools.product(["loss", "random"], ["on", "off"],
                                                ["task", "euclidean"])))
def test_every_ablation_trains(motif_dataset, sampler, hierarchy, classifier):
    state = small_state(motif_dataset, sampler=sampler, hierarchy=hierarchy, classifier=classifier)
    reps = train(state, motif_dataset, steps=10)
    assert len(reps) == 10 and all(np.isfinite(r["total_loss"]) for r in reps)
    if sampler == "random":
        assert all(r["sample_loss"] == 0.0 for r in reps)
        assert not any(k.startswith("sampler.") for k in state.params)
    if hierarchy == "off":
        assert not any(k.startswith("hier.") for k in state.params)
    assert ("classifier.w" in state.params) == (classifier == "task")


def test_sampling_errors_name_the_step(motif_dataset):
    state = small_state(motif_dataset, n=5)
    with pytest.raises(SamplingError, match="step 1"):
        train(state, motif_dataset, steps=1)


def test_evaluate_is_deterministic(motif_dataset):
    state = small_state(motif_dataset)
    a = evaluate(state, motif_dataset, episodes=5, seed=3)
    b = evaluate(state, motif_dataset, episodes=5, seed=3)
    assert a == b and len(a["episodes"]) == 5
    # any single episode can be recomputed on its own
    assert evaluate(state, motif_dataset, episodes=1, seed=3)["episodes"][0] == a["episodes"][0]


def test_constant_predictions_score_half(motif_dataset):
    state = small_state(motif_dataset, q=10)
    state.params["classifier.w"].data[...] = 0.0  # every score 0 -> argmax is slot 0
    res = evaluate(state, motif_dataset, episodes=10, seed=0)
    assert res["episodes"] == [0.5] * 10


def test_untrained_model_is_at_chance(motif_dataset):
    state = small_state(motif_dataset, q=10)
    res = evaluate(state, motif_dataset, episodes=200, seed=1)
    # sd of a mean of 200 episodes, each the mean of 10 Bernoulli(0.5) queries
    sigma = math.sqrt(0.25 / 10 / 200)
    assert abs(res["mean_accuracy"] - 0.5) < 3 * max(sigma, res["std_accuracy"] / math.sqrt(200))


def test_class_loss_falls_during_training(motif_dataset):
    state = small_state(motif_dataset, k=5, q=10, p=10)
    losses = [r["class_loss"] for r in train(state, motif_dataset, steps=300)]
    assert np.mean(losses[200:300]) < np.mean(losses[:100])
