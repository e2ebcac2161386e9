"""Training loop: optimizer semantics, determinism, resume, loss skipping."""

import json

import numpy as np
import pytest

import vlpert.training as training_module
from vlpert.losses import LossWeights
from vlpert.synthetic import generate_corpus
from vlpert.tensor import Tensor
from vlpert.training import (
    TrainConfig,
    TrainingDivergedError,
    load_state,
    sgd_step,
    train,
)


def _params(**values):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in values.items()}


def test_sgd_plain_step():
    params = _params(p=[1.0])
    grads = {"p": np.array([2.0])}
    buffers = {"p": np.zeros(1)}
    new_params, _ = sgd_step(params, grads, buffers, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert np.allclose(new_params["p"].data, [0.8], atol=1e-15)


def test_sgd_zero_grad_is_fixed_point():
    params = _params(p=[3.0, -2.0])
    grads = {"p": np.zeros(2)}
    buffers = {"p": np.zeros(2)}
    new_params, new_buffers = sgd_step(params, grads, buffers, lr=0.5, momentum=0.9, weight_decay=0.0)
    assert np.array_equal(new_params["p"].data, [3.0, -2.0])
    assert np.array_equal(new_buffers["p"], [0.0, 0.0])


def test_sgd_momentum_two_step_unroll():
    # hand oracle: buf1 = g, p1 = p0 - lr g; buf2 = 0.9 g + g, p2 = p1 - lr (1.9 g)
    g = 0.7
    lr = 0.01
    params = _params(p=[1.0])
    buffers = {"p": np.zeros(1)}
    params, buffers = sgd_step(params, {"p": np.array([g])}, buffers, lr, 0.9, 0.0)
    assert np.allclose(params["p"].data, [1.0 - lr * g], atol=1e-15)
    params, buffers = sgd_step(params, {"p": np.array([g])}, buffers, lr, 0.9, 0.0)
    assert np.allclose(params["p"].data, [1.0 - lr * g - lr * 1.9 * g], atol=1e-15)


def test_sgd_weight_decay_coupled():
    params = _params(p=[2.0])
    grads = {"p": np.array([0.0])}
    buffers = {"p": np.zeros(1)}
    new_params, new_buffers = sgd_step(params, grads, buffers, lr=0.1, momentum=0.0, weight_decay=0.5)
    # buffer = 0 + 0 + 0.5 * 2 = 1; param = 2 - 0.1
    assert np.allclose(new_buffers["p"], [1.0], atol=1e-15)
    assert np.allclose(new_params["p"].data, [1.9], atol=1e-15)


def test_sgd_shape_mismatch():
    params = _params(p=[1.0, 2.0])
    with pytest.raises(ValueError, match="shape mismatch"):
        sgd_step(params, {"p": np.zeros(3)}, {"p": np.zeros(2)}, 0.1, 0.9, 0.0)


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_corpus(24, 32, seed=13)


def _tiny_config(**overrides):
    base = dict(epochs=2, batch_size=8, data_seed=5, init_seed=6, pert_seed=7)
    base.update(overrides)
    return TrainConfig(**base)


def test_training_deterministic(tiny_corpus):
    a = train(_tiny_config(), tiny_corpus)
    b = train(_tiny_config(), tiny_corpus)
    assert a.metrics == b.metrics
    for name in a.state.params:
        assert np.array_equal(a.state.params[name].data, b.state.params[name].data)


def test_metrics_rows_have_contract_fields(tiny_corpus, tmp_path):
    path = tmp_path / "metrics.jsonl"
    result = train(_tiny_config(), tiny_corpus, metrics_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert rows == result.metrics
    for row in rows:
        assert set(row) == {"epoch", "step", "global", "local", "pert", "total"}
    assert [r["step"] for r in rows] == list(range(len(rows)))


def test_zero_weights_skip_local_and_pert(tiny_corpus, monkeypatch):
    baseline = train(_tiny_config(weights=LossWeights(alpha=0.0, beta=0.0)), tiny_corpus)

    def forbidden(*args, **kwargs):
        raise AssertionError("loss term should not be computed at zero weight")

    monkeypatch.setattr(training_module, "local_contrastive_loss", forbidden)
    monkeypatch.setattr(training_module, "perturbation_sensitivity_loss_batch", forbidden)
    monkeypatch.setattr(training_module, "generate_set", forbidden)
    skipped = train(_tiny_config(weights=LossWeights(alpha=0.0, beta=0.0)), tiny_corpus)

    assert skipped.metrics == baseline.metrics
    assert all(m["local"] == 0.0 and m["pert"] == 0.0 for m in skipped.metrics)
    assert all(m["total"] == m["global"] for m in skipped.metrics)


def test_checkpoint_resume_matches_uninterrupted(tiny_corpus, tmp_path):
    cfg = _tiny_config(epochs=4, checkpoint_every=2)
    full = train(cfg, tiny_corpus, checkpoint_dir=tmp_path)
    model, state = load_state(tmp_path / "ckpt_epoch_0002.json")
    resumed = train(cfg, tiny_corpus, resume_from=state, resume_model=model)
    assert resumed.metrics == [m for m in full.metrics if m["epoch"] > 2]
    for name in full.state.params:
        assert np.array_equal(resumed.state.params[name].data, full.state.params[name].data)
    for name in full.state.buffers:
        assert np.array_equal(resumed.state.buffers[name], full.state.buffers[name])


def test_final_checkpoint_written(tiny_corpus, tmp_path):
    train(_tiny_config(), tiny_corpus, checkpoint_dir=tmp_path)
    model, state = load_state(tmp_path / "final.json")
    assert state.epoch == 2
    assert set(state.buffers) == set(model.parameters())


def test_resume_requires_model(tiny_corpus, tmp_path):
    cfg = _tiny_config(checkpoint_every=1)
    full = train(cfg, tiny_corpus, checkpoint_dir=tmp_path)
    with pytest.raises(ValueError, match="model"):
        train(cfg, tiny_corpus, resume_from=full.state)


def test_non_finite_loss_aborts_with_component_name(tiny_corpus, monkeypatch):
    def poisoned(*args, **kwargs):
        return Tensor(float("nan"))

    monkeypatch.setattr(training_module, "global_contrastive_loss", poisoned)
    with pytest.raises(TrainingDivergedError, match="global"):
        train(_tiny_config(weights=LossWeights(alpha=0.0, beta=0.0)), tiny_corpus)


def test_corpus_validation(tiny_corpus):
    with pytest.raises(ValueError, match="batch size"):
        train(_tiny_config(batch_size=100), tiny_corpus)
    with pytest.raises(ValueError, match="empty"):
        train(_tiny_config(), [])


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.momentum, cfg.weight_decay) == (
        150,
        64,
        0.0015,
        0.9,
        5e-4,
    )
    assert (cfg.weights.alpha, cfg.weights.beta, cfg.weights.tau) == (0.1, 0.1, 0.07)


def test_detach_pert_negatives_changes_dynamics(tiny_corpus):
    attached = train(_tiny_config(weights=LossWeights(alpha=0.0, beta=0.5)), tiny_corpus)
    detached = train(
        _tiny_config(weights=LossWeights(alpha=0.0, beta=0.5), detach_pert_negatives=True),
        tiny_corpus,
    )
    assert attached.metrics[0]["pert"] == detached.metrics[0]["pert"]  # same first forward
    assert attached.metrics[-1] != detached.metrics[-1]  # different gradients afterwards
