import math

import numpy as np
import pytest

from conftest import tiny_model_config
from models.schemas import ModelConfig, ScheduleConfig, TrainConfig
from services import data_service, export_service, model_service, training_service
from services.errors import ConfigError, TrainingDivergedError
from services.tensor_service import Tape, Tensor, backward, constant


def test_label_smoothing_matches_worked_example():
    logits = constant([[2.0, 0.0, 0.0]])
    loss = training_service.label_smoothed_cross_entropy(logits, np.array([[1.0, 0.0, 0.0]]), 0.1).item()
    log_z = math.log(math.exp(2.0) + 2.0)
    expected = -(0.9 * (2.0 - log_z) + 2 * 0.05 * (0.0 - log_z))
    assert loss == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5, 0.9])
def test_uniform_logits_give_log_k(eps):
    targets = np.eye(7)[[0, 3, 6]]
    loss = training_service.label_smoothed_cross_entropy(constant(np.zeros((3, 7))), targets, eps)
    assert loss.item() == pytest.approx(math.log(7), abs=1e-12)


def test_smooth_targets_keep_row_sums():
    t = training_service.smooth_targets(np.eye(4), 0.2)
    np.testing.assert_allclose(t.sum(axis=1), 1.0)
    assert t[0, 0] == pytest.approx(0.8)


def test_label_smoothing_range_checked():
    with pytest.raises(ConfigError):
        training_service.label_smoothed_cross_entropy(constant([[0.0, 1.0]]), np.eye(2)[:1], 1.0)


def test_cross_entropy_gradient_is_softmax_minus_target():
    logits = Tensor([[1.0, 2.0, 0.5]], requires_grad=True)
    target = np.array([[0.0, 1.0, 0.0]])
    with Tape():
        loss = training_service.cross_entropy(logits, target)
    backward(loss)
    probs = np.exp(logits.values) / np.exp(logits.values).sum()
    np.testing.assert_allclose(logits.grad, probs - target, atol=1e-12)


def test_schedule_landmarks():
    cfg = ScheduleConfig(base_lr=5e-4, warmup_epochs=10, total_epochs=200, steps_per_epoch=1)
    lr = training_service.CosineWarmupSchedule(cfg)
    assert lr(0) == 0.0
    assert lr(5) == pytest.approx(2.5e-4)
    assert lr(10) == pytest.approx(5e-4)
    assert lr(105) == pytest.approx(2.5e-4)
    assert lr(200) == pytest.approx(0.0, abs=1e-20)
    assert lr(500) == pytest.approx(0.0, abs=1e-20)
    assert lr.total_steps == 200


def test_schedule_without_warmup_starts_at_base():
    cfg = ScheduleConfig(base_lr=1e-3, warmup_epochs=0, total_epochs=4, steps_per_epoch=3)
    assert training_service.cosine_warmup_lr(0, cfg) == pytest.approx(1e-3)


def test_adamw_first_step_moves_by_lr(tiny_config, rng):
    model = model_service.init_model_weights(tiny_config)
    before = {p.name: np.array(p.tensor.values) for p in model.params}
    with Tape():
        loss = training_service.cross_entropy(model_service.model_forward(rng.uniform(size=(2, 8, 8, 3)), model),
                                              np.eye(4)[[0, 1]])
    backward(loss)
    grads = {p.name: p.grad for p in model.params}
    state = training_service.OptimState(TrainConfig(weight_decay=0.0).optim())
    training_service.adamw_step(model, state, lr=1e-3)
    assert state.step == 1
    w = model.params["head.weight"].values
    mask = np.abs(grads["head.weight"]) > 1e-4
    expected = before["head.weight"] - 1e-3 * np.sign(grads["head.weight"])
    np.testing.assert_allclose(w[mask], expected[mask], atol=1e-6)


def test_weight_decay_shrinks_parameters_with_zero_gradient(tiny_config):
    model = model_service.init_model_weights(tiny_config)
    for param in model.params:
        param.tensor.grad = np.zeros(param.shape)
    before = np.array(model.params["embed.weight"].values)
    state = training_service.OptimState(TrainConfig(weight_decay=0.01).optim())
    training_service.adamw_step(model, state, lr=0.1)
    np.testing.assert_allclose(model.params["embed.weight"].values, before * (1 - 0.1 * 0.01), atol=1e-15)


def _tiny_run(tmp_path, name, seed=0, **overrides):
    cfg = tiny_model_config("e,s,g")
    train, test = data_service.synthetic_splits(4, 2, 8, seed=1)
    fields = dict(epochs=2, batch_size=8, warmup_epochs=1, augment=False, mixup_alpha=0.0, seed=seed)
    fields.update(overrides)
    model = model_service.init_model_weights(cfg, seed)
    rows = training_service.fit(model, train, test, TrainConfig(**fields),
                                checkpoint_path=tmp_path / f"{name}.mmac", report_path=tmp_path / f"{name}.csv")
    return model, rows


def _epoch_runner(model, cfg, dataset):
    state = training_service.OptimState(cfg.optim())
    schedule = training_service.CosineWarmupSchedule(cfg.schedule(math.ceil(len(dataset) / cfg.batch_size)))
    rng = np.random.default_rng(cfg.seed)

    def run(epoch):
        return training_service.train_epoch(model, dataset, cfg, state, schedule, rng, epoch)[0]
    return run


def test_zero_learning_rate_leaves_weights_untouched(tiny_config):
    model = model_service.init_model_weights(tiny_config, seed=2)
    before = {p.name: np.array(p.tensor.values) for p in model.params}
    train, _ = data_service.synthetic_splits(2, 1, 8, seed=1)
    cfg = TrainConfig(epochs=1, batch_size=4, base_lr=0.0, warmup_epochs=0, mixup_alpha=0.4, crop_pad=2)
    _epoch_runner(model, cfg, train)(0)
    for param in model.params:
        np.testing.assert_array_equal(param.tensor.values, before[param.name])


def test_tiny_dataset_loss_goes_down(tiny_config):
    model = model_service.init_model_weights(tiny_config, seed=0)
    train, _ = data_service.synthetic_splits(1, 1, 8, seed=1)
    assert len(train) == 4
    cfg = TrainConfig(epochs=50, batch_size=4, base_lr=5e-3, warmup_epochs=0, augment=False, mixup_alpha=0.0)
    run = _epoch_runner(model, cfg, train)
    losses = [run(epoch) for epoch in range(50)]
    assert all(math.isfinite(v) for v in losses)
    assert losses[-1] < losses[0] - 0.05


def test_fit_writes_report_and_checkpoint(tmp_path):
    _, rows = _tiny_run(tmp_path, "a")
    assert [r.epoch for r in rows] == [1, 2]
    assert (tmp_path / "a.mmac").exists()
    written = export_service.read_train_report(tmp_path / "a.csv")
    assert [r.eval_acc for r in written] == [r.eval_acc for r in rows]


def test_fit_is_bit_reproducible(tmp_path):
    model_a, rows_a = _tiny_run(tmp_path, "a", mixup_alpha=0.4, augment=True, crop_pad=2)
    model_b, rows_b = _tiny_run(tmp_path, "b", mixup_alpha=0.4, augment=True, crop_pad=2)
    assert [(r.train_loss, r.eval_loss, r.lr) for r in rows_a] == [(r.train_loss, r.eval_loss, r.lr) for r in rows_b]
    assert (tmp_path / "a.mmac").read_bytes() == (tmp_path / "b.mmac").read_bytes()


def test_fit_rejects_class_mismatch(tmp_path):
    cfg = tiny_model_config("e", num_classes=10)
    train, test = data_service.synthetic_splits(2, 1, 8, seed=1)
    with pytest.raises(ConfigError):
        training_service.fit(model_service.init_model_weights(cfg), train, test, TrainConfig(epochs=1))


def test_divergence_is_reported(tiny_config, monkeypatch):
    model = model_service.init_model_weights(tiny_config)
    train, _ = data_service.synthetic_splits(2, 1, 8, seed=1)
    monkeypatch.setattr(training_service, "label_smoothed_cross_entropy",
                        lambda logits, targets, eps: constant(np.nan))
    cfg = TrainConfig(epochs=1, batch_size=4, augment=False, mixup_alpha=0.0)
    state = training_service.OptimState(cfg.optim())
    schedule = training_service.CosineWarmupSchedule(cfg.schedule(2))
    with pytest.raises(TrainingDivergedError, match="epoch 0, batch 0"):
        training_service.train_epoch(model, train, cfg, state, schedule, np.random.default_rng(0))


def test_evaluate_counts_accuracy(tiny_config):
    model = model_service.init_model_weights(tiny_config)
    _, test = data_service.synthetic_splits(2, 3, 8, seed=1)
    loss, acc = training_service.evaluate(model, test, batch_size=5)
    assert loss > 0
    assert acc in {i / 12 for i in range(13)}


def _desk_config(manifolds: str) -> ModelConfig:
    return ModelConfig(image_size=16, patch_size=4, depth=4, mlp_ratio=2, num_classes=4,
                       attention={"heads": 4, "model_dim": 64, "manifolds": manifolds})


@pytest.mark.slow
def test_desk_scale_training_reaches_ninety_percent(tmp_path):
    train, test = data_service.synthetic_splits(500, 125, 16, seed=1)
    cfg = TrainConfig(epochs=30, warmup_epochs=3, mixup_alpha=0.0, seed=1)
    accuracy = {}
    for manifolds in ("e", "e,s,g"):
        model = model_service.init_model_weights(_desk_config(manifolds), seed=1)
        rows = training_service.fit(model, train, test, cfg, report_path=tmp_path / f"{manifolds}.csv")
        accuracy[manifolds] = rows[-1].eval_acc
    assert accuracy["e"] >= 0.90
    assert accuracy["e,s,g"] >= 0.90
    assert accuracy["e,s,g"] >= accuracy["e"] - 0.02
