import dataclasses
import json

import numpy as np
import pytest
import torch

from config import ModelConfig, TrainConfig
from errors import ConfigError, NumericalAbort
from measures import Dataset, MeasurePair, PointCloud
from metrics import mmd_rbf_loss
from model import build_model, load_checkpoint, make_optimizer, randomize_parameters, save_checkpoint
from training import (Trainer, TrainHistory, _check_finite, lr_factor, measure_loss, sample_measure_batch,
                      scheduled_lr, static_loss, static_training_step, tfm_loss, tfm_training_step, train)
from transport import wasserstein_p

SHIFT = np.array([0.6, -0.8])

TINY = ModelConfig(ambient_dim=2, hidden_dim=16, num_layers=1, num_heads=2, fourier_frequencies=4,
                   time_embed_dim=8, dropout_rate=0.0, mlp_ratio=2)


def shift_dataset(n_pairs=8, n=16, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        x = rng.normal(size=(n, 2))
        pairs.append(MeasurePair(PointCloud(x), PointCloud(x + SHIFT), f"shift-{i}"))
    return Dataset(pairs, 2)


def test_lr_factor():
    assert lr_factor(0, 100) == 1.0
    assert lr_factor(100, 100) == pytest.approx(0.01)
    assert lr_factor(50, 100) == pytest.approx(0.505)
    assert lr_factor(3, 0) == 1.0
    config = TrainConfig(loss_kind="tfm", lr=0.1, schedule="constant")
    assert scheduled_lr(config, 99, 100) == 0.1


def test_ot_batches_recover_the_translation():
    dataset = shift_dataset()
    x, y, indices = sample_measure_batch(dataset, 4, 16, np.random.default_rng(1), use_ot_coupling=True)
    assert x.shape == y.shape == (4, 16, 2)
    assert len(set(indices.tolist())) == 4
    np.testing.assert_allclose((y - x).numpy(), np.broadcast_to(SHIFT, (4, 16, 2)), atol=1e-12)


def test_batches_with_more_pairs_than_available():
    dataset = shift_dataset(n_pairs=2)
    x, _, indices = sample_measure_batch(dataset, 5, 3, np.random.default_rng(0), use_ot_coupling=False)
    assert x.shape == (5, 3, 2)
    assert set(indices.tolist()) <= {0, 1}


def test_tfm_loss_of_zero_field_is_mean_squared_displacement():
    model = build_model(TINY)
    x = torch.randn(2, 5, 2)
    y = x + torch.as_tensor(SHIFT)
    loss = tfm_loss(model, x, y, torch.tensor([0.1, 0.9]))
    assert loss.item() == pytest.approx(float(np.sum(SHIFT ** 2)))


def test_measure_losses():
    config = TrainConfig(loss_kind="ed", lr=1e-3, mmd_gamma=0.5)
    x = torch.randn(6, 2)
    y = torch.randn(6, 2)
    assert measure_loss("otmse", x, y, config).item() == pytest.approx(((x - y) ** 2).sum(-1).mean().item())
    assert measure_loss("mmd", x, y, config).item() == pytest.approx(mmd_rbf_loss(x, y, 0.5).item())
    assert measure_loss("ed", x, x, config).item() == pytest.approx(0.0, abs=1e-12)
    assert measure_loss("w2", x, x, config).item() < measure_loss("w2", x, x + 5.0, config).item()
    assert measure_loss("w1", x, y, config).item() > 0
    with pytest.raises(ConfigError):
        measure_loss("tfm", x, y, config)


def test_step_functions_check_model_kind():
    dataset = shift_dataset()
    rng = np.random.default_rng(0)
    dynamic = build_model(TINY)
    static = build_model(dataclasses.replace(TINY, time_conditioned=False))
    tfm = TrainConfig(loss_kind="tfm", lr=1e-3, measure_batch=2, particle_batch=4)
    ed = TrainConfig(loss_kind="ed", lr=1e-3, measure_batch=2, particle_batch=4)
    with pytest.raises(ConfigError):
        tfm_training_step(dataset, static, make_optimizer(static, 1e-3), tfm, rng)
    with pytest.raises(ConfigError):
        static_training_step(dataset, dynamic, make_optimizer(dynamic, 1e-3), ed, rng)
    with pytest.raises(ConfigError):
        static_training_step(dataset, static, make_optimizer(static, 1e-3), tfm, rng)
    with pytest.raises(ConfigError):
        Trainer(dataset, TINY, ed)


def test_non_finite_loss_aborts_with_context():
    with pytest.raises(NumericalAbort) as excinfo:
        _check_finite(torch.tensor(float("nan")), 3, 0.1, "ed")
    assert excinfo.value.step == 3
    assert excinfo.value.loss_kind == "ed"
    assert "step=3" in str(excinfo.value)


def test_tfm_learns_the_shift():
    config = TrainConfig(loss_kind="tfm", lr=1e-2, iterations=200, measure_batch=4, particle_batch=16)
    _, history = train(shift_dataset(), TINY, config)
    losses = history.losses
    assert len(losses) == 200
    assert losses[0] == pytest.approx(1.0)
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_static_otmse_learns_the_shift():
    static = dataclasses.replace(TINY, time_conditioned=False)
    config = TrainConfig(loss_kind="otmse", lr=1e-2, iterations=300, measure_batch=4, particle_batch=16)
    _, history = train(shift_dataset(), static, config)
    assert np.all(np.isfinite(history.losses))
    assert np.mean(history.losses[-20:]) < 0.5 * np.mean(history.losses[:20])


def test_training_is_deterministic():
    config = TrainConfig(loss_kind="tfm", lr=1e-2, iterations=15, measure_batch=2, particle_batch=8, seed=4)
    _, a = train(shift_dataset(), TINY, config)
    _, b = train(shift_dataset(), TINY, config)
    assert a.losses == b.losses


def test_epochs_convert_to_iterations():
    config = TrainConfig(loss_kind="tfm", lr=1e-3, epochs=3, measure_batch=3)
    assert config.resolve_iterations(8) == 9
    assert TrainConfig(loss_kind="tfm", lr=1e-3, iterations=7).resolve_iterations(100) == 7


def test_periodic_evaluation_and_history_files(tmp_path):
    dataset = shift_dataset(n_pairs=10)
    config = TrainConfig(loss_kind="tfm", lr=1e-2, iterations=6, measure_batch=2, particle_batch=8,
                         eval_every=3, eval_steps=2)
    train_set, heldout = dataset.split(0.2)
    seen = []
    trainer = Trainer(train_set, TINY, config, heldout=heldout)
    _, history = trainer.run(on_eval=lambda t: seen.append(t.step))
    assert seen == [3, 6]
    assert [r["step"] for r in history.evals] == [2, 5]
    assert set(history.evals[0]) >= {"w1", "w2", "ed", "mmd_avg", "mmd", "r2"}

    history.write_jsonl(tmp_path / "history.jsonl")
    lines = [json.loads(line) for line in (tmp_path / "history.jsonl").read_text().splitlines()]
    assert len(lines) == 8
    history.write_csv(tmp_path / "metrics.csv")
    frame = history.curves_frame()
    assert list(frame["step"]) == list(range(6))
    assert np.isnan(frame.loc[0, "w1"]) and not np.isnan(frame.loc[2, "w1"])
    assert "mmd_0.005" in frame.columns


def test_train_splits_when_evaluating():
    config = TrainConfig(loss_kind="tfm", lr=1e-2, iterations=2, measure_batch=2, particle_batch=4,
                         eval_every=2, eval_steps=1)
    _, history = train(shift_dataset(n_pairs=10), TINY, config)
    assert len(history.evals) == 1


def test_resume_continues_the_step_counter(tmp_path):
    dataset = shift_dataset()
    config = TrainConfig(loss_kind="tfm", lr=1e-2, iterations=4, measure_batch=2, particle_batch=8)
    trainer = Trainer(dataset, TINY, config)
    trainer.run()
    save_checkpoint(tmp_path / "model.ckpt", trainer.model, trainer.step, trainer.optimizer, config)

    longer = dataclasses.replace(config, iterations=7)
    resumed = Trainer(dataset, TINY, longer, checkpoint=load_checkpoint(tmp_path / "model.ckpt"))
    assert resumed.step == 4
    _, history = resumed.run()
    assert [r["step"] for r in history.steps] == [4, 5, 6]
    finished = Trainer(dataset, TINY, config, checkpoint=load_checkpoint(tmp_path / "model.ckpt"))
    assert len(finished.run()[1]) == 0


def test_history_length_counts_steps_only():
    history = TrainHistory()
    history.log_step(0, 1.0, 0.1, 0.01)
    assert len(history) == 1
    assert history.losses == [1.0]


class IgnoresTime(torch.nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, z, t=None):
        return self.inner(z)


class OneEulerStep(torch.nn.Module):
    def __init__(self, field):
        super().__init__()
        self.field = field

    def forward(self, x):
        return x + self.field(x, 1.0)


def frozen_static_model():
    model = randomize_parameters(build_model(dataclasses.replace(TINY, time_conditioned=False)), std=0.3, seed=2)
    return model.eval().requires_grad_(False)


def test_tfm_loss_ignores_joint_row_order():
    model = randomize_parameters(build_model(TINY), std=0.3, seed=1).eval()
    generator = torch.Generator().manual_seed(0)
    x = torch.randn(3, 7, 2, generator=generator, dtype=torch.float64)
    y = torch.randn(3, 7, 2, generator=generator, dtype=torch.float64)
    t = torch.tensor([0.2, 0.5, 0.9])
    perm = torch.randperm(7, generator=generator)
    with torch.no_grad():
        loss = tfm_loss(model, x, y, t).item()
        shuffled = tfm_loss(model, x[:, perm], y[:, perm], t).item()
    assert shuffled == pytest.approx(loss, abs=1e-10)


def test_otmse_matches_tfm_of_a_one_step_flow():
    field = IgnoresTime(frozen_static_model())
    dataset = shift_dataset()
    x, y, _ = sample_measure_batch(dataset, 4, 16, np.random.default_rng(3), use_ot_coupling=True)
    config = TrainConfig(loss_kind="otmse", lr=1e-3)
    with torch.no_grad():
        otmse = static_loss(OneEulerStep(field), x, y, config).item()
        tfm = tfm_loss(field, x, y, torch.zeros(4)).item()
    assert otmse == pytest.approx(tfm, abs=1e-10)


def test_zero_field_has_zero_loss_on_a_self_map():
    dataset = Dataset([MeasurePair(pair.source, pair.source, pair.tag) for pair in shift_dataset().pairs], 2)
    x, y, _ = sample_measure_batch(dataset, 4, 16, np.random.default_rng(0), use_ot_coupling=True)
    assert torch.equal(x, y)
    assert tfm_loss(build_model(TINY), x, y, torch.rand(4, dtype=torch.float64)).item() == 0.0


def test_otmse_learns_the_self_map():
    dataset = Dataset([MeasurePair(pair.source, pair.source, pair.tag) for pair in shift_dataset().pairs], 2)
    static = dataclasses.replace(TINY, time_conditioned=False)
    config = TrainConfig(loss_kind="otmse", lr=1e-2, iterations=500, measure_batch=4, particle_batch=16)
    model, history = train(dataset, static, config)
    assert np.mean(history.losses[-20:]) < 1e-3
    fresh = torch.as_tensor(np.random.default_rng(7).normal(size=(32, 2)))
    with torch.no_grad():
        pred = model.eval()(fresh)
    assert wasserstein_p(pred.numpy(), fresh.numpy(), 1) < 0.05


def test_tfm_field_converges_to_the_shift():
    config = TrainConfig(loss_kind="tfm", lr=1e-2, iterations=500, measure_batch=4, particle_batch=16)
    model, _ = train(shift_dataset(), TINY, config)
    fresh = torch.as_tensor(np.random.default_rng(7).normal(size=(32, 2)))
    with torch.no_grad():
        velocity = model.eval()(fresh, 0.5)
    np.testing.assert_array_less(np.abs(velocity.mean(0).numpy() - SHIFT), 0.05)
