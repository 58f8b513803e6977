"""Static M2M objective, transformer flow matching, and the training loop.

Both objectives sample `measure_batch` pairs and `particle_batch` particles per
side; with OT coupling the target rows are reordered by the exact assignment.
Flow matching draws one t per measure so every interpolated batch is a valid
marginal of the linear path, and regresses the model onto y - x.
"""
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from config import num_threads
from errors import ConfigError, NumericalAbort
from inference import evaluate_pairs
from measures import subsample
from metrics import energy_distance_loss, mmd_rbf_loss
from model import adam_step, backward, build_model, make_optimizer, zero_grad
from transport import minibatch_ot_pairs, sinkhorn_cost

logger = logging.getLogger(__name__)


def lr_factor(step, total, start=1.0, end=0.01):
    """Linear interpolation from `start` at step 0 to `end` at step `total`"""
    if total == 0:
        return start
    return start + (end - start) * step / total


def scheduled_lr(config, step, total):
    if config.schedule == "constant":
        return config.lr
    return config.lr * lr_factor(step, total, config.start_factor, config.end_factor)


def sample_measure_batch(dataset, b, m, rng, use_ot_coupling):
    """Draw b pairs and m particles per side as (b, m, d) tensors"""
    n = len(dataset)
    indices = rng.permutation(n)[:b] if b <= n else rng.integers(0, n, size=b)
    xs, ys = [], []
    for i in indices:
        pair = dataset.pairs[i]
        x = subsample(pair.source, m, rng).points
        y = subsample(pair.target, m, rng).points
        if use_ot_coupling:
            x, y = minibatch_ot_pairs(x, y, p=2)
        xs.append(x)
        ys.append(y)
    return torch.as_tensor(np.stack(xs)), torch.as_tensor(np.stack(ys)), indices


def tfm_loss(model, x, y, t):
    """Mean over all b*m rows of ||v(z, t) - (y - x)||^2 along the linear path"""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    tt = t[:, None, None]
    z = tt * y + (1.0 - tt) * x
    v = model(z, t)
    return ((v - (y - x)) ** 2).sum(-1).mean()


def measure_loss(kind, pred, target, config):
    """Distributional loss between one pushed batch and its target batch"""
    if kind == "mmd":
        return mmd_rbf_loss(pred, target, config.mmd_gamma)
    if kind == "ed":
        return energy_distance_loss(pred, target)
    if kind in ("w1", "w2"):
        p = 1 if kind == "w1" else 2
        return sinkhorn_cost(pred, target, p, config.sinkhorn_epsilon, config.sinkhorn_iters,
                             config.sinkhorn_tol)
    if kind == "otmse":
        return ((pred - target) ** 2).sum(-1).mean()
    raise ConfigError("train.loss_kind", f"not a static loss: {kind!r}")


def static_loss(model, x, y, config):
    pred = model(x)
    losses = [measure_loss(config.loss_kind, pred[i], y[i], config) for i in range(pred.shape[0])]
    return torch.stack(losses).mean()


def _check_finite(loss, step, lr, kind):
    if not torch.isfinite(loss):
        raise NumericalAbort("non-finite training loss", step=step, lr=lr, loss_kind=kind,
                             value=float(loss.detach()))


def tfm_training_step(dataset, model, optimizer, config, rng, step=0, total=None):
    """One flow-matching update; returns the batch loss"""
    if config.loss_kind != "tfm":
        raise ConfigError("train.loss_kind", "tfm_training_step needs loss_kind 'tfm'")
    if not model.config.time_conditioned:
        raise ConfigError("model.time_conditioned", "flow matching needs a time-conditioned model")
    total = config.iterations if total is None else total
    lr = scheduled_lr(config, step, total)
    x, y, _ = sample_measure_batch(dataset, config.measure_batch, config.particle_batch, rng,
                                   config.use_ot_coupling)
    t = torch.as_tensor(rng.uniform(0.0, 1.0, size=x.shape[0]))
    model.train()
    zero_grad(model)
    loss = tfm_loss(model, x, y, t)
    _check_finite(loss, step, lr, config.loss_kind)
    backward(loss)
    adam_step(model, optimizer, lr)
    return float(loss.detach())


def static_training_step(dataset, model, optimizer, config, rng, step=0, total=None):
    """One update of the one-step pushforward objective; returns the batch loss"""
    if not config.is_static:
        raise ConfigError("train.loss_kind", f"{config.loss_kind!r} is not a static loss")
    if model.config.time_conditioned:
        raise ConfigError("model.time_conditioned", "static losses need a model without time conditioning")
    total = config.iterations if total is None else total
    lr = scheduled_lr(config, step, total)
    x, y, _ = sample_measure_batch(dataset, config.measure_batch, config.particle_batch, rng,
                                   config.use_ot_coupling)
    model.train()
    zero_grad(model)
    loss = static_loss(model, x, y, config)
    _check_finite(loss, step, lr, config.loss_kind)
    backward(loss)
    adam_step(model, optimizer, lr)
    return float(loss.detach())


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def log_step(self, step, loss, lr, seconds):
        self.records.append({"kind": "step", "step": step, "loss": loss, "lr": lr, "seconds": seconds})

    def log_eval(self, step, report):
        self.records.append({"kind": "eval", "step": step, **report.to_dict()})

    @property
    def steps(self):
        return [r for r in self.records if r["kind"] == "step"]

    @property
    def evals(self):
        return [r for r in self.records if r["kind"] == "eval"]

    @property
    def losses(self):
        return [r["loss"] for r in self.steps]

    def __len__(self):
        return len(self.steps)

    def write_jsonl(self, path, append=False):
        with open(path, "a" if append else "w") as f:
            for record in self.records:
                f.write(json.dumps(record) + "\n")

    def curves_frame(self):
        """Loss per step joined with eval metrics where present"""
        steps = pd.DataFrame(self.steps, columns=["step", "loss", "lr", "seconds"])
        if not self.evals:
            return steps
        rows = []
        for record in self.evals:
            row = {k: v for k, v in record.items() if k not in ("kind", "mmd")}
            row.update({f"mmd_{g}": v for g, v in record["mmd"].items()})
            rows.append(row)
        return steps.merge(pd.DataFrame(rows), on="step", how="left")

    def write_csv(self, path):
        self.curves_frame().to_csv(path, index=False)


def check_compatible(model_config, train_config):
    if train_config.loss_kind == "tfm" and not model_config.time_conditioned:
        raise ConfigError("model.time_conditioned", "loss_kind 'tfm' needs a time-conditioned model")
    if train_config.is_static and model_config.time_conditioned:
        raise ConfigError("model.time_conditioned", f"loss_kind {train_config.loss_kind!r} needs a static model")


class Trainer:
    """Owns the model, optimizer and RNG streams of one training run"""

    def __init__(self, dataset, model_config, train_config, heldout=None, checkpoint=None):
        check_compatible(model_config, train_config)
        self.dataset = dataset
        self.heldout = heldout
        self.model_config = model_config
        self.config = train_config
        if checkpoint is not None:
            self.model = checkpoint.model
            self.step = checkpoint.step
            self.optimizer = checkpoint.restore_optimizer(make_optimizer(self.model, train_config.lr))
        else:
            self.model = build_model(model_config)
            self.step = 0
            self.optimizer = make_optimizer(self.model, train_config.lr)
        self.total = train_config.resolve_iterations(len(dataset))
        # streams keyed by the start step so a resumed run is reproducible too
        self.rng = np.random.default_rng([train_config.seed, self.step])
        self.torch_seed = train_config.seed * 1_000_003 + self.step
        self.history = TrainHistory()
        self._step_fn = tfm_training_step if train_config.loss_kind == "tfm" else static_training_step

    def evaluate(self):
        steps = self.config.eval_steps
        return evaluate_pairs(self.model, self.heldout, steps)

    def run(self, progress=False, on_eval=None):
        threads = num_threads()
        if threads:
            torch.set_num_threads(threads)
        if self.step >= self.total:
            logger.info("Nothing to do: step %d of %d already reached", self.step, self.total)
            return self.model, self.history
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.torch_seed)
            bar = tqdm(range(self.step, self.total), desc=self.config.loss_kind, disable=not progress)
            for step in bar:
                start = time.perf_counter()
                loss = self._step_fn(self.dataset, self.model, self.optimizer, self.config, self.rng,
                                     step=step, total=self.total)
                lr = scheduled_lr(self.config, step, self.total)
                self.history.log_step(step, loss, lr, time.perf_counter() - start)
                self.step = step + 1
                logger.debug("step %d loss %.6g lr %.3g", step, loss, lr)
                bar.set_postfix(loss=f"{loss:.4g}")
                if self.config.eval_every and self.heldout is not None and self.step % self.config.eval_every == 0:
                    report = self.evaluate()
                    self.history.log_eval(step, report)
                    logger.info("eval at step %d: w1=%.4f ed=%.4f mmd=%.4g", self.step,
                                report.w1, report.ed, report.mmd_avg)
                    if on_eval is not None:
                        on_eval(self)
        return self.model, self.history


def train(dataset, model_config, train_config, heldout=None, checkpoint=None, progress=False):
    """Run the configured objective; returns (model, history)"""
    if heldout is None and train_config.eval_every and train_config.holdout_fraction > 0:
        dataset, heldout = dataset.split(train_config.holdout_fraction)
    trainer = Trainer(dataset, model_config, train_config, heldout=heldout, checkpoint=checkpoint)
    return trainer.run(progress=progress)
