"""Central finite-difference checks of reverse-mode gradients.

Every parameter coordinate is perturbed by +-step and the symmetric quotient is
compared with the autograd gradient. An entry passes when its absolute error is
within `atol` or its relative error within `rtol`.
"""
import dataclasses
import logging
from dataclasses import dataclass, field

import torch

from config import ModelConfig, TrainConfig
from errors import GradcheckFailure
from model import backward, build_model, randomize_parameters, zero_grad
from training import static_loss, tfm_loss

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
RTOL = 1e-4
ATOL = 1e-8
N_PARTICLES = 3

TINY_MODEL = ModelConfig(
    ambient_dim=2,
    hidden_dim=8,
    num_layers=1,
    num_heads=2,
    fourier_frequencies=4,
    time_embed_dim=8,
    dropout_rate=0.0,
    mlp_ratio=2,
)

STATIC_CHECKED = ("ed", "mmd", "otmse")
# Sinkhorn losses are checked at a looser tolerance; each evaluation is an
# iterative solve converged to SINKHORN_TOL.
SINKHORN_CHECKED = ("w1", "w2")
SINKHORN_RTOL = 1e-2
SINKHORN_TOL = 1e-12


@dataclass
class GradcheckGroup:
    name: str
    size: int
    max_abs_error: float
    max_rel_error: float
    passed: bool


@dataclass
class GradcheckReport:
    label: str
    groups: list = field(default_factory=list)

    @property
    def passed(self):
        return all(g.passed for g in self.groups)

    @property
    def max_rel_error(self):
        return max((g.max_rel_error for g in self.groups), default=0.0)

    def first_failure(self):
        return next((g for g in self.groups if not g.passed), None)

    def lines(self):
        yield f"[{self.label}] max relative error {self.max_rel_error:.3e}"
        for g in self.groups:
            status = "ok" if g.passed else "FAIL"
            yield (f"  {status:4} {g.name:40} n={g.size:<5} "
                   f"abs={g.max_abs_error:.3e} rel={g.max_rel_error:.3e}")


def _entry_errors(analytic, numeric, atol):
    abs_err = abs(analytic - numeric)
    if abs_err <= atol:
        return abs_err, 0.0
    return abs_err, abs_err / max(abs(analytic), abs(numeric))


def finite_difference_check(model, loss_fn, step=FD_STEP, rtol=RTOL, atol=ATOL, label="loss"):
    """Compare autograd gradients of loss_fn() with central differences, per parameter"""
    model.eval()
    zero_grad(model)
    backward(loss_fn())
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in model.named_parameters()}
    zero_grad(model)

    report = GradcheckReport(label)
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.data.view(-1)
            expected = analytic[name].view(-1)
            max_abs = max_rel = 0.0
            for i in range(flat.numel()):
                original = float(flat[i])
                flat[i] = original + step
                plus = float(loss_fn())
                flat[i] = original - step
                minus = float(loss_fn())
                flat[i] = original
                abs_err, rel_err = _entry_errors(float(expected[i]), (plus - minus) / (2.0 * step), atol)
                max_abs = max(max_abs, abs_err)
                max_rel = max(max_rel, rel_err)
            report.groups.append(GradcheckGroup(name, flat.numel(), max_abs, max_rel, max_rel <= rtol))
    logger.debug("%s: max relative error %.3e", label, report.max_rel_error)
    return report


def corrupt_backward(model, name="output_proj.weight"):
    """Skew the gradient of one parameter; the returned handle removes the hook"""
    params = dict(model.named_parameters())
    if name not in params:
        raise KeyError(f"model has no parameter {name!r}")
    return params[name].register_hook(lambda g: g * 1.5 + 1e-3)


def _check_batch(d, seed=0):
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(1, N_PARTICLES, d, generator=generator, dtype=torch.float64)
    y = torch.randn(1, N_PARTICLES, d, generator=generator, dtype=torch.float64) + 0.5
    return x, y


def _prepared(config, seed):
    model = build_model(config)
    return randomize_parameters(model, std=0.3, seed=seed)


def run_gradchecks(model_config=None, corrupt=False, seed=0):
    """Check the TFM loss on both architectures and every static loss"""
    base = model_config or TINY_MODEL
    x, y = _check_batch(base.ambient_dim, seed)
    t = torch.tensor([0.37])
    reports = []

    for arch in ("transformer", "mlp"):
        model = _prepared(dataclasses.replace(base, arch=arch, time_conditioned=True, dropout_rate=0.0), seed)
        handle = corrupt_backward(model) if corrupt else None
        reports.append(finite_difference_check(model, lambda: tfm_loss(model, x, y, t), label=f"tfm/{arch}"))
        if handle is not None:
            handle.remove()

    static = _prepared(dataclasses.replace(base, arch="transformer", time_conditioned=False,
                                           dropout_rate=0.0), seed)
    handle = corrupt_backward(static) if corrupt else None
    for kind in STATIC_CHECKED:
        train_config = TrainConfig(loss_kind=kind, lr=1e-3, mmd_gamma=1.0)
        reports.append(finite_difference_check(
            static, lambda: static_loss(static, x, y, train_config), label=f"{kind}/static"))
    for kind in SINKHORN_CHECKED:
        train_config = TrainConfig(loss_kind=kind, lr=1e-3, sinkhorn_epsilon=0.5, sinkhorn_iters=2000,
                                   sinkhorn_tol=SINKHORN_TOL)
        reports.append(finite_difference_check(
            static, lambda: static_loss(static, x, y, train_config), rtol=SINKHORN_RTOL, label=f"{kind}/static"))
    if handle is not None:
        handle.remove()
    return reports


def assert_passed(reports):
    """Raise GradcheckFailure naming the worst failing parameter"""
    failures = [(r, g) for r in reports for g in r.groups if not g.passed]
    if failures:
        report, group = max(failures, key=lambda rg: rg[1].max_rel_error)
        raise GradcheckFailure(f"{report.label}:{group.name}", group.max_rel_error)
