"""Sampling from trained models.

Dynamic models are integrated with explicit Euler steps, advancing time before
each evaluation of the field. Static models are applied once; their output is
the prediction itself, not a displacement.
"""
import logging
from dataclasses import dataclass, field

import torch

from errors import DimensionError, NumericalAbort
from measures import PointCloud, Trajectory
from metrics import average_reports, metric_report, reports_frame

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 100


def _require_time_conditioned(model, expected):
    if model.config.time_conditioned != expected:
        kind = "time-conditioned" if expected else "static"
        raise ValueError(f"this operation needs a {kind} model")


def _check_dim(model, source):
    if source.d != model.config.ambient_dim:
        raise DimensionError(f"model expects d={model.config.ambient_dim}, source has d={source.d}")


def integrate_flow(model, source, num_steps=DEFAULT_STEPS, t_start=0.0, t_end=1.0):
    """Euler-integrate the learned velocity field from t_start to t_end"""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    _require_time_conditioned(model, True)
    _check_dim(model, source)
    model.eval()
    dt = (t_end - t_start) / num_steps
    t = t_start
    z = torch.tensor(source.points).clone()
    with torch.no_grad():
        for step in range(1, num_steps + 1):
            t += dt
            z = z + model(z, t) * dt
            if not torch.isfinite(z).all():
                raise NumericalAbort("non-finite state during integration", step=step)
    return PointCloud(z.numpy())


def static_map(model, source):
    """Push the source through the one-step map"""
    _require_time_conditioned(model, False)
    _check_dim(model, source)
    model.eval()
    with torch.no_grad():
        out = model(torch.tensor(source.points))
    if not torch.isfinite(out).all():
        raise NumericalAbort("non-finite static prediction")
    return PointCloud(out.numpy())


def predict(model, source, num_steps=DEFAULT_STEPS):
    if model.config.time_conditioned:
        return integrate_flow(model, source, num_steps)
    return static_map(model, source)


@dataclass
class RolloutResult:
    predicted: Trajectory
    reports: list = field(default_factory=list)
    aggregate: object = None

    def to_dict(self):
        return {
            "n_marginals": len(self.predicted),
            "times": list(self.predicted.times),
            "reports": [r.to_dict() for r in self.reports],
            "aggregate": self.aggregate.to_dict() if self.aggregate is not None else None,
        }

    def curves_frame(self):
        """One row of metrics per predicted marginal"""
        frame = reports_frame(self.reports)
        frame.insert(0, "marginal", range(1, len(self.reports) + 1))
        return frame


def rollout(model, mu0, n_marginals, steps_per_marginal=DEFAULT_STEPS, truth=None):
    """Autoregressive prediction of marginals 1..n_marginals-1 from mu0.

    Each hop integrates over [0, 1] (or applies the static map once) and feeds
    its output into the next hop.
    """
    if n_marginals < 2:
        raise ValueError(f"rollout needs n_marginals >= 2, got {n_marginals}")
    if truth is not None and len(truth) < n_marginals:
        raise DimensionError(f"truth has {len(truth)} marginals, rollout asks for {n_marginals}")
    marginals = [mu0]
    current = mu0
    for _ in range(n_marginals - 1):
        current = predict(model, current, steps_per_marginal)
        marginals.append(current)
    times = truth.times[:n_marginals] if truth is not None else range(n_marginals)
    result = RolloutResult(predicted=Trajectory(marginals, times))
    if truth is not None:
        result.reports = [metric_report(pred, truth.marginals[k])
                          for k, pred in enumerate(marginals[1:], start=1)]
        result.aggregate = average_reports(result.reports)
    return result


def evaluate_pairs(model, dataset, num_steps=DEFAULT_STEPS):
    """Average one-hop metrics over every pair of a dataset"""
    reports = [metric_report(predict(model, pair.source, num_steps), pair.target)
               for pair in dataset.pairs]
    return average_reports(reports)
