"""Distributional distances and aggregated metric reports.

Two layers: float-valued metrics over PointClouds (exact sums via math.fsum so
they are symmetric bit-for-bit), and differentiable tensor versions used as
training losses.

The RBF kernel uses gamma as a bandwidth: k(x, y) = exp(-||x - y||^2 / (2 gamma^2)).
r^2 is the squared Pearson correlation between the strict upper triangles of
the two clouds' feature-correlation matrices; this recipe is implementation
defined.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import torch
from scipy.spatial.distance import cdist

from errors import DimensionError
from transport import as_points, pairwise_distances, pairwise_sq_distances, wasserstein_p

logger = logging.getLogger(__name__)

MMD_GAMMAS = (2.0, 1.0, 0.5, 0.1, 0.01, 0.005)


def _gamma_key(gamma):
    return format(gamma, "g")


def _check_dims(x, y):
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"clouds live in d={x.shape[1]} and d={y.shape[1]}")


def _mean(matrix):
    return math.fsum(matrix.ravel()) / matrix.size


def energy_distance(x, y):
    """2 E||x - y|| - E||x - x'|| - E||y - y'|| (V-statistic)"""
    x, y = as_points(x), as_points(y)
    _check_dims(x, y)
    cross = _mean(cdist(x, y))
    return 2.0 * cross - (_mean(cdist(x, x)) + _mean(cdist(y, y)))


def mmd_rbf(x, y, gamma):
    x, y = as_points(x), as_points(y)
    _check_dims(x, y)
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    scale = 2.0 * gamma * gamma

    def kernel_mean(a, b):
        return _mean(np.exp(-cdist(a, b, "sqeuclidean") / scale))

    return (kernel_mean(x, x) + kernel_mean(y, y)) - 2.0 * kernel_mean(x, y)


def mmd_avg(x, y):
    """MMD averaged over the fixed bandwidth grid"""
    return math.fsum(mmd_rbf(x, y, g) for g in MMD_GAMMAS) / len(MMD_GAMMAS)


def _feature_correlations(points):
    centered = points - points.mean(axis=0)
    std = np.sqrt((centered ** 2).mean(axis=0))
    scaled = np.zeros_like(centered)
    varying = std > 0
    scaled[:, varying] = centered[:, varying] / std[varying]
    return scaled.T @ scaled / points.shape[0]


def r_squared(pred, target):
    """Squared correlation between the feature-correlation structures"""
    pred, target = as_points(pred), as_points(target)
    _check_dims(pred, target)
    d = pred.shape[1]
    if d < 2:
        raise DimensionError(f"r_squared needs d >= 2, got d={d}")
    upper = np.triu_indices(d, k=1)
    a = _feature_correlations(pred)[upper]
    b = _feature_correlations(target)[upper]
    if a.size < 2:
        # one correlation pair: a correlation of scalars is undefined
        return 1.0 if np.isclose(abs(a[0]), abs(b[0])) else 0.0
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 1.0 if np.allclose(a, b) else 0.0
    r = np.corrcoef(a, b)[0, 1]
    return float(r * r)


@dataclass
class MetricReport:
    w1: float
    w2: float
    ed: float
    mmd_avg: float
    mmd_per_gamma: dict = field(default_factory=dict)
    r2: Optional[float] = None

    def __post_init__(self):
        for name in ("w1", "w2", "ed", "mmd_avg"):
            if getattr(self, name) < -1e-9:
                raise ValueError(f"{name} is negative: {getattr(self, name)}")

    def to_dict(self):
        return {
            "w1": self.w1,
            "w2": self.w2,
            "ed": self.ed,
            "mmd_avg": self.mmd_avg,
            "mmd": {_gamma_key(g): v for g, v in self.mmd_per_gamma.items()},
            "r2": self.r2,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    def flat(self):
        """Single-level record for tables"""
        row = {"w1": self.w1, "w2": self.w2, "ed": self.ed, "mmd_avg": self.mmd_avg,
               "r2": float("nan") if self.r2 is None else self.r2}
        row.update({f"mmd_{_gamma_key(g)}": v for g, v in self.mmd_per_gamma.items()})
        return row

    @classmethod
    def from_dict(cls, data):
        return cls(
            w1=data["w1"], w2=data["w2"], ed=data["ed"], mmd_avg=data["mmd_avg"],
            mmd_per_gamma={float(k): v for k, v in data.get("mmd", {}).items()},
            r2=data.get("r2"),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def metric_report(pred, target):
    pred_points, target_points = as_points(pred), as_points(target)
    _check_dims(pred_points, target_points)
    per_gamma = {g: mmd_rbf(pred_points, target_points, g) for g in MMD_GAMMAS}
    return MetricReport(
        w1=wasserstein_p(pred_points, target_points, 1),
        w2=wasserstein_p(pred_points, target_points, 2),
        ed=energy_distance(pred_points, target_points),
        mmd_avg=math.fsum(per_gamma.values()) / len(per_gamma),
        mmd_per_gamma=per_gamma,
        r2=r_squared(pred_points, target_points) if pred_points.shape[1] >= 2 else None,
    )


def reports_frame(reports):
    return pd.DataFrame([r.flat() for r in reports])


def average_reports(reports):
    """Field-wise mean of several reports"""
    if not reports:
        raise ValueError("no reports to average")
    means = reports_frame(reports).mean(skipna=False)
    r2 = None if any(r.r2 is None for r in reports) else float(means["r2"])
    gammas = reports[0].mmd_per_gamma.keys()
    return MetricReport(
        w1=float(means["w1"]), w2=float(means["w2"]), ed=float(means["ed"]),
        mmd_avg=float(means["mmd_avg"]),
        mmd_per_gamma={g: float(means[f"mmd_{_gamma_key(g)}"]) for g in gammas},
        r2=r2,
    )


# Differentiable losses over (m, d) tensors

def energy_distance_loss(x, y):
    cross = pairwise_distances(x, y).mean()
    return 2.0 * cross - pairwise_distances(x, x).mean() - pairwise_distances(y, y).mean()


def mmd_rbf_loss(x, y, gamma):
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    scale = 2.0 * gamma * gamma

    def kernel_mean(a, b):
        return torch.exp(-pairwise_sq_distances(a, b) / scale).mean()

    return kernel_mean(x, x) + kernel_mean(y, y) - 2.0 * kernel_mean(x, y)
