import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import DimensionError
from measures import PointCloud
from metrics import (MMD_GAMMAS, MetricReport, average_reports, energy_distance, energy_distance_loss,
                     metric_report, mmd_avg, mmd_rbf, mmd_rbf_loss, r_squared)


def naive_energy_distance(x, y):
    def mean_dist(a, b):
        return sum(np.linalg.norm(ai - bj) for ai in a for bj in b) / (len(a) * len(b))
    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def naive_mmd(x, y, gamma):
    def k(a, b):
        return sum(math.exp(-np.sum((ai - bj) ** 2) / (2 * gamma ** 2)) for ai in a for bj in b) / (len(a) * len(b))
    return k(x, x) + k(y, y) - 2 * k(x, y)


def random_pair(seed):
    rng = np.random.default_rng(seed)
    n, m, d = rng.integers(1, 8), rng.integers(1, 8), rng.integers(1, 4)
    return rng.normal(size=(n, d)), rng.normal(size=(m, d)) + 0.3


def test_metrics_match_naive_double_sums():
    for seed in range(50):
        x, y = random_pair(seed)
        assert energy_distance(x, y) == pytest.approx(naive_energy_distance(x, y), abs=1e-12)
        for gamma in (2.0, 0.5, 0.01):
            assert mmd_rbf(x, y, gamma) == pytest.approx(naive_mmd(x, y, gamma), abs=1e-12)


def test_point_mass_examples():
    zero, one = PointCloud(np.array([[0.0]])), PointCloud(np.array([[1.0]]))
    assert energy_distance(zero, one) == 2.0
    report = metric_report(zero, one)
    assert report.w1 == 1.0
    assert report.ed == 2.0
    assert report.r2 is None


@given(st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_symmetry_and_identity(seed):
    x, y = random_pair(seed)
    assert energy_distance(x, y) == energy_distance(y, x)
    assert mmd_avg(x, y) == mmd_avg(y, x)
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    assert energy_distance(x, y) >= -1e-12
    assert mmd_rbf(x, y, 0.5) >= -1e-12


def test_mmd_rejects_bad_gamma():
    with pytest.raises(ValueError):
        mmd_rbf(np.zeros((1, 1)), np.zeros((1, 1)), 0.0)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        energy_distance(np.zeros((2, 1)), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        r_squared(np.zeros((3, 1)), np.zeros((3, 1)))


def test_r_squared_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3))
    x[:, 1] += x[:, 0]
    assert r_squared(x, x) == pytest.approx(1.0)
    assert r_squared(x, x * 3.0 + 1.0) == pytest.approx(1.0)
    y = rng.normal(size=(200, 2))
    flipped = y.copy()
    flipped[:, 1] *= -1
    assert r_squared(y, flipped) == 1.0
    assert 0.0 <= r_squared(x, rng.normal(size=(200, 3))) <= 1.0


def test_report_schema_round_trip():
    rng = np.random.default_rng(1)
    report = metric_report(rng.normal(size=(20, 2)), rng.normal(size=(20, 2)))
    data = json.loads(report.to_json())
    assert set(data) == {"w1", "w2", "ed", "mmd_avg", "mmd", "r2"}
    assert list(data["mmd"]) == ["2", "1", "0.5", "0.1", "0.01", "0.005"]
    assert MetricReport.from_json(report.to_json()) == report
    assert report.mmd_avg == pytest.approx(sum(report.mmd_per_gamma.values()) / len(MMD_GAMMAS))


def test_report_rejects_negative_distance():
    with pytest.raises(ValueError):
        MetricReport(w1=-1.0, w2=0.0, ed=0.0, mmd_avg=0.0)


def test_average_reports():
    a = MetricReport(w1=1.0, w2=2.0, ed=3.0, mmd_avg=0.5, mmd_per_gamma={2.0: 0.5}, r2=0.2)
    b = MetricReport(w1=3.0, w2=4.0, ed=5.0, mmd_avg=1.5, mmd_per_gamma={2.0: 1.5}, r2=None)
    mean = average_reports([a, b])
    assert (mean.w1, mean.w2, mean.ed, mean.mmd_avg) == (2.0, 3.0, 4.0, 1.0)
    assert mean.mmd_per_gamma == {2.0: 1.0}
    assert mean.r2 is None
    assert average_reports([a, a]).r2 == pytest.approx(0.2)
    with pytest.raises(ValueError):
        average_reports([])


def test_tensor_losses_agree_with_float_metrics():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    xt, yt = torch.as_tensor(x), torch.as_tensor(y)
    assert energy_distance_loss(xt, yt).item() == pytest.approx(energy_distance(x, y), abs=1e-12)
    assert mmd_rbf_loss(xt, yt, 0.5).item() == pytest.approx(mmd_rbf(x, y, 0.5), abs=1e-12)


def test_energy_loss_gradient_is_finite_at_coincident_points():
    x = torch.zeros(3, 2, dtype=torch.float64, requires_grad=True)
    y = torch.ones(3, 2, dtype=torch.float64)
    energy_distance_loss(x, y).backward()
    assert torch.isfinite(x.grad).all()


@pytest.mark.parametrize("a", [3.0, -0.5])
def test_energy_distance_scales_with_the_cloud(a):
    x, y = random_pair(11)
    assert energy_distance(a * x, a * y) == pytest.approx(abs(a) * energy_distance(x, y), rel=1e-12)


def test_wide_kernel_cannot_tell_clouds_apart():
    x, y = random_pair(4)
    assert mmd_rbf(x, y, 1e6) < 1e-6


def test_r_squared_of_unrelated_noise_is_small():
    rng = np.random.default_rng(2)
    mixing = rng.normal(size=(10, 10))
    target = rng.normal(size=(500, 10)) @ mixing
    assert r_squared(target, target) == pytest.approx(1.0)
    assert r_squared(rng.normal(size=(500, 10)), target) < 0.3
