"""Synthetic measure data: McKean-Vlasov particle systems and corruption processes.

Every system is integrated with Euler-Maruyama on a uniform grid that records
both endpoints. Each system draws from its own generator seeded by
(seed, system_index), so datasets reproduce pair by pair.
"""
import logging
from pathlib import Path

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from errors import DimensionError, NumericalAbort
from measures import PointCloud, Trajectory, save_pointcloud, write_manifest

logger = logging.getLogger(__name__)

# (uniform range, gaussian std, range of the gaussian mean A)
INITIAL_CONDITIONS = {
    "kuramoto": ((-1.0, 1.0), 0.1, (-1.0, 1.0)),
    "fitzhugh_nagumo": ((-6.0, 6.0), 0.1, (-6.0, 6.0)),
    "atlas": ((-2.0, 2.0), 0.3, (-1.0, 1.0)),
}
UNIFORM_SHARE = 333
GAUSSIAN_SHARE = 167

FHN_RANGES = {"b": (0.5, 0.8), "c": (0.5, 1.0), "d": (0.3, 0.7), "tau": (1.0, 10.0)}


def mixture_counts(n_particles):
    """Split n into (uniform, gaussian) in the ratio 333:167"""
    n_gauss = int(round(n_particles * GAUSSIAN_SHARE / (UNIFORM_SHARE + GAUSSIAN_SHARE)))
    return n_particles - n_gauss, n_gauss


def sample_initial(system, d, n_particles, rng):
    """Uniform block followed by a Gaussian block centred at a random A per coordinate"""
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    (low, high), std, (a_low, a_high) = INITIAL_CONDITIONS[system]
    n_unif, n_gauss = mixture_counts(n_particles)
    uniform = rng.uniform(low, high, size=(n_unif, d))
    centre = rng.uniform(a_low, a_high, size=d)
    gaussian = centre + std * rng.standard_normal(size=(n_gauss, d))
    return PointCloud(np.vstack([uniform, gaussian]))


def kuramoto_drift(x, t, x0):
    """sin(x_i) + (2/N) sum_j sin(x_j - x_i), coordinate-wise"""
    n = x.shape[0]
    sin_x, cos_x = np.sin(x), np.cos(x)
    # sum_j sin(x_j - x_i) = cos(x_i) sum_j sin(x_j) - sin(x_i) sum_j cos(x_j)
    coupling = cos_x * sin_x.sum(axis=0) - sin_x * cos_x.sum(axis=0)
    return sin_x + (2.0 / n) * coupling


def fhn_coefficients(d):
    """Per-dimension b, c, d, tau evenly spaced over their ranges"""
    return {name: np.linspace(low, high, d) for name, (low, high) in FHN_RANGES.items()}


def fitzhugh_nagumo_drift(x, t, x0):
    d = x.shape[1]
    drift = np.empty_like(x)
    v = x[:, 0]
    w_mean = x[:, 1].mean() if d > 1 else 0.0
    current = 0.1 * np.sin(10.0 * t)
    # mean-field pull couples to the initial positions of all particles
    drift[:, 0] = 0.2 * v * (v - 0.5) * (1.0 - v) - w_mean + current + (v - x0[:, 0].mean())
    if d > 1:
        coef = fhn_coefficients(d)
        rest = x[:, 1:]
        drift[:, 1:] = (-coef["b"][1:] * rest + coef["c"][1:] * rest + coef["d"][1:]) / coef["tau"][1:]
    return drift


def atlas_ranks(x):
    """Empirical CDF of each particle within its own coordinate, in [1/N, 1]"""
    n = x.shape[0]
    ranks = np.empty_like(x)
    for k in range(x.shape[1]):
        column = np.sort(x[:, k])
        ranks[:, k] = np.searchsorted(column, x[:, k], side="right") / n
    return ranks


def atlas_drift(x, t, x0):
    neighbour = np.roll(x, 1, axis=1)
    return 5.0 * (0.5 - atlas_ranks(x)) + (x - 0.01 * x ** 3) + 1.5 * np.sin(neighbour)


DRIFTS = {
    "kuramoto": kuramoto_drift,
    "fitzhugh_nagumo": fitzhugh_nagumo_drift,
    "atlas": atlas_drift,
}


def simulate_mkv(config, system_index=0, drift=None, initial=None):
    """Euler-Maruyama trajectory recording all n_timepoints marginals.

    `drift(x, t, x0)` replaces the system drift and `initial` the sampled
    initial cloud; both exist for tests and experiments.
    """
    rng = np.random.default_rng([config.seed, system_index])
    x0 = initial if initial is not None else sample_initial(config.system, config.d, config.n_particles, rng)
    drift = drift or DRIFTS[config.system]
    x0_points = x0.points
    x = x0_points.copy()
    h = config.dt / config.substeps
    sqrt_h = np.sqrt(h)
    marginals = [x0]
    t = 0.0
    for k in range(1, config.n_timepoints):
        for _ in range(config.substeps):
            noise = rng.standard_normal(size=x.shape)
            x = x + drift(x, t, x0_points) * h + config.sigma * sqrt_h * noise
            t += h
        if not np.all(np.isfinite(x)):
            raise NumericalAbort(f"{config.system} state became non-finite at timepoint {k}", step=k)
        marginals.append(PointCloud(x))
    times = np.linspace(0.0, config.t_end, config.n_timepoints)
    return Trajectory(marginals, times)


def corrupt_diffusion(target, steps, noise_scale, rng):
    """Brownian noising over unit time: x += noise_scale * sqrt(dt) * xi"""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = target.points.copy()
    scale = noise_scale * np.sqrt(1.0 / steps)
    for _ in range(steps):
        x = x + scale * rng.standard_normal(size=x.shape)
    return PointCloud(x)


def kernel_weights(x, h):
    """Row-normalized Gaussian kernel A_ij with bandwidth h"""
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    logits = -sq / (2.0 * h * h)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def corrupt_kernel(target, config, rng):
    """Kernel-interaction process: x += eta (x - A x) dt + sigma sqrt(dt) eps"""
    x = target.points.copy()
    sqrt_dt = np.sqrt(config.dt)
    for _ in range(config.steps):
        A = kernel_weights(x, config.h)
        noise = rng.standard_normal(size=x.shape)
        x = x + config.eta * (x - A @ x) * config.dt + config.sigma * sqrt_dt * noise
    return PointCloud(x)


def corrupt(target, config, rng):
    if config.process == "diffusion":
        return corrupt_diffusion(target, config.steps, config.noise_scale, rng)
    return corrupt_kernel(target, config, rng)


def system_id(config, system_index):
    return f"{config.system}-{system_index:03d}"


def emit_mkv_dataset(configs, out_dir, manifest_name="dataset.json", index_offset=0, progress=False):
    """Simulate each system and write adjacent-timepoint pairs plus trajectories"""
    if not configs:
        raise ValueError("need at least one system config")
    dims = {c.d for c in configs}
    if len(dims) != 1:
        raise DimensionError(f"systems disagree on ambient dimension: {sorted(dims)}")
    out_dir = Path(out_dir)
    entries, trajectories = [], []
    for offset, config in enumerate(tqdm(configs, desc="simulate", disable=not progress)):
        index = index_offset + offset
        sid = system_id(config, index)
        trajectory = simulate_mkv(config, system_index=index)
        paths = []
        for k, marginal in enumerate(trajectory.marginals):
            path = out_dir / "systems" / sid / f"t{k:03d}.m2m"
            save_pointcloud(marginal, path)
            paths.append(path)
        for k in range(len(paths) - 1):
            entries.append({"source": paths[k], "target": paths[k + 1], "tag": f"{sid}:t={k}"})
        trajectories.append({"system": sid, "times": trajectory.times, "marginals": paths})
        logger.info("Simulated %s: %d marginals of %d particles", sid, len(trajectory), config.n_particles)
    return write_manifest(entries, dims.pop(), out_dir / manifest_name, trajectories)


def emit_corruption_dataset(targets, config, out_dir, manifest_name="dataset.json"):
    """Pairs (corrupted, clean) for each target cloud, optionally shuffling particles"""
    if not targets:
        raise ValueError("need at least one target cloud")
    dims = {t.d for t in targets}
    if len(dims) != 1:
        raise DimensionError(f"targets disagree on ambient dimension: {sorted(dims)}")
    out_dir = Path(out_dir)
    entries = []
    for i, target in enumerate(targets):
        rng = np.random.default_rng([config.seed, i])
        source = corrupt(target, config, rng)
        if config.shuffle:
            source = PointCloud(source.points[rng.permutation(source.n)])
        source_path = out_dir / "objects" / f"{i:03d}" / "source.m2m"
        target_path = out_dir / "objects" / f"{i:03d}" / "target.m2m"
        save_pointcloud(source, source_path)
        save_pointcloud(target, target_path)
        entries.append({"source": source_path, "target": target_path, "tag": f"{config.process}-{i:03d}"})
    return write_manifest(entries, dims.pop(), out_dir / manifest_name)
