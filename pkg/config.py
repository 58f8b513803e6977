import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

LOSS_KINDS = ("mmd", "ed", "w1", "w2", "otmse", "tfm")
STATIC_LOSS_KINDS = ("mmd", "ed", "w1", "w2", "otmse")
SCHEDULES = ("constant", "linear")
ARCHITECTURES = ("transformer", "mlp")
SYSTEMS = ("kuramoto", "fitzhugh_nagumo", "atlas")
CORRUPTIONS = ("diffusion", "kernel")

# Per-system simulation defaults
SYSTEM_SIGMA = {"kuramoto": 0.2, "fitzhugh_nagumo": 0.1, "atlas": 0.5}


def _require(condition, section, name, message):
    if not condition:
        raise ConfigError(f"{section}.{name}", message)


@dataclass(frozen=True)
class ModelConfig:
    ambient_dim: int
    hidden_dim: int = 512
    num_layers: int = 5
    num_heads: int = 4
    fourier_frequencies: int = 128
    fourier_scale: float = 1.0
    time_embed_dim: int = 128
    dropout_rate: float = 0.1
    mlp_ratio: int = 4
    time_conditioned: bool = True
    arch: str = "transformer"
    seed: int = 0

    def __post_init__(self):
        _require(self.ambient_dim >= 1, "model", "ambient_dim", "must be >= 1")
        _require(self.hidden_dim >= 1, "model", "hidden_dim", "must be >= 1")
        _require(self.num_layers >= 1, "model", "num_layers", "must be >= 1")
        _require(self.num_heads >= 1 and self.hidden_dim % self.num_heads == 0,
                 "model", "num_heads", "hidden_dim must be divisible by num_heads")
        _require(self.fourier_frequencies >= 1, "model", "fourier_frequencies", "must be >= 1")
        _require(self.time_embed_dim >= 2 and self.time_embed_dim % 2 == 0,
                 "model", "time_embed_dim", "must be a positive even number")
        _require(0.0 <= self.dropout_rate < 1.0, "model", "dropout_rate", "must lie in [0, 1)")
        _require(self.arch in ARCHITECTURES, "model", "arch", f"must be one of {ARCHITECTURES}")


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str
    lr: float
    schedule: str = "linear"
    start_factor: float = 1.0
    end_factor: float = 0.01
    measure_batch: int = 16
    particle_batch: int = 128
    use_ot_coupling: bool = True
    iterations: int = 1000
    epochs: Optional[int] = None
    seed: int = 0
    # Sinkhorn regularization as a multiple of the mean cost
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-6
    mmd_gamma: float = 0.05
    eval_every: int = 0
    eval_steps: int = 100
    holdout_fraction: float = 0.1

    def __post_init__(self):
        _require(self.loss_kind in LOSS_KINDS, "train", "loss_kind", f"must be one of {LOSS_KINDS}")
        _require(self.lr > 0, "train", "lr", "must be > 0")
        _require(self.schedule in SCHEDULES, "train", "schedule", f"must be one of {SCHEDULES}")
        _require(self.measure_batch >= 1, "train", "measure_batch", "must be >= 1")
        _require(self.particle_batch >= 2, "train", "particle_batch",
                 "distributional losses need at least 2 particles")
        _require(self.iterations >= 1, "train", "iterations", "must be >= 1")
        _require(self.epochs is None or self.epochs >= 1, "train", "epochs", "must be >= 1")
        _require(self.sinkhorn_epsilon > 0, "train", "sinkhorn_epsilon", "must be > 0")
        _require(self.sinkhorn_iters >= 1, "train", "sinkhorn_iters", "must be >= 1")
        _require(self.mmd_gamma > 0, "train", "mmd_gamma", "must be > 0")
        _require(self.eval_every >= 0, "train", "eval_every", "must be >= 0")
        _require(self.eval_steps >= 1, "train", "eval_steps", "must be >= 1")
        _require(0.0 <= self.holdout_fraction < 1.0, "train", "holdout_fraction", "must lie in [0, 1)")
        # OT-MSE is only defined on OT-coupled batches
        _require(self.loss_kind != "otmse" or self.use_ot_coupling, "train", "use_ot_coupling",
                 "loss_kind 'otmse' requires OT couplings")

    @property
    def is_static(self):
        return self.loss_kind in STATIC_LOSS_KINDS

    def resolve_iterations(self, n_pairs):
        """Number of optimizer steps, converting epochs when given"""
        if self.epochs is None:
            return self.iterations
        return self.epochs * -(-n_pairs // self.measure_batch)


@dataclass(frozen=True)
class SdeConfig:
    system: str
    d: int = 2
    n_particles: int = 500
    n_timepoints: int = 100
    t_end: Optional[float] = None
    sigma: Optional[float] = None
    substeps: int = 1
    seed: int = 0

    def __post_init__(self):
        _require(self.system in SYSTEMS, "data.systems", "system", f"must be one of {SYSTEMS}")
        _require(self.d >= 1, "data.systems", "d", "must be >= 1")
        _require(self.n_particles >= 1, "data.systems", "n_particles", "must be >= 1")
        _require(self.n_timepoints >= 2, "data.systems", "n_timepoints", "must be >= 2")
        _require(self.substeps >= 1, "data.systems", "substeps", "must be >= 1")
        if self.t_end is None:
            object.__setattr__(self, "t_end", default_t_end(self.system, self.d))
        if self.sigma is None:
            object.__setattr__(self, "sigma", SYSTEM_SIGMA[self.system])
        _require(self.t_end > 0, "data.systems", "t_end", "must be > 0")
        _require(self.sigma >= 0, "data.systems", "sigma", "must be >= 0")

    @property
    def dt(self):
        return self.t_end / (self.n_timepoints - 1)


def default_t_end(system, d):
    if system == "kuramoto":
        return 5.0
    if system == "fitzhugh_nagumo":
        return 4.0 if d == 2 else 10.0
    return 2.0


@dataclass(frozen=True)
class CorruptionConfig:
    process: str = "kernel"
    eta: float = 0.3
    sigma: float = 0.001
    h: float = 0.75
    dt: float = 0.05
    steps: int = 50
    noise_scale: float = 1.0
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        _require(self.process in CORRUPTIONS, "data.corruption", "process", f"must be one of {CORRUPTIONS}")
        _require(self.eta >= 0, "data.corruption", "eta", "must be >= 0")
        _require(self.sigma >= 0, "data.corruption", "sigma", "must be >= 0")
        _require(self.h > 0, "data.corruption", "h", "must be > 0")
        _require(self.dt > 0, "data.corruption", "dt", "must be > 0")
        _require(self.steps >= 1, "data.corruption", "steps", "must be >= 1")
        _require(self.noise_scale >= 0, "data.corruption", "noise_scale", "must be >= 0")


def from_section(cls, data, section):
    """Build a config dataclass from a JSON object, naming offending fields"""
    if not isinstance(data, dict):
        raise ConfigError(section, "expected a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown field")
    for name, f in known.items():
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if required and name not in data:
            raise ConfigError(f"{section}.{name}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(section, str(e))


def expand_systems(entries, section="data.systems"):
    """Expand `replicates` into consecutive SdeConfig entries"""
    if not isinstance(entries, list) or not entries:
        raise ConfigError(section, "expected a non-empty list")
    configs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"{section}[{i}]", "expected a JSON object")
        entry = dict(entry)
        replicates = entry.pop("replicates", 1)
        if not isinstance(replicates, int) or replicates < 1:
            raise ConfigError(f"{section}[{i}].replicates", "must be a positive integer")
        base = from_section(SdeConfig, entry, f"{section}[{i}]")
        configs.extend([base] * replicates)
    return configs


@dataclass
class RunConfig:
    model: Optional[ModelConfig] = None
    train: Optional[TrainConfig] = None
    data: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out_dir: Optional[Path] = None
    source_path: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    def resolve_path(self, value):
        """Resolve a data path relative to the config file"""
        path = Path(value)
        if path.is_absolute() or self.source_path is None:
            return path
        return self.source_path.parent / path

    def to_dict(self):
        return {
            "model": dataclasses.asdict(self.model) if self.model else None,
            "train": dataclasses.asdict(self.train) if self.train else None,
            "data": self.data,
            "eval": self.eval,
            "out_dir": str(self.out_dir) if self.out_dir else None,
        }


RUN_SECTIONS = ("model", "train", "data", "eval", "out_dir")


def load_run_config(path, require=()):
    """Read a RunConfig JSON file; `require` lists sections that must be present"""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "expected a JSON object")
    for key in raw:
        if key not in RUN_SECTIONS:
            raise ConfigError(key, "unknown section")
    for section in require:
        if section not in raw:
            raise ConfigError(section)

    run = RunConfig(source_path=path, raw=raw)
    if "model" in raw:
        run.model = from_section(ModelConfig, raw["model"], "model")
    if "train" in raw:
        run.train = from_section(TrainConfig, raw["train"], "train")
    run.data = raw.get("data", {})
    run.eval = raw.get("eval", {})
    if not isinstance(run.data, dict):
        raise ConfigError("data", "expected a JSON object")
    if "out_dir" in raw:
        run.out_dir = run.resolve_path(raw["out_dir"])
    return run


def env_seed():
    """Seed from M2M_SEED, or None when unset"""
    value = os.getenv("M2M_SEED")
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError("M2M_SEED", f"not an integer: {value!r}")


def resolve_seed(flag_seed, config_seed):
    """Seed precedence: flag > environment > config"""
    if flag_seed is not None:
        return flag_seed
    seed = env_seed()
    if seed is not None:
        return seed
    return config_seed


def apply_seed(run, flag_seed=None):
    """Apply the resolved seed to every seeded section of a RunConfig"""
    if run.train is not None:
        run.train = dataclasses.replace(run.train, seed=resolve_seed(flag_seed, run.train.seed))
    if run.model is not None:
        run.model = dataclasses.replace(run.model, seed=resolve_seed(flag_seed, run.model.seed))
    override = flag_seed if flag_seed is not None else env_seed()
    if override is not None:
        for key in ("systems", "test_systems"):
            for entry in run.data.get(key, []) or []:
                entry["seed"] = override
        if isinstance(run.data.get("corruption"), dict):
            run.data["corruption"]["seed"] = override
    return run


def write_frozen_config(run, out_dir):
    """Write the resolved config next to the run's outputs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True, default=str))
    return path


def log_level():
    return os.getenv("M2M_LOG_LEVEL", "INFO").upper()


def num_threads():
    value = os.getenv("M2M_THREADS")
    return int(value) if value else None
