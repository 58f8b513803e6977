"""Measure-dependent transformer, MLP baseline, optimizer and checkpoints.

Each point is augmented with learned Fourier features, projected to the hidden
width, passed through AdaLN blocks whose self-attention mixes all particles of
the measure, and projected back to the ambient space. Everything runs in
double precision.
"""
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from config import ModelConfig, from_section
from errors import FormatError, NonFiniteError, TruncatedError
from measures import atomic_write_bytes

torch.set_default_dtype(torch.float64)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"M2MK"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sII")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def fourier_features(x, B):
    """concat(sin(2 pi Bx), cos(2 pi Bx)) for each row of x"""
    proj = 2.0 * math.pi * (x @ B.transpose(0, 1))
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


def time_embedding(t, dim):
    """Sinusoidal embedding with frequencies log-spaced over [1, 1e4]; sines first"""
    if dim % 2:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    freqs = torch.logspace(0.0, 4.0, dim // 2, dtype=torch.float64)
    args = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def modulate(x, shift, scale):
    return x * (1.0 + scale) + shift


def attention_finite(tokens, q, k, v, out, num_heads):
    """Multi-head softmax attention over all H tokens of each measure"""
    *batch, H, h = tokens.shape
    if h % num_heads:
        raise ValueError(f"width {h} is not divisible by {num_heads} heads")
    head_dim = h // num_heads

    def split(proj):
        return proj(tokens).reshape(*batch, H, num_heads, head_dim).transpose(-3, -2)

    Q, K, V = split(q), split(k), split(v)
    logits = Q @ K.transpose(-1, -2) / math.sqrt(head_dim)
    weights = torch.softmax(logits, dim=-1)
    mixed = (weights @ V).transpose(-3, -2).reshape(*batch, H, h)
    return out(mixed)


class FourierFeatures(nn.Module):
    def __init__(self, ambient_dim, num_frequencies, scale=1.0):
        super().__init__()
        self.B = nn.Parameter(torch.randn(num_frequencies, ambient_dim) * scale)

    def forward(self, x):
        return fourier_features(x, self.B)


class MeanFieldAttention(nn.Module):
    def __init__(self, hidden_dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(hidden_dim, hidden_dim)
        self.k = nn.Linear(hidden_dim, hidden_dim)
        self.v = nn.Linear(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, tokens):
        return attention_finite(tokens, self.q, self.k, self.v, self.out, self.num_heads)


class AdaLNBlock(nn.Module):
    """Pre-norm attention + MLP block with time-modulated norms and gates.

    The modulation layer is zero-initialized, so a fresh block is the identity.
    """

    def __init__(self, hidden_dim, num_heads, mlp_ratio=4, dropout_rate=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_dim, elementwise_affine=False, eps=1e-6)
        self.attn = MeanFieldAttention(hidden_dim, num_heads)
        self.attn_dropout = nn.Dropout(dropout_rate)
        self.norm2 = nn.LayerNorm(hidden_dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_dim, mlp_ratio * hidden_dim),
            nn.GELU(approximate="tanh"),
            nn.Dropout(dropout_rate),
            nn.Linear(mlp_ratio * hidden_dim, hidden_dim),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_dim, 6 * hidden_dim))
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, tokens, cond):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(cond).unsqueeze(-2).chunk(6, dim=-1)
        x = tokens + gate1 * self.attn_dropout(self.attn(modulate(self.norm1(tokens), shift1, scale1)))
        return x + gate2 * self.mlp(modulate(self.norm2(x), shift2, scale2))


def adaln_block(tokens, cond, block, train_mode=False):
    block.train(train_mode)
    return block(tokens, cond)


def _check_inputs(points, t, time_conditioned):
    if not torch.isfinite(points).all():
        raise NonFiniteError("model input contains NaN or Inf")
    if time_conditioned and t is None:
        raise ValueError("time-conditioned model needs t")
    if not time_conditioned and t is not None:
        raise ValueError("static model does not take t")


def _batched_time(t, batch):
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if t.numel() == 1:
        t = t.expand(batch)
    if t.numel() != batch:
        raise ValueError(f"got {t.numel()} times for {batch} measures")
    return t


class MeasureTransformer(nn.Module):
    """Maps a measure's particles to per-particle outputs that depend on the whole measure.

    Accepts (N, d) for one measure or (B, N, d) for a batch of equal-size measures.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        d, h = config.ambient_dim, config.hidden_dim
        self.fourier = FourierFeatures(d, config.fourier_frequencies, config.fourier_scale)
        self.input_proj = nn.Linear(d + 2 * config.fourier_frequencies, h)
        if config.time_conditioned:
            self.time_mlp = nn.Sequential(nn.Linear(config.time_embed_dim, h), nn.SiLU(), nn.Linear(h, h))
        else:
            # static maps have no time; a learned constant conditions the blocks
            self.cond = nn.Parameter(torch.randn(h) * 0.02)
        self.blocks = nn.ModuleList([
            AdaLNBlock(h, config.num_heads, config.mlp_ratio, config.dropout_rate)
            for _ in range(config.num_layers)
        ])
        self.output_proj = nn.Linear(h, d)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, points, t=None):
        _check_inputs(points, t, self.config.time_conditioned)
        unbatched = points.dim() == 2
        x = points.unsqueeze(0) if unbatched else points
        tokens = self.input_proj(torch.cat([x, self.fourier(x)], dim=-1))
        if self.config.time_conditioned:
            cond = self.time_mlp(time_embedding(_batched_time(t, x.shape[0]), self.config.time_embed_dim))
        else:
            cond = self.cond.expand(x.shape[0], -1)
        for block in self.blocks:
            tokens = block(tokens, cond)
        out = self.output_proj(tokens)
        return out.squeeze(0) if unbatched else out


class MlpVectorField(nn.Module):
    """Pointwise MLP over [x, time embedding]; particles do not interact"""

    def __init__(self, config):
        super().__init__()
        self.config = config
        width = config.ambient_dim + (config.time_embed_dim if config.time_conditioned else 0)
        layers = []
        for _ in range(config.num_layers):
            layers += [nn.Linear(width, config.hidden_dim), nn.SiLU(), nn.Dropout(config.dropout_rate)]
            width = config.hidden_dim
        self.net = nn.Sequential(*layers)
        self.output_proj = nn.Linear(width, config.ambient_dim)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, points, t=None):
        _check_inputs(points, t, self.config.time_conditioned)
        unbatched = points.dim() == 2
        x = points.unsqueeze(0) if unbatched else points
        if self.config.time_conditioned:
            emb = time_embedding(_batched_time(t, x.shape[0]), self.config.time_embed_dim)
            x = torch.cat([x, emb.unsqueeze(-2).expand(*x.shape[:-1], -1)], dim=-1)
        out = self.output_proj(self.net(x))
        return out.squeeze(0) if unbatched else out


def build_model(config):
    """Instantiate the configured architecture with seed-controlled initialization"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        if config.arch == "mlp":
            model = MlpVectorField(config)
        else:
            model = MeasureTransformer(config)
    return model.double()


def randomize_parameters(model, std=0.5, seed=0):
    """Overwrite every parameter with N(0, std^2) entries, e.g. to break zero-init gates"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
    return model


def transformer_forward(model, points, t=None, train_mode=False):
    model.train(train_mode)
    return model(points, t)


def mlp_forward(model, x, t):
    return model(x, t)


def backward(loss):
    """Accumulate reverse-mode gradients of a scalar loss into the parameters"""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def zero_grad(model):
    for p in model.parameters():
        if p.grad is not None:
            p.grad.zero_()


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(model, optimizer, lr):
    """One Adam update at learning rate `lr`; missing gradients count as zero"""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for group in optimizer.param_groups:
        group["lr"] = lr
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    optimizer.step()


def adam_step_count(optimizer, param):
    state = optimizer.state.get(param, {})
    step = state.get("step", 0)
    return int(step.item() if isinstance(step, torch.Tensor) else step)


@dataclass
class Checkpoint:
    model: nn.Module
    config: ModelConfig
    step: int = 0
    train: Optional[dict] = None
    adam: Optional[dict] = None

    def restore_optimizer(self, optimizer):
        """Load saved Adam moments into an optimizer built over `self.model`"""
        if not self.adam:
            return optimizer
        for name, p in self.model.named_parameters():
            saved = self.adam.get(name)
            if saved is None:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(saved["step"])),
                "exp_avg": saved["exp_avg"].clone(),
                "exp_avg_sq": saved["exp_avg_sq"].clone(),
            }
        return optimizer


def save_checkpoint(path, model, step=0, optimizer=None, train_config=None):
    """JSON header with a section table, followed by float64 tensors"""
    sections = []
    blobs = []
    offset = 0

    def add(name, tensor):
        nonlocal offset
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f8")
        sections.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        blobs.append(array.tobytes())
        offset += array.nbytes

    for name, tensor in model.state_dict().items():
        add(f"param/{name}", tensor)
    adam_steps = {}
    if optimizer is not None:
        for name, p in model.named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            add(f"adam.exp_avg/{name}", state["exp_avg"])
            add(f"adam.exp_avg_sq/{name}", state["exp_avg_sq"])
            adam_steps[name] = adam_step_count(optimizer, p)

    header = {
        "format": "m2m-checkpoint",
        "model": dataclasses.asdict(model.config),
        "train": dataclasses.asdict(train_config) if train_config is not None else None,
        "step": int(step),
        "adam_steps": adam_steps,
        "sections": sections,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    atomic_write_bytes(path, payload + header_bytes + b"".join(blobs))
    logger.debug("Saved checkpoint at step %d to %s", step, path)


def load_checkpoint(path):
    path = Path(path)
    payload = path.read_bytes()
    if len(payload) < CHECKPOINT_HEADER.size:
        raise TruncatedError(f"{path}: file shorter than the checkpoint header")
    magic, version, header_len = CHECKPOINT_HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = CHECKPOINT_HEADER.size
    if len(payload) < start + header_len:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(payload[start:start + header_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: unreadable header: {e}")
    data_start = start + header_len

    tensors = {}
    for section in header["sections"]:
        begin = data_start + section["offset"]
        end = begin + section["count"] * 8
        if len(payload) < end:
            raise TruncatedError(f"{path}: section {section['name']} truncated")
        array = np.frombuffer(payload, dtype="<f8", count=section["count"], offset=begin)
        tensors[section["name"]] = torch.tensor(array.reshape(section["shape"]), dtype=torch.float64)

    config = from_section(ModelConfig, header["model"], "model")
    model = build_model(config)
    state = {name[len("param/"):]: t for name, t in tensors.items() if name.startswith("param/")}
    model.load_state_dict(state)

    adam = {}
    for name, step in header.get("adam_steps", {}).items():
        adam[name] = {
            "step": step,
            "exp_avg": tensors[f"adam.exp_avg/{name}"],
            "exp_avg_sq": tensors[f"adam.exp_avg_sq/{name}"],
        }
    return Checkpoint(model=model, config=config, step=header.get("step", 0),
                      train=header.get("train"), adam=adam or None)
