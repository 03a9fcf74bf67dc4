"""Stage 2: conditional latent diffusion that renders ego frames.

The denoiser is a small DiT-style transformer that takes the noisy latent
concatenated channel-wise with the condition (encoded exo frame and encoded
ego layout render) and predicts the *clean* latent. Training minimizes
``||z - zhat(alpha_n z + sigma_n eps, d)||^2``; samplers convert the clean
prediction into an implied noise estimate internally.

Tensors are channel-last: latents are ``(B, h, w, c)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt_io
from .errors import ConfigError, InputDomainError, NonFiniteLossError, ScheduleError
from .layers import Attention, Mlp, patchify, unpatchify
from .training import OptimConfig, apply_gradients, build_optimizer

# --------------------------------------------------------------------------
# Noise schedule


@dataclass
class NoiseSchedule:
    kind: str
    steps: int
    params: dict
    alpha_bar: np.ndarray  # (steps+1,), alpha_bar[0] = 1

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def betas(self) -> np.ndarray:
        """Per-step betas, index 1..steps (index 0 is 0)."""
        b = np.zeros(self.steps + 1)
        b[1:] = 1.0 - self.alpha_bar[1:] / self.alpha_bar[:-1]
        return b

    def to_json(self) -> dict:
        return {"kind": self.kind, "steps": self.steps, "params": dict(self.params)}

    @classmethod
    def from_json(cls, doc: dict) -> "NoiseSchedule":
        return build_schedule(doc["kind"], doc["steps"], **doc.get("params", {}))


def build_schedule(kind: str = "linear_beta", steps: int = 1000, **params) -> NoiseSchedule:
    """Variance-preserving schedule tables for ``n = 0..steps``.

    ``linear_beta``: betas linearly spaced in ``[beta_min, beta_max]``.
    ``cosine``: ``alpha_bar(n) = f(n)/f(0)``, ``f(n) = cos^2((n/N + s)/(1 + s) * pi/2)``
    with per-step betas clipped at ``max_beta``.
    """
    if steps < 1:
        raise ConfigError("diffusion steps must be >= 1")
    if kind == "linear_beta":
        p = {"beta_min": 1e-4, "beta_max": 0.02, **params}
        lo, hi = p["beta_min"], p["beta_max"]
        if not (0.0 < lo < 1.0 and 0.0 < hi < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got [{lo}, {hi}]")
        betas = np.linspace(lo, hi, steps, dtype=np.float64)
    elif kind == "cosine":
        p = {"s": 0.008, "max_beta": 0.999, **params}
        if not (0.0 < p["max_beta"] < 1.0) or p["s"] < 0:
            raise ConfigError(f"invalid cosine schedule params {p}")
        n = np.arange(steps + 1, dtype=np.float64)
        f = np.cos((n / steps + p["s"]) / (1 + p["s"]) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-12, p["max_beta"])
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, steps, p, alpha_bar)


def _coef(table: np.ndarray, n, like: torch.Tensor) -> torch.Tensor:
    vals = torch.as_tensor(table, dtype=like.dtype)[torch.as_tensor(n)]
    return vals.reshape(-1, *([1] * (like.ndim - 1))) if vals.ndim else vals


def forward_diffuse(z, n, eps, schedule: NoiseSchedule):
    """``alpha_n z + sigma_n eps``; ``n`` is an int or a per-example ``(B,)`` tensor."""
    z = torch.as_tensor(z)
    eps = torch.as_tensor(eps, dtype=z.dtype)
    if z.shape != eps.shape:
        raise InputDomainError(f"latent {tuple(z.shape)} vs noise {tuple(eps.shape)}")
    return _coef(schedule.alpha, n, z) * z + _coef(schedule.sigma, n, z) * eps


# --------------------------------------------------------------------------
# Latent codecs


class IdentityCodec:
    """Latent = frame. Round trip is exact."""

    factor = 1

    def encode(self, frames):
        return torch.as_tensor(frames)

    def decode(self, latents):
        return torch.as_tensor(latents)


class AvgPoolCodec:
    """Fixed ``f x f`` average-pool encoder with nearest-neighbour decoder."""

    def __init__(self, factor: int = 4):
        self.factor = factor

    def encode(self, frames):
        x = torch.as_tensor(frames)
        squeeze = x.ndim == 3
        x = x[None] if squeeze else x
        b, h, w, c = x.shape
        f = self.factor
        if h % f or w % f:
            raise InputDomainError(f"{h}x{w} not divisible by codec factor {f}")
        out = x.reshape(b, h // f, f, w // f, f, c).mean(dim=(2, 4))
        return out[0] if squeeze else out

    def decode(self, latents):
        z = torch.as_tensor(latents)
        f = self.factor
        return z.repeat_interleave(f, dim=-3).repeat_interleave(f, dim=-2)


CODECS = {"identity": IdentityCodec, "avgpool4": lambda: AvgPoolCodec(4)}


def make_codec(name: str):
    try:
        return CODECS[name]()
    except KeyError:
        raise ConfigError(f"unknown codec {name!r}; choose from {sorted(CODECS)}") from None


def build_condition(codec, exo_frames, layout_renders):
    """Channel-wise concatenation of the encoded exo frame and encoded layout."""
    return torch.cat([codec.encode(exo_frames), codec.encode(layout_renders)], dim=-1)


# --------------------------------------------------------------------------
# Denoiser


@dataclass
class DenoiserConfig:
    latent_height: int = 32
    latent_width: int = 32
    latent_channels: int = 3
    cond_channels: int = 6
    patch_size: int = 2
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    freq_dim: int = 64
    zero_init: bool = True

    def __post_init__(self):
        p = self.patch_size
        if self.latent_height % p or self.latent_width % p:
            raise InputDomainError("latent size must be divisible by the patch size")
        if self.dim % self.heads:
            raise InputDomainError("dim must be divisible by heads")


def timestep_embedding(n, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of (possibly fractional) step indices ``n``."""
    n = torch.as_tensor(n, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = n[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def sincos_2d(dim: int, gh: int, gw: int) -> torch.Tensor:
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(gh, dtype=torch.float64), torch.arange(gw, dtype=torch.float64), indexing="ij")
    parts = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        out = pos[:, None] * omega[None]
        parts += [torch.sin(out), torch.cos(out)]
    emb = torch.cat(parts, dim=1)
    if emb.shape[1] < dim:
        emb = torch.cat([emb, torch.zeros(emb.shape[0], dim - emb.shape[1], dtype=emb.dtype)], dim=1)
    return emb.float()


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    """Transformer block with adaptive layer norm driven by the timestep embedding."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x, t):
        s1, sc1, g1, s2, sc2, g2 = self.ada(t).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(_modulate(self.norm1(x), s1, sc1))
        return x + g2[:, None] * self.mlp(_modulate(self.norm2(x), s2, sc2))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = c = config
        p = c.patch_size
        self.gh, self.gw = c.latent_height // p, c.latent_width // p
        self.embed = nn.Linear(p * p * (c.latent_channels + c.cond_channels), c.dim)
        self.register_buffer("pos_embed", sincos_2d(c.dim, self.gh, self.gw), persistent=False)
        self.t_embed = nn.Sequential(nn.Linear(c.freq_dim, c.dim), nn.SiLU(), nn.Linear(c.dim, c.dim))
        self.blocks = nn.ModuleList(DiTBlock(c.dim, c.heads, c.mlp_ratio) for _ in range(c.depth))
        self.final_norm = nn.LayerNorm(c.dim, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(c.dim, 2 * c.dim))
        self.out = nn.Linear(c.dim, p * p * c.latent_channels)
        self._init(c.zero_init)

    def _init(self, zero: bool):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.t_embed[0].weight, std=0.02)
        nn.init.normal_(self.t_embed[2].weight, std=0.02)
        if zero:
            for block in self.blocks:
                nn.init.zeros_(block.ada[1].weight)
                nn.init.zeros_(block.ada[1].bias)
            nn.init.zeros_(self.final_ada[1].weight)
            nn.init.zeros_(self.final_ada[1].bias)
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, z_n, d, n):
        """Predict the clean latent from noisy ``z_n`` ``(B,h,w,c)``, condition
        ``d`` ``(B,h,w,c_cond)`` and step ``n`` (int or ``(B,)``)."""
        c = self.config
        if z_n.shape[:3] != d.shape[:3] or z_n.shape[-1] != c.latent_channels or d.shape[-1] != c.cond_channels:
            raise InputDomainError(f"latent {tuple(z_n.shape)} / condition {tuple(d.shape)} mismatch config")
        b = z_n.shape[0]
        x = self.embed(patchify(torch.cat([z_n, d], dim=-1), c.patch_size)) + self.pos_embed.to(z_n.dtype)
        n = torch.as_tensor(n).reshape(-1).expand(b) if torch.as_tensor(n).numel() == 1 else torch.as_tensor(n)
        t = self.t_embed(timestep_embedding(n, c.freq_dim).to(z_n.dtype))
        for block in self.blocks:
            x = block(x, t)
        shift, scale = self.final_ada(t).chunk(2, dim=-1)
        x = self.out(_modulate(self.final_norm(x), shift, scale))
        return unpatchify(x, c.patch_size, c.latent_height, c.latent_width, c.latent_channels)


def denoise_predict(model, z_n, d, n):
    return model(z_n, d, n)


Predictor = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def diffusion_loss(predictor: Predictor, z, d, n, eps, schedule: NoiseSchedule):
    """Mean squared error between ``z`` and the prediction from its noised version."""
    z_n = forward_diffuse(z, n, eps, schedule)
    return ((z - predictor(z_n, d, n)) ** 2).mean()


# --------------------------------------------------------------------------
# Sampling


def sample(
    predictor: Predictor,
    d,
    schedule: NoiseSchedule,
    seed: int | torch.Generator = 0,
    sampler: str = "deterministic",
    steps: Sequence[int] | int | None = None,
    latent_shape: tuple[int, int, int] | None = None,
):
    """Draw latents for conditions ``d`` ``(B, h, w, c_cond)``.

    Starts from unit Gaussian noise at ``n = N`` and walks down to ``n = 0``.
    ``steps`` selects a decreasing subsequence of timesteps (``None`` = all
    ``N..1``; an int = that many evenly spaced steps). ``sampler`` is
    ``"deterministic"`` (eta = 0) or ``"ancestral"`` (posterior sampling with
    the lower-bound variance).
    """
    if sampler not in ("deterministic", "ancestral"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    d = torch.as_tensor(d)
    if latent_shape is None:
        shape = getattr(getattr(predictor, "config", None), "latent_channels", None)
        latent_shape = (*d.shape[1:3], shape if shape is not None else d.shape[-1] // 2)
    seq = _timesteps(schedule.steps, steps)
    alpha = schedule.alpha
    sigma = schedule.sigma
    z = torch.randn((d.shape[0], *latent_shape), generator=gen, dtype=torch.float64).to(d.dtype)
    for n, m in zip(seq[:-1], seq[1:]):
        if sigma[n] == 0.0:
            raise ScheduleError(f"sigma is zero at step {n}; cannot recover the noise estimate")
        z_hat = predictor(z, d, n)
        eps_hat = (z - alpha[n] * z_hat) / sigma[n]
        if sampler == "deterministic" or m == 0:
            z = alpha[m] * z_hat + sigma[m] * eps_hat
        else:
            a_nm = alpha[n] / alpha[m]
            beta = 1.0 - a_nm**2
            mean = (alpha[m] * beta / sigma[n] ** 2) * z_hat + (a_nm * sigma[m] ** 2 / sigma[n] ** 2) * z
            std = math.sqrt(beta * sigma[m] ** 2 / sigma[n] ** 2)
            z = mean + std * torch.randn(z.shape, generator=gen, dtype=torch.float64).to(z.dtype)
    return z


def _timesteps(total: int, steps) -> list[int]:
    if steps is None:
        seq = list(range(total, 0, -1))
    elif isinstance(steps, int):
        if steps < 1:
            raise ConfigError("need at least one sampling step")
        seq = sorted({int(round(x)) for x in np.linspace(total, 1, min(steps, total))}, reverse=True)
    else:
        seq = sorted({int(s) for s in steps}, reverse=True)
        if seq[0] != total or seq[-1] < 1:
            raise ConfigError("explicit timesteps must start at N and stay >= 1")
    return seq + [0]


# --------------------------------------------------------------------------
# Training


@dataclass
class DenoiserState:
    config: DenoiserConfig
    model: Denoiser
    schedule: NoiseSchedule
    optim: OptimConfig = field(default_factory=OptimConfig)
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = build_optimizer(self.model, self.optim)


def init_denoiser(
    config: DenoiserConfig, schedule: NoiseSchedule, seed: int = 0, optim: OptimConfig | None = None
) -> DenoiserState:
    torch.manual_seed(seed)
    return DenoiserState(config, Denoiser(config), schedule, optim or OptimConfig())


@dataclass
class DiffusionBatch:
    z: torch.Tensor  # (B,h,w,c) target latents
    d: torch.Tensor  # (B,h,w,c_cond) conditions


def collate_diffusion_batch(examples, codec) -> DiffusionBatch:
    """``[(ego_frame, exo_frame, ego_layout_render), ...]`` -> encoded tensors."""
    ego = torch.as_tensor(np.stack([np.asarray(e[0], dtype=np.float32) for e in examples]))
    exo = torch.as_tensor(np.stack([np.asarray(e[1], dtype=np.float32) for e in examples]))
    lay = torch.as_tensor(np.stack([np.asarray(e[2], dtype=np.float32) for e in examples]))
    return DiffusionBatch(codec.encode(ego), build_condition(codec, exo, lay))


def draw_noise(batch: DiffusionBatch, schedule: NoiseSchedule, gen: torch.Generator):
    n = torch.randint(1, schedule.steps + 1, (batch.z.shape[0],), generator=gen)
    eps = torch.randn(batch.z.shape, generator=gen, dtype=batch.z.dtype)
    return n, eps


def train_step_diffusion(state: DenoiserState, batch, gen: torch.Generator, codec=None, dump_path=None) -> float:
    """One optimizer step on the denoising loss with uniformly drawn ``n`` and ``eps``."""
    if not isinstance(batch, DiffusionBatch):
        batch = list(batch)
        if not batch:
            raise InputDomainError("empty training batch")
        batch = collate_diffusion_batch(batch, codec or IdentityCodec())
    state.model.train()
    n, eps = draw_noise(batch, state.schedule, gen)
    loss = diffusion_loss(state.model, batch.z, batch.d, n, eps, state.schedule)
    value = float(loss.detach())
    if not math.isfinite(value):
        if dump_path is not None:
            save_denoiser(state, dump_path)
        raise NonFiniteLossError(f"diffusion loss {value} at step {state.step}", state.step, dump_path)
    apply_gradients(state.model, state.optimizer, loss, state.optim)
    state.step += 1
    return value


def save_denoiser(state: DenoiserState, path) -> Path:
    arrays = ckpt_io.module_arrays(state.model)
    arrays.update(ckpt_io.optimizer_arrays(state.model, state.optimizer))
    extra = {"optim": asdict(state.optim), "schedule": state.schedule.to_json()}
    return ckpt_io.save_checkpoint(path, ckpt_io.Checkpoint("denoiser", asdict(state.config), state.step, arrays, extra))


def load_denoiser(path) -> DenoiserState:
    ck = ckpt_io.load_checkpoint(path)
    if ck.kind != "denoiser":
        raise ValueError(f"{path}: expected a denoiser checkpoint, got {ck.kind!r}")
    config = DenoiserConfig(**ck.config)
    optim = OptimConfig(**ck.extra.get("optim", {}))
    optim.betas = tuple(optim.betas)
    model = Denoiser(config)
    ckpt_io.load_module_arrays(model, ck.arrays)
    state = DenoiserState(config, model, NoiseSchedule.from_json(ck.extra["schedule"]), optim, ck.step)
    ckpt_io.load_optimizer_arrays(model, state.optimizer, ck.arrays)
    return state
