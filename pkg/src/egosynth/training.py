"""Optimizer settings and per-step seeding shared by both training stages."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0


def build_optimizer(module: torch.nn.Module, cfg: OptimConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        module.parameters(), lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def step_generator(seed: int, tag: str, step: int) -> torch.Generator:
    """Generator for one training step.

    Seeding from ``(seed, tag, step)`` instead of carrying RNG state means a
    run resumed from a checkpoint draws exactly the batches and noise an
    uninterrupted run would.
    """
    return torch.Generator().manual_seed(derive_seed(seed, tag, step))


def apply_gradients(module, optimizer, loss, cfg: OptimConfig) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(module.parameters(), cfg.grad_clip)
    optimizer.step()


def is_finite(value: float) -> bool:
    return math.isfinite(value)
