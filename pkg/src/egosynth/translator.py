"""Stage 1: transformer encoder-decoder from (exo frame, exo layout) to an ego layout.

Two heads share the encoder/decoder trunk:

* ``pose`` mode regresses ``E`` joints in ``[0, 1]^2`` and is trained with a
  bipartite (Hungarian) matched L1 loss;
* ``mask`` mode decodes one query per patch into a ``P x P x 2`` logit tile
  and is trained with per-pixel cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt_io
from .data import MaskLayout, PoseLayout, render_layout
from .errors import InputDomainError, NonFiniteLossError
from .layers import DecoderBlock, EncoderBlock, patchify
from .matching import hungarian, l1_cost_matrix
from .training import OptimConfig, apply_gradients, build_optimizer

log = logging.getLogger(__name__)


@dataclass
class TranslatorConfig:
    height: int = 256
    width: int = 256
    patch_size: int = 16
    dim: int = 192
    encoder_blocks: int = 6
    decoder_blocks: int = 6
    heads: int = 3
    mlp_ratio: float = 4.0
    num_queries: int | None = 42
    frame_channels: int = 3
    layout_channels: int = 3
    mode: str = "pose"

    def __post_init__(self):
        p = self.patch_size
        if self.height % p or self.width % p:
            raise InputDomainError(f"frame {self.height}x{self.width} not divisible by patch {p}")
        if self.dim % self.heads:
            raise InputDomainError("dim must be divisible by heads")
        if self.mode not in ("pose", "mask"):
            raise InputDomainError(f"unknown translator mode {self.mode!r}")
        if self.mode == "mask" or self.num_queries is None:
            self.num_queries = self.num_patches

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def in_channels(self) -> int:
        return self.frame_channels + self.layout_channels


class LayoutTranslator(nn.Module):
    def __init__(self, config: TranslatorConfig):
        super().__init__()
        self.config = c = config
        p = c.patch_size
        self.patch_embed = nn.Linear(p * p * c.in_channels, c.dim)
        self.pos_embed = nn.Parameter(torch.randn(c.num_patches, c.dim) * 0.02)
        self.encoder = nn.ModuleList(EncoderBlock(c.dim, c.heads, c.mlp_ratio) for _ in range(c.encoder_blocks))
        self.memory_norm = nn.LayerNorm(c.dim)
        self.queries = nn.Parameter(torch.randn(c.num_queries, c.dim) * 0.02)
        self.decoder = nn.ModuleList(DecoderBlock(c.dim, c.heads, c.mlp_ratio) for _ in range(c.decoder_blocks))
        self.head_norm = nn.LayerNorm(c.dim)
        out = 2 if c.mode == "pose" else p * p * 2
        self.head = nn.Linear(c.dim, out)
        self.apply(_init_weights)

    def patchify(self, frame, layout):
        """Concatenate ``(B,H,W,C1)`` and ``(B,H,W,C2)`` channel-wise and embed
        the ``M`` row-major patches, adding the learned position embedding."""
        c = self.config
        if frame.shape[:3] != layout.shape[:3]:
            raise InputDomainError(f"frame {tuple(frame.shape)} and layout {tuple(layout.shape)} differ in size")
        if frame.shape[1:] != (c.height, c.width, c.frame_channels) or layout.shape[3] != c.layout_channels:
            raise InputDomainError(
                f"expected frame (B,{c.height},{c.width},{c.frame_channels}) and layout with "
                f"{c.layout_channels} channels, got {tuple(frame.shape)} / {tuple(layout.shape)}"
            )
        x = torch.cat([frame, layout], dim=-1)
        return self.patch_embed(patchify(x, c.patch_size)) + self.pos_embed

    def encode(self, tokens):
        for block in self.encoder:
            tokens = block(tokens)
        return tokens

    def decode_queries(self, contextual):
        memory = self.memory_norm(contextual)
        q = self.queries.expand(contextual.shape[0], -1, -1)
        for block in self.decoder:
            q = block(q, memory)
        return self.head(self.head_norm(q))

    def decode_pose(self, contextual):
        """``(B, M, D)`` -> ``(B, E, 2)`` joints squashed into ``[0, 1]``."""
        return torch.sigmoid(self.decode_queries(contextual))

    def decode_mask(self, contextual):
        """``(B, M, D)`` -> ``(B, H, W, 2)`` logits (non-hand, hand)."""
        c = self.config
        tiles = self.decode_queries(contextual)
        b, p = tiles.shape[0], c.patch_size
        gh, gw = c.height // p, c.width // p
        x = tiles.reshape(b, gh, gw, p, p, 2).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, c.height, c.width, 2)

    def forward(self, frame, layout):
        ctx = self.encode(self.patchify(frame, layout))
        return self.decode_pose(ctx) if self.config.mode == "pose" else self.decode_mask(ctx)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# Losses


def bipartite_match_loss(pred, gt):
    """Matched mean L1 between predicted joints ``(E, 2)`` and visible ground truth.

    ``gt`` is a :class:`PoseLayout` or a ``(G, 2)`` array of visible joints.
    Returns ``(loss, assignment)`` where ``assignment[g]`` is the prediction
    index matched to ground-truth joint ``g``. The assignment is computed on
    detached costs; gradients flow only through the matched pairs.
    """
    target = gt.visible_joints() if isinstance(gt, PoseLayout) else np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(target) == 0:
        return pred.sum() * 0.0, np.zeros(0, dtype=int)
    if len(target) > pred.shape[0]:
        raise InputDomainError(f"{len(target)} visible joints exceed {pred.shape[0]} predictions")
    # Non-finite predictions still get a valid matching so the loss itself
    # comes out non-finite and the caller can report it.
    cost = np.nan_to_num(l1_cost_matrix(target, pred.detach().cpu().numpy()), nan=1e30, posinf=1e30)
    cols = hungarian(cost)
    t = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    loss = (pred[torch.as_tensor(cols)] - t).abs().sum(-1).mean()
    return loss, cols


def pose_batch_loss(pred, targets, assignments=None):
    """Mean of per-frame matched losses. ``assignments`` (one per frame) may be
    supplied to freeze the matching, e.g. for finite-difference checks."""
    losses, used = [], []
    for i, gt in enumerate(targets):
        if assignments is None:
            loss, cols = bipartite_match_loss(pred[i], gt)
        else:
            cols = np.asarray(assignments[i], dtype=int)
            t = torch.as_tensor(np.asarray(gt, dtype=np.float64).reshape(-1, 2), dtype=pred.dtype)
            loss = (pred[i][torch.as_tensor(cols)] - t).abs().sum(-1).mean() if len(cols) else pred.sum() * 0.0
        losses.append(loss)
        used.append(cols)
    return torch.stack(losses).mean(), used


def mask_probabilities(logits):
    return torch.softmax(logits, dim=-1)


def mask_ce_loss(logits, gt):
    """Mean per-pixel cross-entropy; ``gt`` is ``(B,H,W)``/``(H,W)`` labels or a MaskLayout."""
    if isinstance(gt, MaskLayout):
        gt = torch.as_tensor(gt.mask, dtype=torch.long)
    gt = torch.as_tensor(gt).long()
    if logits.shape[:-1] != gt.shape:
        raise InputDomainError(f"logits {tuple(logits.shape)} vs mask {tuple(gt.shape)}")
    return F.cross_entropy(logits.reshape(-1, 2), gt.reshape(-1))


# --------------------------------------------------------------------------
# Training state


@dataclass
class TranslatorState:
    config: TranslatorConfig
    model: LayoutTranslator
    optim: OptimConfig = field(default_factory=OptimConfig)
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = build_optimizer(self.model, self.optim)


def init_translator(config: TranslatorConfig, seed: int = 0, optim: OptimConfig | None = None) -> TranslatorState:
    torch.manual_seed(seed)
    model = LayoutTranslator(config)
    return TranslatorState(config, model, optim or OptimConfig())


@dataclass
class LayoutBatch:
    frames: torch.Tensor  # (B,H,W,C1)
    layouts: torch.Tensor  # (B,H,W,C2)
    targets: list  # pose: list of (G,2) arrays; mask: (B,H,W) long tensor


def collate_layout_batch(examples, config: TranslatorConfig) -> LayoutBatch:
    """Turn ``[(exo_frame, exo_layout, ego_layout), ...]`` into tensors."""
    frames, layouts, targets = [], [], []
    for frame, exo_layout, ego_layout in examples:
        frames.append(np.asarray(frame, dtype=np.float32))
        layouts.append(render_layout(exo_layout, config.height, config.width).astype(np.float32))
        if config.mode == "pose":
            targets.append(ego_layout.visible_joints())
        else:
            targets.append(ego_layout.mask)
    if config.mode == "mask":
        targets = torch.as_tensor(np.stack(targets), dtype=torch.long)
    return LayoutBatch(torch.from_numpy(np.stack(frames)), torch.from_numpy(np.stack(layouts)), targets)


def layout_loss(model: LayoutTranslator, batch: LayoutBatch):
    out = model(batch.frames, batch.layouts)
    if model.config.mode == "pose":
        return pose_batch_loss(out, batch.targets)[0]
    return mask_ce_loss(out, batch.targets)


def train_step_layout(state: TranslatorState, batch, dump_path=None) -> float:
    """One optimizer step on the layout loss. Mutates ``state`` and returns the loss."""
    if not isinstance(batch, LayoutBatch):
        batch = list(batch)
        if not batch:
            raise InputDomainError("empty training batch")
        batch = collate_layout_batch(batch, state.config)
    state.model.train()
    loss = layout_loss(state.model, batch)
    value = float(loss.detach())
    if not np.isfinite(value):
        if dump_path is not None:
            save_translator(state, dump_path)
        raise NonFiniteLossError(f"layout loss {value} at step {state.step}", state.step, dump_path)
    apply_gradients(state.model, state.optimizer, loss, state.optim)
    state.step += 1
    return value


@torch.no_grad()
def predict_layout(model: LayoutTranslator, frame, exo_layout):
    """Predict the ego layout for one exo frame."""
    c = model.config
    model.eval()
    f = torch.as_tensor(np.asarray(frame, dtype=np.float32))[None]
    lay = torch.as_tensor(render_layout(exo_layout, c.height, c.width).astype(np.float32))[None]
    out = model(f, lay)[0].numpy().astype(np.float64)
    if c.mode == "mask":
        return MaskLayout((out[..., 1] > out[..., 0]).astype(np.uint8))
    return joints_to_layout(out)


def joints_to_layout(joints: np.ndarray, joints_per_hand: int = 21) -> PoseLayout:
    """Group a flat ``(E, 2)`` query output into hands for rendering.

    Queries are not tied to hands during training (matching is global), so
    predictions are grouped by query order, ``joints_per_hand`` at a time.
    """
    from .data import HandPose, SIDES

    joints = np.clip(joints, 0.0, 1.0)
    hands = []
    for h in range(min(2, len(joints) // joints_per_hand)):
        part = joints[h * joints_per_hand:(h + 1) * joints_per_hand]
        hands.append(HandPose(part, np.ones(len(part), dtype=bool), SIDES[h]))
    return PoseLayout(hands)


def save_translator(state: TranslatorState, path) -> Path:
    arrays = ckpt_io.module_arrays(state.model)
    arrays.update(ckpt_io.optimizer_arrays(state.model, state.optimizer))
    return ckpt_io.save_checkpoint(
        path,
        ckpt_io.Checkpoint("translator", asdict(state.config), state.step, arrays, {"optim": asdict(state.optim)}),
    )


def load_translator(path) -> TranslatorState:
    ck = ckpt_io.load_checkpoint(path)
    if ck.kind != "translator":
        raise ValueError(f"{path}: expected a translator checkpoint, got {ck.kind!r}")
    config = TranslatorConfig(**ck.config)
    optim = OptimConfig(**{**ck.extra.get("optim", {})})
    optim.betas = tuple(optim.betas)
    model = LayoutTranslator(config)
    ckpt_io.load_module_arrays(model, ck.arrays)
    state = TranslatorState(config, model, optim, ck.step)
    ckpt_io.load_optimizer_arrays(model, state.optimizer, ck.arrays)
    return state
