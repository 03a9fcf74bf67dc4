"""Two-stage training, chained per-frame inference and synthetic fixtures."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import file_sha256
from .data import (
    ClipRecord,
    DatasetManifest,
    HandPose,
    MaskLayout,
    PoseLayout,
    crop_resize,
    load_clip,
    render_layout,
    render_pose_layout,
    save_layout,
    save_manifest,
    save_png,
)
from .diffusion import (
    DenoiserConfig,
    DenoiserState,
    DiffusionBatch,
    build_condition,
    build_schedule,
    init_denoiser,
    load_denoiser,
    make_codec,
    sample,
    save_denoiser,
    train_step_diffusion,
)
from .errors import ConfigError, InputDomainError
from .training import OptimConfig, derive_seed, step_generator
from .translator import (
    LayoutBatch,
    TranslatorConfig,
    TranslatorState,
    init_translator,
    load_translator,
    predict_layout,
    save_translator,
    train_step_layout,
)

log = logging.getLogger(__name__)

LogFn = Callable[[str, int, float], None]


# --------------------------------------------------------------------------
# Configuration


def desk_translator() -> TranslatorConfig:
    return TranslatorConfig(
        height=32, width=32, patch_size=4, dim=64, encoder_blocks=6, decoder_blocks=2, heads=4, num_queries=42
    )


@dataclass
class PipelineConfig:
    translator: TranslatorConfig = field(default_factory=desk_translator)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: dict = field(default_factory=lambda: {"kind": "linear_beta", "steps": 1000, "params": {}})
    codec: str = "identity"
    layout_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-3))
    diffusion_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-3))
    layout_steps: int = 2000
    diffusion_steps: int = 2000
    layout_batch: int = 16
    diffusion_batch: int = 8
    checkpoint_every: int = 500
    keep_last: int = 3
    seed: int = 0
    sampler: str = "deterministic"
    sample_steps: int | None = 50
    seed_mode: str = "index"  # "index" or "content"
    # How ego pose layouts are drawn into the denoiser condition. "joints"
    # draws an unordered set of joint disks, which is all a set-matched
    # prediction determines; "skeleton" also draws bones and handedness.
    condition_render: str = "joints"
    output_size: int | None = None

    def __post_init__(self):
        choices = {
            "sampler": ("deterministic", "ancestral"),
            "seed_mode": ("index", "content"),
            "condition_render": ("joints", "skeleton"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        nested = {
            "translator": TranslatorConfig,
            "denoiser": DenoiserConfig,
            "layout_optim": OptimConfig,
            "diffusion_optim": OptimConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in doc and isinstance(doc[key], dict):
                doc[key] = typ(**doc[key])
                if isinstance(doc[key], OptimConfig):
                    doc[key].betas = tuple(doc[key].betas)
        return cls(**doc)

    def make_schedule(self):
        s = self.schedule
        return build_schedule(s.get("kind", "linear_beta"), s.get("steps", 1000), **s.get("params", {}))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# Synthetic fixtures


@dataclass
class SyntheticFixtureSpec:
    frame_size: int = 32
    videos: int = 4
    frames_per_video: int = 60
    clip_len: int = 30
    amplitude: float = 0.05
    frequency: float = 1.0  # oscillations per clip
    hand_size: float = 0.07
    ego_zoom: float = 1.8
    noise_level: float = 0.01
    seed: int = 0


SKIN = np.array([0.95, 0.76, 0.62])


def hand_template() -> np.ndarray:
    """21 joints of a flat open hand, wrist at the origin, fingers toward -v."""
    joints = [(0.0, 0.0)]
    angles = np.deg2rad([-55.0, -22.0, 0.0, 20.0, 40.0])
    bones = [(0.35, 0.3, 0.25, 0.2), (0.45, 0.3, 0.2, 0.17), (0.48, 0.32, 0.22, 0.18),
             (0.45, 0.3, 0.2, 0.16), (0.4, 0.22, 0.16, 0.14)]
    for ang, lens in zip(angles, bones):
        direction = np.array([np.sin(ang), -np.cos(ang)])
        pos = np.zeros(2)
        for length in lens:
            pos = pos + length * direction
            joints.append(tuple(pos))
    t = np.array(joints)
    return t / np.abs(t).max()


def _hand(center, size, angle, side, curl) -> np.ndarray:
    t = hand_template().copy()
    if side == "left":
        t[:, 0] = -t[:, 0]
    t[1:] *= curl
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(center) + size * t @ rot.T


def _layout(hands: Sequence[np.ndarray]) -> PoseLayout:
    out = []
    for joints, side in zip(hands, ("left", "right")):
        vis = np.all((joints >= 0.0) & (joints <= 1.0), axis=1)
        out.append(HandPose(joints, vis, side))
    return PoseLayout(out)


def fixture_video(spec: SyntheticFixtureSpec, v: int) -> dict:
    """Generate one synthetic exo/ego video in memory (frames, layouts, metadata)."""
    rng = np.random.default_rng(derive_seed(spec.seed, "fixture-video", v))
    size = spec.frame_size
    base = rng.uniform(0.15, 0.6, 3)
    angle = rng.uniform(-0.3, 0.3)
    phases = rng.uniform(0, 2 * np.pi, 4)
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    exo_bg = base[None, None] * (0.75 + 0.5 * ys[..., None])
    table = ys > 0.45
    exo_bg[table] = np.clip(base[::-1] * 0.9 + 0.1, 0, 1)
    torso = ((xs - 0.5) / 0.22) ** 2 + ((ys - 0.22) / 0.2) ** 2 <= 1.0
    exo_bg[torso] = base[[1, 2, 0]] * 0.5
    ego_bg = base[[1, 2, 0]][None, None] * (0.6 + 0.6 * xs[..., None])
    ego_bg = np.clip(ego_bg, 0, 1)
    exo_bg = np.clip(exo_bg, 0, 1)

    frames = {"exo_frames": [], "ego_frames": [], "exo_layouts": [], "ego_layouts": []}
    anchor = np.array([0.5, 0.6])
    ego_anchor = np.array([0.5, 0.62])
    for t in range(spec.frames_per_video):
        w = 2 * np.pi * spec.frequency * t / spec.clip_len
        a = spec.amplitude
        centers = [
            np.array([0.35 + a * np.sin(w + phases[0]), 0.62 + a * np.cos(w + phases[1])]),
            np.array([0.65 + a * np.sin(w + phases[2]), 0.62 + a * np.cos(w + phases[3])]),
        ]
        curl = 0.85 + 0.15 * np.sin(0.5 * w + phases[0])
        exo_hands = [_hand(centers[0], spec.hand_size, angle, "left", curl),
                     _hand(centers[1], spec.hand_size, -angle, "right", curl)]
        ego_hands = [ego_anchor + spec.ego_zoom * (h - anchor) for h in exo_hands]
        exo_layout, ego_layout = _layout(exo_hands), _layout(ego_hands)
        for view, bg, lay in (("exo", exo_bg, exo_layout), ("ego", ego_bg, ego_layout)):
            m = render_pose_layout(lay, size, size).max(axis=-1, keepdims=True)
            img = bg * (1 - m) + SKIN * m
            img = img + spec.noise_level * rng.standard_normal(img.shape)
            frames[f"{view}_frames"].append(np.clip(img, 0.0, 1.0))
            frames[f"{view}_layouts"].append(lay)
    frames["meta"] = {
        "video_id": f"vid{v:02d}",
        "subject_id": f"s{v % 2 + 1}",
        "object_id": f"obj{v}",
        "scene_id": f"sc{v}",
    }
    return frames


def make_fixtures(spec: SyntheticFixtureSpec, out_dir) -> DatasetManifest:
    """Write synthetic videos as PNG/JSON files plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clips = []
    for v in range(spec.videos):
        video = fixture_video(spec, v)
        meta = video["meta"]
        vdir = Path("videos") / meta["video_id"]
        paths: dict[str, list[str]] = {k: [] for k in ("exo_frames", "ego_frames", "exo_layouts", "ego_layouts")}
        for t in range(spec.frames_per_video):
            for view in ("exo", "ego"):
                rel = vdir / view / f"{t:05d}.png"
                save_png(video[f"{view}_frames"][t], out_dir / rel)
                paths[f"{view}_frames"].append(str(rel))
                lrel = vdir / f"{view}_layouts" / f"{t:05d}.json"
                save_layout(video[f"{view}_layouts"][t], out_dir / lrel)
                paths[f"{view}_layouts"].append(str(lrel))
        for k in range(spec.frames_per_video // spec.clip_len):
            sl = slice(k * spec.clip_len, (k + 1) * spec.clip_len)
            clips.append(ClipRecord(clip_index=k, **meta, **{key: val[sl] for key, val in paths.items()}))
    manifest = DatasetManifest("synthetic", clips, None, out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainingData:
    exo: torch.Tensor  # (N,H,W,3)
    exo_layout: torch.Tensor  # (N,H,W,C2) rendered exo layouts
    ego: torch.Tensor  # (N,H,W,3)
    ego_layout: torch.Tensor  # (N,H,W,C2) rendered ego layouts
    ego_targets: list  # per frame: (G,2) joints or (H,W) mask


def load_training_data(manifest: DatasetManifest, records=None, condition_render: str = "joints") -> TrainingData:
    """Load and render every frame of ``records`` (default: all clips).

    Exo layouts are rendered as skeletons for the translator input; ego
    layouts use ``condition_render`` since they feed the denoiser condition.
    """
    records = manifest.clips if records is None else records
    exo, exo_l, ego, ego_l, targets = [], [], [], [], []
    for rec in records:
        try:
            clip = load_clip(manifest, rec)
        except (OSError, ValueError) as exc:
            raise RuntimeError(f"failed to load clip {rec.clip_id}: {exc}") from exc
        for i in range(clip.length):
            h, w = clip.exo_frames[i].shape[:2]
            exo.append(clip.exo_frames[i])
            ego.append(clip.ego_frames[i])
            exo_l.append(render_layout(clip.exo_layouts[i], h, w))
            ego_l.append(render_layout(clip.ego_layouts[i], h, w, condition_render))
            lay = clip.ego_layouts[i]
            targets.append(lay.mask if isinstance(lay, MaskLayout) else lay.visible_joints())
    if not exo:
        raise ConfigError("no training frames in manifest")

    def stack(xs):
        return torch.from_numpy(np.stack(xs).astype(np.float32))

    return TrainingData(stack(exo), stack(exo_l), stack(ego), stack(ego_l), targets)


def layout_batch(data: TrainingData, idx, mode: str) -> LayoutBatch:
    idx = [int(i) for i in idx]
    targets = [data.ego_targets[i] for i in idx]
    if mode == "mask":
        targets = torch.as_tensor(np.stack(targets), dtype=torch.long)
    return LayoutBatch(data.exo[idx], data.exo_layout[idx], targets)


def diffusion_batch(data: TrainingData, idx, codec) -> DiffusionBatch:
    idx = torch.as_tensor([int(i) for i in idx])
    return DiffusionBatch(codec.encode(data.ego[idx]), build_condition(codec, data.exo[idx], data.ego_layout[idx]))


_CKPT_RE = re.compile(r"^(translator|denoiser)_step(\d+)\.ckpt$")


def _periodic(ckpt_dir: Path, kind: str) -> list[tuple[int, Path]]:
    found = []
    for p in ckpt_dir.glob(f"{kind}_step*.ckpt"):
        m = _CKPT_RE.match(p.name)
        if m:
            found.append((int(m.group(2)), p))
    return sorted(found)


def _write_periodic(save, state, ckpt_dir: Path, kind: str, keep: int) -> None:
    save(state, ckpt_dir / f"{kind}_step{state.step:06d}.ckpt")
    for _, old in _periodic(ckpt_dir, kind)[:-keep]:
        old.unlink()


def latest_checkpoint(ckpt_dir, kind: str) -> Path | None:
    found = _periodic(Path(ckpt_dir), kind)
    return found[-1][1] if found else None


def train_layout_stage(
    data: TrainingData, config: PipelineConfig, ckpt_dir=None, state: TranslatorState | None = None,
    log_fn: LogFn | None = None,
) -> TranslatorState:
    if state is None:
        state = init_translator(config.translator, derive_seed(config.seed, "layout-init"), config.layout_optim)
    n = len(data.ego_targets)
    dump = Path(ckpt_dir) / "translator_diverged.ckpt" if ckpt_dir else None
    while state.step < config.layout_steps:
        gen = step_generator(config.seed, "layout", state.step)
        idx = torch.randint(0, n, (config.layout_batch,), generator=gen)
        step = state.step
        loss = train_step_layout(state, layout_batch(data, idx, config.translator.mode), dump_path=dump)
        if log_fn:
            log_fn("layout", step, loss)
        if ckpt_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            _write_periodic(save_translator, state, Path(ckpt_dir), "translator", config.keep_last)
    return state


def train_diffusion_stage(
    data: TrainingData, config: PipelineConfig, ckpt_dir=None, state: DenoiserState | None = None,
    log_fn: LogFn | None = None,
) -> DenoiserState:
    codec = make_codec(config.codec)
    if state is None:
        state = init_denoiser(
            config.denoiser, config.make_schedule(), derive_seed(config.seed, "diffusion-init"), config.diffusion_optim
        )
    n = len(data.ego_targets)
    dump = Path(ckpt_dir) / "denoiser_diverged.ckpt" if ckpt_dir else None
    while state.step < config.diffusion_steps:
        gen = step_generator(config.seed, "diffusion", state.step)
        idx = torch.randint(0, n, (config.diffusion_batch,), generator=gen)
        step = state.step
        loss = train_step_diffusion(state, diffusion_batch(data, idx, codec), gen, dump_path=dump)
        if log_fn:
            log_fn("diffusion", step, loss)
        if ckpt_dir and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            _write_periodic(save_denoiser, state, Path(ckpt_dir), "denoiser", config.keep_last)
    return state


def train_all(
    manifest: DatasetManifest,
    config: PipelineConfig,
    out_dir,
    stages: Sequence[str] = ("layout", "diffusion"),
    resume: bool = False,
    log_fn: LogFn | None = None,
):
    """Train the layout translator and the denoiser independently.

    Final checkpoints go to ``out_dir/translator.ckpt`` and
    ``out_dir/denoiser.ckpt``; periodic ones to ``out_dir/checkpoints``.
    With ``resume`` each stage restarts from its newest periodic checkpoint.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    data = load_training_data(manifest, condition_render=config.condition_render)
    t_state = d_state = None
    if "layout" in stages:
        start = load_translator(p) if resume and (p := latest_checkpoint(ckpt_dir, "translator")) else None
        t_state = train_layout_stage(data, config, ckpt_dir, start, log_fn)
        save_translator(t_state, out_dir / "translator.ckpt")
    if "diffusion" in stages:
        start = load_denoiser(p) if resume and (p := latest_checkpoint(ckpt_dir, "denoiser")) else None
        d_state = train_diffusion_stage(data, config, ckpt_dir, start, log_fn)
        save_denoiser(d_state, out_dir / "denoiser.ckpt")
    return t_state, d_state


# --------------------------------------------------------------------------
# Inference


def frame_seed(config: PipelineConfig, clip_id: str, index: int, frame: np.ndarray) -> int:
    if config.seed_mode == "content":
        digest = hashlib.sha256(np.ascontiguousarray(frame, dtype=np.float32).tobytes()).hexdigest()
        return derive_seed(config.seed, "frame-content", digest)
    return derive_seed(config.seed, "frame", clip_id, index)


@torch.no_grad()
def infer_frame(frame, exo_layout, translator, denoiser, schedule, codec, config: PipelineConfig, seed: int):
    ego_layout = predict_layout(translator, frame, exo_layout)
    h, w = frame.shape[:2]
    render = render_layout(ego_layout, h, w, config.condition_render)
    d = build_condition(
        codec,
        torch.from_numpy(np.asarray(frame, dtype=np.float32))[None],
        torch.from_numpy(render.astype(np.float32))[None],
    )
    denoiser.eval()
    z = sample(denoiser, d, schedule, seed, config.sampler, config.sample_steps)
    out = np.clip(codec.decode(z)[0].double().numpy(), 0.0, 1.0)
    if config.output_size and out.shape[0] != config.output_size:
        out = crop_resize(out, (0, 0, out.shape[1], out.shape[0]), config.output_size)
    return out, ego_layout


def infer_clip(
    exo_frames: Sequence[np.ndarray],
    exo_layouts: Sequence,
    translator,
    denoiser,
    config: PipelineConfig,
    clip_id: str = "clip",
    schedule=None,
    return_layouts: bool = False,
):
    """Translate an exo clip into ego frames, one frame at a time.

    Takes only exo streams. Each frame is sampled with its own seed derived
    from the global seed and either (clip id, frame index) or the frame
    content, so frames are independent of each other.
    """
    if len(exo_frames) != len(exo_layouts):
        raise InputDomainError("exo frames and layouts must be aligned")
    translator = getattr(translator, "model", translator)
    if schedule is None:
        schedule = getattr(denoiser, "schedule", None) or config.make_schedule()
    denoiser = getattr(denoiser, "model", denoiser)
    codec = make_codec(config.codec)
    frames, layouts = [], []
    for i, (frame, lay) in enumerate(zip(exo_frames, exo_layouts)):
        try:
            out, pred = infer_frame(
                np.asarray(frame), lay, translator, denoiser, schedule, codec, config,
                frame_seed(config, clip_id, i, frame),
            )
        except Exception as exc:
            raise RuntimeError(f"clip {clip_id}: inference failed at frame {i}: {exc}") from exc
        frames.append(out)
        layouts.append(pred)
    return (frames, layouts) if return_layouts else frames


def write_outputs(frames, out_dir, metadata: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(f, out_dir / f"{i:05d}.png")
    meta_path = out_dir / "run.json"
    meta_path.write_text(json.dumps(metadata, indent=1, sort_keys=True) + "\n")
    return meta_path


def run_metadata(config: PipelineConfig, checkpoints: dict[str, Path], **extra) -> dict:
    doc = config.to_json()
    return {
        "config_hash": config_hash(doc),
        "seed": config.seed,
        "seed_mode": config.seed_mode,
        "checkpoints": {k: {"path": str(p), "sha256": file_sha256(p)} for k, p in checkpoints.items()},
        **extra,
    }
