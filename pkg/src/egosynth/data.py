"""Frames, hand layouts, clip pairs, manifests and benchmark splits.

Frames are plain ``numpy`` arrays of shape ``(H, W, C)`` with values in
``[0, 1]``. Layouts are either a :class:`PoseLayout` (normalized 2D joints)
or a :class:`MaskLayout` (binary hand mask).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InputDomainError

DEFAULT_JOINTS = 21
CLIP_LEN = 30
FRAME_SIZE = 256

# Wrist = 0, then four joints per finger from thumb to pinky.
HAND_EDGES_21 = (
    (0, 1), (1, 2), (2, 3), (3, 4),
    (0, 5), (5, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15), (15, 16),
    (0, 17), (17, 18), (18, 19), (19, 20),
)

SIDES = ("left", "right")
SPLIT_STRATEGIES = ("new_actions", "new_objects", "new_subjects", "new_scenes")


def as_frame(pixels) -> np.ndarray:
    """Validate ``pixels`` as a frame and return it as a float64 HxWxC array."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise InputDomainError(f"frame must be HxWxC, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InputDomainError("frame values must lie in [0, 1]")
    return arr


# --------------------------------------------------------------------------
# Layouts


@dataclass
class HandPose:
    joints: np.ndarray  # (J, 2) normalized (u, v); NaN where undefined
    visible: np.ndarray  # (J,) bool
    side: str = "left"

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        if self.visible is None:
            self.visible = np.ones(len(self.joints), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.joints):
            raise InputDomainError("visibility flags must match joint count")
        if self.side not in SIDES:
            raise InputDomainError(f"unknown hand side {self.side!r}")
        vis = self.joints[self.visible]
        if vis.size and (not np.all(np.isfinite(vis)) or vis.min() < 0.0 or vis.max() > 1.0):
            raise InputDomainError("visible joints must lie in [0,1]^2")


@dataclass
class PoseLayout:
    """Per-frame 2D hand pose: up to two hands of normalized joints."""

    hands: list[HandPose] = field(default_factory=list)

    def __post_init__(self):
        if len(self.hands) > 2:
            raise InputDomainError("a pose layout holds at most two hands")

    def visible_joints(self) -> np.ndarray:
        """All visible joints of all hands stacked into a (G, 2) array."""
        parts = [h.joints[h.visible] for h in self.hands]
        if not parts:
            return np.zeros((0, 2))
        return np.concatenate(parts, axis=0)

    def to_json(self) -> dict:
        hands = []
        for h in self.hands:
            joints = [[None if not np.isfinite(c) else float(c) for c in j] for j in h.joints]
            hands.append({"joints": joints, "visible": [bool(v) for v in h.visible], "side": h.side})
        return {"hands": hands}

    @classmethod
    def from_json(cls, doc: dict) -> "PoseLayout":
        hands = []
        for i, h in enumerate(doc.get("hands", [])):
            joints = np.array(
                [[np.nan if c is None else c for c in j] for j in h["joints"]], dtype=np.float64
            ).reshape(-1, 2)
            visible = h.get("visible")
            if visible is None:
                visible = np.ones(len(joints), dtype=bool)
            hands.append(HandPose(joints, visible, h.get("side", SIDES[min(i, 1)])))
        return cls(hands)


@dataclass
class MaskLayout:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim == 3 and m.shape[2] == 1:
            m = m[:, :, 0]
        if m.ndim != 2 or not np.all((m == 0) | (m == 1)):
            raise InputDomainError("mask layout must be an HxW array of 0/1")
        self.mask = m.astype(np.uint8)

    def render(self) -> np.ndarray:
        return self.mask.astype(np.float64)[:, :, None]


# --------------------------------------------------------------------------
# Cameras and projection


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InputDomainError("focal lengths must be positive")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InputDomainError("rotation must be orthonormal with det +1")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Invert the pinhole map for normalized ``uv`` at camera-space ``depth``."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        z = np.asarray(depth, dtype=np.float64).reshape(-1)
        x = (uv[:, 0] * self.width - self.cx) * z / self.fx
        y = (uv[:, 1] * self.height - self.cy) * z / self.fy
        cam = np.stack([x, y, z], axis=1)
        return (cam - self.translation) @ self.rotation


def project_3d_to_2d(joints3d, camera: CameraModel, sides: Sequence[str] | None = None) -> PoseLayout:
    """Project world-space hand joints into a normalized pose layout.

    ``joints3d`` is ``(J, 3)`` for one hand or ``(n_hands, J, 3)``. Joints
    behind the camera or outside the image are kept but flagged invisible.
    """
    pts = np.asarray(joints3d, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise InputDomainError(f"joints3d must be (J,3) or (n,J,3), got {pts.shape}")
    if sides is None:
        sides = SIDES[: len(pts)]
    hands = []
    for hand, side in zip(pts, sides):
        cam = camera.to_camera(hand)
        z = cam[:, 2]
        ahead = z > 0
        safe_z = np.where(ahead, z, 1.0)
        u = (camera.fx * cam[:, 0] / safe_z + camera.cx) / camera.width
        v = (camera.fy * cam[:, 1] / safe_z + camera.cy) / camera.height
        uv = np.stack([u, v], axis=1)
        uv[~ahead] = np.nan
        inside = ahead & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        hands.append(HandPose(uv, inside, side))
    return PoseLayout(hands)


# --------------------------------------------------------------------------
# Rasterization


def default_radius(height: int, width: int) -> tuple[float, float]:
    """Joint disk radius and bone width, scaled from 3px / 1px at 256x256."""
    scale = min(height, width) / FRAME_SIZE
    return max(3.0 * scale, 1.0), max(1.0 * scale, 1.0)


def _segment_distance(xs, ys, a, b):
    ab = b - a
    denom = float(ab @ ab)
    px, py = xs - a[0], ys - a[1]
    if denom == 0.0:
        return np.hypot(px, py)
    t = np.clip((px * ab[0] + py * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - t * ab[0], py - t * ab[1])


def render_pose_layout(
    layout: PoseLayout,
    height: int,
    width: int,
    radius: float | None = None,
    line_width: float | None = None,
    edges: Sequence[tuple[int, int]] | None = None,
) -> np.ndarray:
    """Rasterize a pose layout into an HxWx3 frame.

    Channel 0 holds the left hand, channel 1 the right hand (joints and
    bones), channel 2 the joint disks of both hands. Joint (u, v) maps to the
    continuous pixel position (u*W, v*H); a pixel is lit when its center is
    within ``radius`` of a joint or ``line_width/2`` of a bone.
    """
    r_default, w_default = default_radius(height, width)
    radius = r_default if radius is None else radius
    half = (w_default if line_width is None else line_width) / 2.0
    out = np.zeros((height, width, 3))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    for hand in layout.hands:
        ch = SIDES.index(hand.side)
        pix = hand.joints * np.array([width, height])
        hand_edges = edges if edges is not None else (
            HAND_EDGES_21 if len(hand.joints) == DEFAULT_JOINTS else ()
        )
        lit = np.zeros((height, width), dtype=bool)
        for i, j in hand_edges:
            if hand.visible[i] and hand.visible[j]:
                lit |= _segment_distance(xs, ys, pix[i], pix[j]) <= half
        disks = np.zeros((height, width), dtype=bool)
        for k in np.flatnonzero(hand.visible):
            disks |= (xs - pix[k, 0]) ** 2 + (ys - pix[k, 1]) ** 2 <= radius * radius
        out[:, :, ch][lit | disks] = 1.0
        out[:, :, 2][disks] = 1.0
    return out


def render_joint_set(layout: PoseLayout, height: int, width: int, radius: float | None = None) -> np.ndarray:
    """Rasterize the visible joints of all hands as an unordered point set.

    Only channel 2 (joint disks) is drawn; bones and handedness need joint
    identities, which a set-matched prediction does not carry. The result is
    invariant to any permutation of joints across and within hands.
    """
    radius = default_radius(height, width)[0] if radius is None else radius
    out = np.zeros((height, width, 3))
    joints = layout.visible_joints()
    if len(joints):
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        pix = joints * np.array([width, height])
        d2 = (xs[..., None] - pix[:, 0]) ** 2 + (ys[..., None] - pix[:, 1]) ** 2
        out[:, :, 2] = (d2 <= radius * radius).any(axis=-1)
    return out


def render_layout(layout, height: int, width: int, style: str = "skeleton") -> np.ndarray:
    """Render a mask or pose layout; ``style`` is ``skeleton`` or ``joints``
    (see :func:`render_joint_set`) and only affects pose layouts."""
    if isinstance(layout, MaskLayout):
        return layout.render()
    if style == "joints":
        return render_joint_set(layout, height, width)
    if style != "skeleton":
        raise ConfigError(f"unknown layout render style {style!r}")
    return render_pose_layout(layout, height, width)


# --------------------------------------------------------------------------
# Preprocessing


def crop_resize(frame, roi, target: int) -> np.ndarray:
    """Crop ``roi = (x0, y0, x1, y1)`` (x1, y1 exclusive) and bilinearly resize
    to ``target x target`` using half-pixel-center sampling."""
    img = as_frame(frame)
    h, w, _ = img.shape
    x0, y0, x1, y1 = (float(c) for c in roi)
    if target < 1:
        raise InputDomainError("target size must be >= 1")
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise InputDomainError(f"roi {roi} outside {w}x{h} frame")

    def coords(lo, hi, size):
        pos = lo + (np.arange(target) + 0.5) * ((hi - lo) / target) - 0.5
        pos = np.clip(pos, 0.0, size - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, size - 1)
        return i0, i1, pos - i0

    r0, r1, fy = coords(y0, y1, h)
    c0, c1, fx = coords(x0, x1, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[r0][:, c0] * (1 - fx) + img[r0][:, c1] * fx
    bottom = img[r1][:, c0] * (1 - fx) + img[r1][:, c1] * fx
    return np.clip(top * (1 - fy) + bottom * fy, 0.0, 1.0)


def crop_layout(layout, roi, frame_width: int, frame_height: int, target: int):
    """Apply the same crop/resize as :func:`crop_resize` to a layout.

    Pose joints are re-normalized to the crop (joints leaving it become
    invisible); masks are resampled bilinearly and thresholded at 0.5.
    """
    x0, y0, x1, y1 = (float(c) for c in roi)
    if isinstance(layout, MaskLayout):
        soft = crop_resize(layout.mask[:, :, None].astype(np.float64), roi, target)
        return MaskLayout((soft[:, :, 0] >= 0.5).astype(np.uint8))
    hands = []
    for hand in layout.hands:
        px = hand.joints * np.array([frame_width, frame_height])
        joints = (px - np.array([x0, y0])) / np.array([x1 - x0, y1 - y0])
        inside = np.all((joints >= 0.0) & (joints <= 1.0), axis=1)
        hands.append(HandPose(joints, hand.visible & inside, hand.side))
    return PoseLayout(hands)


# --------------------------------------------------------------------------
# Clips, manifests and splits


@dataclass
class ClipMeta:
    video_id: str
    subject_id: str
    object_id: str
    scene_id: str
    clip_index: int


@dataclass
class ClipPair:
    exo_frames: list
    ego_frames: list
    exo_layouts: list
    ego_layouts: list
    meta: ClipMeta

    def __post_init__(self):
        lengths = {len(self.exo_frames), len(self.ego_frames), len(self.exo_layouts), len(self.ego_layouts)}
        if len(lengths) != 1:
            raise InputDomainError("exo/ego frame and layout streams must share one length")

    @property
    def length(self) -> int:
        return len(self.exo_frames)


def segment_clips(
    exo_frames: Sequence,
    ego_frames: Sequence,
    exo_layouts: Sequence,
    ego_layouts: Sequence,
    clip_len: int = CLIP_LEN,
    *,
    video_id: str = "video",
    subject_id: str = "subject",
    object_id: str = "object",
    scene_id: str = "scene",
) -> list[ClipPair]:
    """Cut one synchronized video into contiguous ``clip_len``-frame clips.

    Trailing frames that do not fill a whole clip are dropped.
    """
    if clip_len < 1:
        raise InputDomainError("clip_len must be >= 1")
    n = len(exo_frames)
    if not (len(ego_frames) == len(exo_layouts) == len(ego_layouts) == n):
        raise InputDomainError("streams must be aligned")
    clips = []
    for k in range(n // clip_len):
        sl = slice(k * clip_len, (k + 1) * clip_len)
        meta = ClipMeta(video_id, subject_id, object_id, scene_id, k)
        clips.append(ClipPair(
            list(exo_frames[sl]), list(ego_frames[sl]), list(exo_layouts[sl]), list(ego_layouts[sl]), meta
        ))
    return clips


@dataclass
class ClipRecord:
    """A clip as referenced from a manifest: metadata plus file paths."""

    video_id: str
    subject_id: str
    object_id: str
    scene_id: str
    clip_index: int
    exo_frames: list[str]
    ego_frames: list[str]
    exo_layouts: list[str]
    ego_layouts: list[str]

    @property
    def clip_id(self) -> str:
        return f"{self.video_id}/{self.clip_index}"

    @property
    def meta(self) -> ClipMeta:
        return ClipMeta(self.video_id, self.subject_id, self.object_id, self.scene_id, self.clip_index)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "subject_id": self.subject_id,
            "object_id": self.object_id,
            "scene_id": self.scene_id,
            "clip_index": self.clip_index,
            "exo_frames": list(self.exo_frames),
            "ego_frames": list(self.ego_frames),
            "exo_layouts": list(self.exo_layouts),
            "ego_layouts": list(self.ego_layouts),
        }


_META_FIELDS = ("video_id", "subject_id", "object_id", "scene_id")


@dataclass
class DatasetManifest:
    dataset_name: str
    clips: list[ClipRecord]
    cameras: dict | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.clips = sorted(self.clips, key=lambda c: (c.video_id, c.clip_index))
        for c in self.clips:
            for name in _META_FIELDS:
                if not str(getattr(c, name)):
                    raise ConfigError(f"clip {c.clip_id}: empty metadata field {name}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        doc = {"dataset_name": self.dataset_name, "clips": [c.to_json() for c in self.clips]}
        if self.cameras is not None:
            doc["cameras"] = self.cameras
        return doc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    try:
        clips = [ClipRecord(**c) for c in doc["clips"]]
        return DatasetManifest(doc["dataset_name"], clips, doc.get("cameras"), path.parent)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed manifest {path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path, root=None) -> Path:
    """Write ``manifest`` as JSON; paths are rewritten relative to the new file
    location when ``root`` differs from the manifest's own root."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest.to_json()
    src_root = Path(manifest.root).resolve()
    dst_root = path.parent.resolve() if root is None else Path(root).resolve()
    if src_root != dst_root:
        for c in doc["clips"]:
            for key in ("exo_frames", "ego_frames", "exo_layouts", "ego_layouts"):
                c[key] = [_relocate(p, src_root, dst_root) for p in c[key]]
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _relocate(p: str, src: Path, dst: Path) -> str:
    full = Path(p) if Path(p).is_absolute() else src / p
    try:
        return str(full.relative_to(dst))
    except ValueError:
        import os

        return os.path.relpath(full, dst)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr[:, :, :3] if arr.shape[2] == 4 else arr


def save_png(frame, path) -> None:
    arr = np.asarray(frame, dtype=np.float64)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def load_layout(path):
    path = Path(path)
    if path.suffix.lower() == ".json":
        return PoseLayout.from_json(json.loads(path.read_text()))
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return MaskLayout((arr >= 128).astype(np.uint8))


def save_layout(layout, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(layout, MaskLayout):
        Image.fromarray(layout.mask * 255).save(path, format="PNG")
    else:
        path.write_text(json.dumps(layout.to_json(), sort_keys=True) + "\n")


def load_clip(manifest: DatasetManifest, record: ClipRecord) -> ClipPair:
    r = manifest.resolve
    return ClipPair(
        [load_png(r(p)) for p in record.exo_frames],
        [load_png(r(p)) for p in record.ego_frames],
        [load_layout(r(p)) for p in record.exo_layouts],
        [load_layout(r(p)) for p in record.ego_layouts],
        record.meta,
    )


@dataclass
class SplitSpec:
    strategy: str
    train_fraction: float = 0.8
    held_out_object: str | None = None
    train_subjects: tuple[str, ...] = ()
    test_subjects: tuple[str, ...] = ()
    train_scenes: tuple[str, ...] = ()
    test_scenes: tuple[str, ...] = ()

    def __post_init__(self):
        self.strategy = self.strategy.replace("-", "_")
        if self.strategy not in SPLIT_STRATEGIES:
            raise ConfigError(f"unknown split strategy {self.strategy!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")


def _require_present(values, present, what):
    missing = sorted(set(values) - present)
    if missing:
        raise ConfigError(f"{what} not in manifest: {missing}")


def generate_split(manifest: DatasetManifest, spec: SplitSpec) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Partition manifest clips into (train, test) for one generalization setting."""
    clips = manifest.clips
    if spec.strategy == "new_actions":
        by_video: dict[str, list[ClipRecord]] = {}
        for c in clips:
            by_video.setdefault(c.video_id, []).append(c)
        train, test = [], []
        for vid in sorted(by_video):
            vclips = sorted(by_video[vid], key=lambda c: c.clip_index)
            # round() guards products like 0.8 * 15 = 12.000000000000002
            n_train = math.ceil(round(spec.train_fraction * len(vclips), 9))
            train += vclips[:n_train]
            test += vclips[n_train:]
    elif spec.strategy == "new_objects":
        if spec.held_out_object is None:
            raise ConfigError("new_objects requires held_out_object")
        _require_present([spec.held_out_object], {c.object_id for c in clips}, "object")
        train = [c for c in clips if c.object_id != spec.held_out_object]
        test = [c for c in clips if c.object_id == spec.held_out_object]
    else:
        key = "subject_id" if spec.strategy == "new_subjects" else "scene_id"
        tr_ids, te_ids = (
            (spec.train_subjects, spec.test_subjects)
            if spec.strategy == "new_subjects"
            else (spec.train_scenes, spec.test_scenes)
        )
        tr_ids, te_ids = set(tr_ids), set(te_ids)
        if tr_ids & te_ids:
            raise ConfigError(f"{key} sets overlap: {sorted(tr_ids & te_ids)}")
        _require_present(tr_ids | te_ids, {getattr(c, key) for c in clips}, key)
        train = [c for c in clips if getattr(c, key) in tr_ids]
        test = [c for c in clips if getattr(c, key) in te_ids]
    if not train or not test:
        raise ConfigError(f"{spec.strategy}: empty partition (train={len(train)}, test={len(test)})")
    return train, test


def write_split(manifest: DatasetManifest, spec: SplitSpec, out_dir) -> tuple[Path, Path]:
    train, test = generate_split(manifest, spec)
    out_dir = Path(out_dir)
    paths = []
    for name, part in (("train", train), ("test", test)):
        sub = DatasetManifest(manifest.dataset_name, part, manifest.cameras, manifest.root)
        paths.append(save_manifest(sub, out_dir / f"{name}.json"))
    return paths[0], paths[1]
