"""Image and set-level metrics: SSIM, PSNR, FID, perceptual distance, feasibility."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import crop_resize
from .errors import InputDomainError, NumericalError

PSNR_CAP = 100.0
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
TABLE_COLUMNS = ("SSIM", "PSNR", "FID", "P_squeeze", "P_alex", "P_vgg", "Feasi")


class FeatureExtractor(Protocol):
    name: str

    def embed(self, frame: np.ndarray) -> np.ndarray: ...


class HandDetector(Protocol):
    def detect(self, frame: np.ndarray) -> list[tuple[tuple[float, float, float, float], float]]: ...


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputDomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_gray(frame) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        return f
    if f.shape[2] == 3:
        return f @ GRAY_WEIGHTS
    if f.shape[2] == 1:
        return f[:, :, 0]
    raise InputDomainError(f"unsupported channel count {f.shape[2]}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    k = len(g)
    out = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(out, k, axis=1) @ g


def ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of the grayscale images.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    size = min(window, *x.shape)
    size -= (size + 1) % 2
    g = gaussian_window(size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in ``[0, 1]``; identical images give 100 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


# --------------------------------------------------------------------------
# Feature-space metrics


class RandomProjectionExtractor:
    """Seeded Gaussian random projection of the resized, centered frame.

    A stand-in for a pretrained backbone: deterministic, fixed output size.
    """

    def __init__(self, dim: int = 64, seed: int = 0, side: int = 32, name: str = "random"):
        self.dim = dim
        self.side = side
        self.name = name
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((dim, side * side * 3)) / math.sqrt(side * side * 3)

    def prepare(self, frame) -> np.ndarray:
        f = np.asarray(frame, dtype=np.float64)
        if f.ndim == 2:
            f = f[:, :, None]
        if f.shape[2] == 1:
            f = np.repeat(f, 3, axis=2)
        if f.shape[:2] != (self.side, self.side):
            f = crop_resize(f, (0, 0, f.shape[1], f.shape[0]), self.side)
        return f.reshape(-1) - 0.5

    def embed(self, frame) -> np.ndarray:
        return self.matrix @ self.prepare(frame)


def perceptual_distance(a, b, extractor) -> float:
    """L2 distance between unit-normalized embeddings."""
    _pair(a, b)
    try:
        fa, fb = extractor.embed(a), extractor.embed(b)
    except Exception as exc:
        raise RuntimeError(f"extractor {getattr(extractor, 'name', extractor)!r} failed: {exc}") from exc
    fa = fa / max(np.linalg.norm(fa), 1e-12)
    fb = fb / max(np.linalg.norm(fb), 1e-12)
    return float(np.linalg.norm(fa - fb))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})``.

    The trace of the product square root is taken as the trace of
    ``(S1^{1/2} S2 S1^{1/2})^{1/2}``, which is symmetric PSD and has the same
    eigenvalues; tiny negative eigenvalues are clamped to zero.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    for name, s in (("first", s1), ("second", s2)):
        w = np.linalg.eigvalsh((s + s.T) / 2)
        scale = max(1.0, float(np.abs(w).max()))
        if w.min() < -1e-8 * scale:
            raise NumericalError(
                f"{name} covariance is not PSD: min eigenvalue {w.min():.3e}, "
                f"condition {np.abs(w).max() / max(np.abs(w).min(), 1e-300):.3e}"
            )
    r1 = _sqrt_psd(s1)
    cross = np.linalg.eigvalsh((r1 @ s2 @ r1 + (r1 @ s2 @ r1).T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(cross, 0.0, None)).sum())
    diff = mu1 - mu2
    return max(float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt), 0.0)


def feature_moments(features: np.ndarray, regularize: bool | None = None):
    feats = np.asarray(features, dtype=np.float64)
    n, f = feats.shape
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) if n > 1 else np.zeros((f, f))
    cov = np.atleast_2d(cov)
    if regularize is None:
        regularize = n < f + 1
    if regularize:
        cov = cov + 1e-6 * np.eye(f)
    return mu, cov


def fid(set_a: Sequence, set_b: Sequence, extractor) -> float:
    if not len(set_a) or not len(set_b):
        raise InputDomainError("FID needs non-empty frame sets")
    fa = np.stack([extractor.embed(x) for x in set_a])
    fb = np.stack([extractor.embed(x) for x in set_b])
    reg = min(len(fa), len(fb)) < fa.shape[1] + 1
    return frechet_distance(*feature_moments(fa, reg), *feature_moments(fb, reg))


# --------------------------------------------------------------------------
# Feasibility


class ConstantDetector:
    """Reports one full-frame detection at a fixed confidence (tests, dry runs)."""

    def __init__(self, confidence: float):
        self.confidence = confidence

    def detect(self, frame):
        h, w = np.asarray(frame).shape[:2]
        return [((0.0, 0.0, float(w), float(h)), self.confidence)]


def feasibility(frames: Sequence, detector) -> float:
    """Mean over frames of the best detection confidence (0 when nothing is found)."""
    if not len(frames):
        raise InputDomainError("feasibility needs at least one frame")
    scores = []
    for f in frames:
        dets = detector.detect(f)
        conf = max((float(c) for _, c in dets), default=0.0)
        if not 0.0 <= conf <= 1.0:
            raise InputDomainError(f"detector confidence {conf} outside [0, 1]")
        scores.append(conf)
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    ssim: float
    psnr: float
    fid: float | None
    perceptual: dict[str, float] = field(default_factory=dict)
    feasibility: float | None = None
    frame_count: int = 0
    dataset: str = ""
    split: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        return cls(**doc)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def values(self) -> dict[str, float | None]:
        row = {"SSIM": self.ssim, "PSNR": self.psnr, "FID": self.fid}
        for col in ("P_squeeze", "P_alex", "P_vgg"):
            row[col] = self.perceptual.get(col[2:])
        row["Feasi"] = self.feasibility
        for name, val in self.perceptual.items():
            if f"P_{name}" not in row:
                row[f"P_{name}"] = val
        return row

    def is_finite(self) -> bool:
        return all(v is None or math.isfinite(v) for v in self.values().values())

    def to_table(self) -> str:
        row = self.values()
        cols = list(row)
        fmt = {"SSIM": "{:.3f}", "PSNR": "{:.3f}", "FID": "{:.2f}", "Feasi": "{:.4f}"}
        cells = [("-" if row[c] is None else fmt.get(c, "{:.3f}").format(row[c])) for c in cols]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        body = "  ".join(v.rjust(w) for v, w in zip(cells, widths))
        return f"{head}\n{body}"


def evaluate(
    predicted: Sequence,
    ground_truth: Sequence,
    extractors: dict | None = None,
    detector=None,
    fid_extractor=None,
    dataset: str = "",
    split: str = "",
) -> MetricReport:
    """Pairwise SSIM/PSNR/perceptual means, set-level FID, feasibility on predictions.

    ``extractors`` maps report names (``squeeze``, ``alex``, ``vgg`` or any
    other) to feature extractors. FID uses ``fid_extractor``, defaulting to
    a seeded random projection.
    """
    if len(predicted) != len(ground_truth):
        raise InputDomainError(f"{len(predicted)} predicted vs {len(ground_truth)} ground-truth frames")
    if not len(predicted):
        raise InputDomainError("nothing to evaluate")
    extractors = extractors or {}
    fid_extractor = fid_extractor or RandomProjectionExtractor()
    pairs = list(zip(predicted, ground_truth))
    perceptual = {
        name: float(np.mean([perceptual_distance(p, g, ex) for p, g in pairs])) for name, ex in extractors.items()
    }
    return MetricReport(
        ssim=float(np.mean([ssim(p, g) for p, g in pairs])),
        psnr=float(np.mean([psnr(p, g) for p, g in pairs])),
        fid=fid(predicted, ground_truth, fid_extractor),
        perceptual=perceptual,
        feasibility=None if detector is None else feasibility(predicted, detector),
        frame_count=len(pairs),
        dataset=dataset,
        split=split,
    )
