import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from egosynth.errors import InputDomainError, NumericalError
from egosynth.metrics import (
    ConstantDetector,
    MetricReport,
    RandomProjectionExtractor,
    evaluate,
    feasibility,
    fid,
    frechet_distance,
    gaussian_window,
    perceptual_distance,
    psnr,
    ssim,
)

C1, C2 = 0.01**2, 0.03**2


def ssim_loop_oracle(x, y, size=11, sigma=1.5):
    """Per-window SSIM with explicit loops over valid window positions."""
    g1 = np.array([math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma**2)) for i in range(size)])
    w = np.outer(g1, g1) / g1.sum() ** 2
    vals = []
    for r in range(x.shape[0] - size + 1):
        for c in range(x.shape[1] - size + 1):
            a, b = x[r:r + size, c:c + size], y[r:r + size, c:c + size]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * a * a).sum() - ma**2
            vb = (w * b * b).sum() - mb**2
            cov = (w * a * b).sum() - ma * mb
            vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma**2 + mb**2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def noisy(rng, base, level):
    return np.clip(base + rng.normal(scale=level, size=base.shape), 0, 1)


# -- SSIM / PSNR -------------------------------------------------------------


def test_ssim_identity(rng):
    img = rng.random((32, 32, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8)
    assert ssim(a, b) == pytest.approx((2 * 0.16 + C1) / (0.68 + C1), abs=1e-9)


def test_ssim_matches_loop_oracle(rng):
    x, y = rng.random((16, 14)), rng.random((16, 14))
    assert ssim(x, y) == pytest.approx(ssim_loop_oracle(x, y), abs=1e-10)


def test_ssim_small_images_shrink_window(rng):
    x = rng.random((5, 7))
    assert ssim(x, x) == pytest.approx(1.0)
    y = rng.random((5, 7))
    assert ssim(x, y) == pytest.approx(ssim_loop_oracle(x, y, size=5), abs=1e-10)


def test_gaussian_window_normalized():
    g = gaussian_window()
    assert g.sum() == pytest.approx(1.0) and g.argmax() == 5


def test_psnr_values():
    zeros, half = np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)
    assert psnr(zeros, half) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(zeros, half) == pytest.approx(10 * math.log10(4), abs=1e-6)
    assert psnr(half, half) == 100.0
    with pytest.raises(InputDomainError):
        psnr(zeros, np.zeros((4, 4, 3)))


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_pairwise_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert psnr(a, b) == psnr(b, a)
    ex = RandomProjectionExtractor(16, seed=1, side=16)
    assert perceptual_distance(a, b, ex) == pytest.approx(perceptual_distance(b, a, ex), abs=1e-12)


# -- FID ---------------------------------------------------------------------


@pytest.mark.parametrize("d", [0.0, 0.5, 3.0])
def test_frechet_mean_shift(d):
    mu = np.zeros(4)
    shifted = mu.copy()
    shifted[2] = d
    assert frechet_distance(mu, np.eye(4), shifted, np.eye(4)) == pytest.approx(d * d, abs=1e-6)


def test_frechet_diagonal_case():
    assert frechet_distance(np.zeros(2), np.diag([1.0, 1.0]), np.zeros(2), np.diag([4.0, 9.0])) == pytest.approx(5.0, abs=1e-6)


def test_frechet_matches_scalar_formula():
    # One dimension: (m1-m2)^2 + (s1 - s2)^2 with standard deviations s.
    assert frechet_distance([1.0], [[4.0]], [3.0], [[0.25]]) == pytest.approx(4 + 1.5**2, abs=1e-12)


def test_frechet_commuting_covariances(rng):
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a, b = rng.uniform(0.1, 3, 5), rng.uniform(0.1, 3, 5)
    s1, s2 = q @ np.diag(a) @ q.T, q @ np.diag(b) @ q.T
    expect = float(((np.sqrt(a) - np.sqrt(b)) ** 2).sum())
    assert frechet_distance(np.zeros(5), s1, np.zeros(5), s2) == pytest.approx(expect, abs=1e-9)


def test_frechet_symmetric_and_zero_on_self(rng):
    x = rng.normal(size=(6, 6))
    s1 = x @ x.T
    y = rng.normal(size=(6, 6))
    s2 = y @ y.T
    m1, m2 = rng.normal(size=6), rng.normal(size=6)
    assert frechet_distance(m1, s1, m2, s2) == pytest.approx(frechet_distance(m2, s2, m1, s1), rel=1e-9)
    assert frechet_distance(m1, s1, m1, s1) == pytest.approx(0.0, abs=1e-9)


def test_frechet_rejects_indefinite():
    with pytest.raises(NumericalError, match="not PSD"):
        frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))


def test_fid_shift_stable(rng):
    ex = RandomProjectionExtractor(8, seed=0, side=8)
    frames = [rng.random((8, 8, 3)) for _ in range(30)]
    # The extractor is linear in the centered frame, so a uniform offset only moves the mean.
    shifted = [f + 0.1 for f in frames]
    assert fid(frames, frames, ex) == pytest.approx(0.0, abs=1e-9)
    offset = ex.matrix @ np.full(8 * 8 * 3, 0.1)
    assert fid(frames, shifted, ex) == pytest.approx(float(offset @ offset), rel=1e-6)


# -- noise monotonicity --------------------------------------------------------


def test_all_metric_families_monotone_in_noise():
    ex = RandomProjectionExtractor(32, seed=0, side=16)
    levels = (0.02, 0.1, 0.3)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        base = [rng.random((16, 16, 3)) * 0.5 + 0.25 for _ in range(6)]
        s, p, f, d = [], [], [], []
        for lv in levels:
            noisy_set = [noisy(np.random.default_rng([seed, i]), b, lv) for i, b in enumerate(base)]
            s.append(np.mean([ssim(n, b) for n, b in zip(noisy_set, base)]))
            p.append(np.mean([psnr(n, b) for n, b in zip(noisy_set, base)]))
            d.append(np.mean([perceptual_distance(n, b, ex) for n, b in zip(noisy_set, base)]))
            f.append(fid(noisy_set, base, ex))
        assert s[0] > s[1] > s[2], seed
        assert p[0] > p[1] > p[2], seed
        assert d[0] < d[1] < d[2], seed
        assert f[0] < f[1] < f[2], seed


# -- feasibility -------------------------------------------------------------


class ScriptedDetector:
    def __init__(self, outputs):
        self.outputs = list(outputs)

    def detect(self, frame):
        return self.outputs.pop(0)


def test_feasibility_examples():
    frames = [np.zeros((4, 4, 3))] * 3
    assert feasibility(frames, ConstantDetector(0.7)) == pytest.approx(0.7)
    box = (0, 0, 1, 1)
    det = ScriptedDetector([[(box, 0.2), (box, 0.9)], [], [(box, 0.6)]])
    assert feasibility(frames, det) == pytest.approx((0.9 + 0.0 + 0.6) / 3)
    with pytest.raises(InputDomainError):
        feasibility([], ConstantDetector(1.0))
    with pytest.raises(InputDomainError):
        feasibility(frames, ConstantDetector(1.5))


# -- report ------------------------------------------------------------------


def test_report_roundtrip_and_table(rng):
    pred = [rng.random((16, 16, 3)) for _ in range(4)]
    gt = [rng.random((16, 16, 3)) for _ in range(4)]
    extractors = {n: RandomProjectionExtractor(8, seed=i, side=8) for i, n in enumerate(("squeeze", "alex", "vgg"))}
    rep = evaluate(pred, gt, extractors, ConstantDetector(0.5), dataset="toy", split="test")
    back = MetricReport.from_json(json.loads(rep.dumps()))
    assert back == rep and rep.is_finite()
    head, row = rep.to_table().splitlines()
    assert head.split() == ["SSIM", "PSNR", "FID", "P_squeeze", "P_alex", "P_vgg", "Feasi"]
    assert len(row.split()) == 7
    assert rep.frame_count == 4


def test_report_without_detector_shows_dash(rng):
    frames = [rng.random((8, 8, 3)) for _ in range(3)]
    rep = evaluate(frames, frames)
    assert rep.feasibility is None and rep.to_table().splitlines()[1].split()[-1] == "-"
    assert rep.ssim == pytest.approx(1.0)
    rep.psnr = float("nan")
    assert not rep.is_finite()


def test_evaluate_validates_lengths(rng):
    with pytest.raises(InputDomainError):
        evaluate([rng.random((8, 8, 3))], [])
