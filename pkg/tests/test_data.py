import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from hypothesis.extra.numpy import arrays

from egosynth.data import (
    CameraModel,
    ClipPair,
    DatasetManifest,
    HandPose,
    MaskLayout,
    PoseLayout,
    SplitSpec,
    crop_layout,
    crop_resize,
    generate_split,
    load_layout,
    load_manifest,
    load_png,
    project_3d_to_2d,
    render_joint_set,
    render_layout,
    render_pose_layout,
    save_layout,
    save_manifest,
    save_png,
    segment_clips,
    write_split,
)
from egosynth.errors import ConfigError, InputDomainError

from conftest import make_record, random_manifest


# -- crop_resize -------------------------------------------------------------


def bilinear_oracle(img, roi, target):
    """Loop-per-pixel half-pixel bilinear sampling."""
    x0, y0, x1, y1 = roi
    h, w, c = img.shape
    out = np.zeros((target, target, c))
    for i in range(target):
        for j in range(target):
            sy = y0 + (i + 0.5) * (y1 - y0) / target - 0.5
            sx = x0 + (j + 0.5) * (x1 - x0) / target - 0.5
            sy = min(max(sy, 0.0), h - 1)
            sx = min(max(sx, 0.0), w - 1)
            r, q = int(math.floor(sy)), int(math.floor(sx))
            r2, q2 = min(r + 1, h - 1), min(q + 1, w - 1)
            a, b = sy - r, sx - q
            out[i, j] = (
                (1 - a) * (1 - b) * img[r, q]
                + (1 - a) * b * img[r, q2]
                + a * (1 - b) * img[r2, q]
                + a * b * img[r2, q2]
            )
    return out


def test_crop_resize_halves_resolution(rng):
    img = rng.random((512, 512, 3))
    out = crop_resize(img, (0, 0, 512, 512), 256)
    blocks = img.reshape(256, 2, 256, 2, 3).mean(axis=(1, 3))
    assert out.shape == (256, 256, 3)
    np.testing.assert_allclose(out, blocks, atol=1e-12)


def test_crop_resize_constant_stays_constant():
    img = np.full((300, 400, 3), 0.5)
    out = crop_resize(img, (13, 7, 390, 280), 256)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


def test_crop_resize_checkerboard():
    board = (np.indices((4, 4)).sum(0) % 2).astype(float)[:, :, None]
    out = crop_resize(board, (0, 0, 4, 4), 2)
    # Each output pixel samples the center of a 2x2 block: two 0s and two 1s.
    np.testing.assert_allclose(out, np.full((2, 2, 1), 0.5), atol=1e-12)
    np.testing.assert_allclose(out, bilinear_oracle(board, (0, 0, 4, 4), 2), atol=1e-12)


def test_crop_resize_matches_loop_oracle(rng):
    img = rng.random((17, 23, 3))
    roi = (2, 3, 20, 15)
    np.testing.assert_allclose(crop_resize(img, roi, 9), bilinear_oracle(img, roi, 9), atol=1e-12)


@pytest.mark.parametrize("roi", [(-1, 0, 10, 10), (0, 0, 11, 10), (5, 5, 5, 9)])
def test_crop_resize_rejects_bad_roi(roi):
    with pytest.raises(InputDomainError):
        crop_resize(np.zeros((10, 10, 3)), roi, 4)


@settings(deadline=None, max_examples=30)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)),
              elements=st.floats(0, 1)))
def test_crop_resize_idempotent_at_target_size(img):
    h, w, _ = img.shape
    side = min(h, w)
    img = img[:side, :side]
    out = crop_resize(img, (0, 0, side, side), side)
    assert np.abs(out - img).max() < 1e-6


# -- segment_clips ----------------------------------------------------------


@pytest.mark.parametrize("frames,clips", [(90, 3), (29, 0), (305, 10), (30, 1)])
def test_segment_clip_counts(frames, clips):
    seq = list(range(frames))
    out = segment_clips(seq, seq, seq, seq, 30, video_id="v")
    assert len(out) == clips
    for k, clip in enumerate(out):
        assert clip.exo_frames == list(range(30 * k, 30 * (k + 1)))
        assert clip.meta.clip_index == k
        assert clip.length == 30


def test_segment_clips_validates():
    with pytest.raises(InputDomainError):
        segment_clips([1], [1], [1], [1], 0)
    with pytest.raises(InputDomainError):
        segment_clips([1, 2], [1], [1, 2], [1, 2], 1)
    with pytest.raises(InputDomainError):
        ClipPair([1], [1, 2], [1], [1], None)


# -- projection --------------------------------------------------------------


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_optical_axis_projects_to_principal_point():
    cam = CameraModel(100, 120, 128, 96, 256, 192)
    lay = project_3d_to_2d([[0.0, 0.0, 3.0]], cam)
    np.testing.assert_allclose(lay.hands[0].joints[0], [128 / 256, 96 / 192])


def test_projection_arithmetic():
    cam = CameraModel(100, 100, 128, 128, 256, 256)
    u, v = project_3d_to_2d([[1.0, 0.0, 2.0]], cam).hands[0].joints[0]
    assert u * 256 == pytest.approx(178.0, abs=1e-12)
    assert v * 256 == pytest.approx(128.0, abs=1e-12)


def test_projection_matches_scalar_oracle(rng):
    cam = CameraModel(310.0, 290.0, 130.0, 120.0, 256, 240, random_rotation(rng), rng.normal(size=3))
    world = rng.normal(size=(21, 3)) + cam.rotation.T @ (np.array([0, 0, 4.0]) - cam.translation)
    lay = project_3d_to_2d(world, cam)
    for k, p in enumerate(world):
        xc = [sum(cam.rotation[r][c] * p[c] for c in range(3)) + cam.translation[r] for r in range(3)]
        u = (cam.fx * xc[0] / xc[2] + cam.cx) / cam.width
        v = (cam.fy * xc[1] / xc[2] + cam.cy) / cam.height
        assert abs(lay.hands[0].joints[k, 0] - u) < 1e-9
        assert abs(lay.hands[0].joints[k, 1] - v) < 1e-9
        assert lay.hands[0].visible[k] == (0 <= u <= 1 and 0 <= v <= 1)


def test_projection_flags_behind_and_offscreen():
    cam = CameraModel(100, 100, 50, 50, 100, 100)
    lay = project_3d_to_2d([[0, 0, -1.0], [0, 0, 0.0], [10.0, 0, 1.0], [0.1, 0.1, 1.0]], cam)
    assert lay.hands[0].visible.tolist() == [False, False, False, True]
    # Off-screen joints keep their (unclamped) coordinates.
    assert lay.hands[0].joints[2, 0] > 1.0


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_projection_inverse_recovers_points(seed):
    rng = np.random.default_rng(seed)
    cam = CameraModel(*rng.uniform(100, 500, 2), *rng.uniform(50, 200, 2), 256, 256,
                      random_rotation(rng), rng.normal(size=3))
    world = rng.normal(scale=0.5, size=(21, 3)) + cam.rotation.T @ (np.array([0, 0, 3.0]) - cam.translation)
    lay = project_3d_to_2d(world, cam)
    hand = lay.hands[0]
    depth = cam.to_camera(world)[:, 2]
    back = cam.unproject(hand.joints, depth)
    vis = hand.visible
    err = np.linalg.norm(back[vis] - world[vis], axis=1) / np.maximum(np.linalg.norm(world[vis], axis=1), 1e-12)
    assert np.all(err < 1e-6)


def test_camera_validation():
    with pytest.raises(InputDomainError):
        CameraModel(0, 1, 0, 0, 10, 10)
    with pytest.raises(InputDomainError):
        CameraModel(1, 1, 0, 0, 10, 10, rotation=np.diag([1.0, 1.0, -1.0]))


# -- rendering ---------------------------------------------------------------


def test_render_empty_layout_is_black():
    assert not render_pose_layout(PoseLayout(), 64, 48).any()


def test_render_single_joint_center():
    lay = PoseLayout([HandPose([[0.5, 0.5]], [True], "left")])
    img = render_pose_layout(lay, 256, 256, radius=3)
    assert img[128, 128].any()
    assert not img[0, 0].any()
    assert img[128, 131, 0] == 1.0 and img[128, 132, 0] == 0.0


def segment_oracle(p, a, b):
    ab = (b[0] - a[0], b[1] - a[1])
    denom = ab[0] ** 2 + ab[1] ** 2
    t = 0.0 if denom == 0 else ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / denom
    t = min(max(t, 0.0), 1.0)
    return math.hypot(p[0] - a[0] - t * ab[0], p[1] - a[1] - t * ab[1])


def test_render_two_joint_hand_matches_bruteforce():
    joints = np.array([[0.2, 0.3], [0.7, 0.55]])
    lay = PoseLayout([HandPose(joints, [True, True], "right")])
    h, w, r, lw = 40, 50, 2.5, 1.5
    img = render_pose_layout(lay, h, w, radius=r, line_width=lw, edges=[(0, 1)])
    pix = joints * [w, h]
    for y in range(h):
        for x in range(w):
            near_joint = min(math.hypot(x - px, y - py) for px, py in pix) <= r
            near_bone = segment_oracle((x, y), pix[0], pix[1]) <= lw / 2
            assert img[y, x, 1] == float(near_joint or near_bone)
            assert img[y, x, 2] == float(near_joint)
            assert img[y, x, 0] == 0.0


def test_render_skips_invisible_joints():
    lay = PoseLayout([HandPose([[0.5, 0.5], [0.1, 0.1]], [False, True], "left")])
    img = render_pose_layout(lay, 32, 32, edges=[(0, 1)])
    assert not img[16, 16].any()
    assert img[3, 3, 0] == 1.0


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_render_invariant_to_joint_order(seed):
    rng = np.random.default_rng(seed)
    joints = rng.uniform(0, 1, (21, 2))
    edges = [(0, 1), (1, 2), (2, 3), (0, 5), (5, 9), (9, 20)]
    perm = rng.permutation(21)
    inv = np.argsort(perm)
    a = render_pose_layout(PoseLayout([HandPose(joints, None, "left")]), 32, 32, edges=edges)
    moved = [(int(inv[i]), int(inv[j])) for i, j in edges]
    b = render_pose_layout(PoseLayout([HandPose(joints[perm], None, "left")]), 32, 32, edges=moved)
    np.testing.assert_array_equal(a, b)


def test_joint_set_render_matches_bruteforce():
    joints = np.array([[0.25, 0.25], [0.6, 0.7], [0.9, 0.1]])
    lay = PoseLayout([HandPose(joints[:2], None, "left"), HandPose(joints[2:], None, "right")])
    img = render_joint_set(lay, 20, 24, radius=2.0)
    pix = joints * [24, 20]
    for y in range(20):
        for x in range(24):
            lit = min(math.hypot(x - px, y - py) for px, py in pix) <= 2.0
            assert img[y, x, 2] == float(lit)
    assert not img[:, :, :2].any()


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_joint_set_render_ignores_identity(seed):
    rng = np.random.default_rng(seed)
    joints = rng.uniform(0, 1, (42, 2))
    a = PoseLayout([HandPose(joints[:21], None, "left"), HandPose(joints[21:], None, "right")])
    shuffled = joints[rng.permutation(42)]
    b = PoseLayout([HandPose(shuffled[:21], None, "right"), HandPose(shuffled[21:], None, "left")])
    np.testing.assert_array_equal(render_joint_set(a, 32, 32), render_joint_set(b, 32, 32))
    assert np.array_equal(render_layout(a, 32, 32, "joints"), render_joint_set(a, 32, 32))
    with pytest.raises(ConfigError):
        render_layout(a, 32, 32, "heatmap")


def test_crop_layout_pose_and_mask():
    lay = PoseLayout([HandPose([[0.5, 0.5], [0.1, 0.9]], None, "left")])
    out = crop_layout(lay, (20, 10, 60, 50), 80, 60, 16)
    np.testing.assert_allclose(out.hands[0].joints[0], [(40 - 20) / 40, (30 - 10) / 40])
    assert out.hands[0].visible.tolist() == [True, False]
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[:4, :4] = 1
    cropped = crop_layout(MaskLayout(mask), (0, 0, 8, 8), 8, 8, 4)
    np.testing.assert_array_equal(cropped.mask, [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]])


def test_pose_layout_validation():
    with pytest.raises(InputDomainError):
        HandPose([[1.5, 0.2]], [True])
    HandPose([[1.5, 0.2]], [False])
    with pytest.raises(InputDomainError):
        PoseLayout([HandPose([[0.1, 0.1]], None)] * 3)


# -- files -------------------------------------------------------------------


def test_png_roundtrip(tmp_path, rng):
    img = np.round(rng.random((8, 9, 3)) * 255) / 255
    save_png(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_png(tmp_path / "a.png"), img)


def test_layout_roundtrip(tmp_path):
    pose = PoseLayout([HandPose([[0.1, 0.2], [np.nan, np.nan]], [True, False], "right")])
    save_layout(pose, tmp_path / "p.json")
    back = load_layout(tmp_path / "p.json")
    assert back.hands[0].side == "right"
    np.testing.assert_array_equal(back.hands[0].visible, [True, False])
    assert back.hands[0].joints[0].tolist() == [0.1, 0.2]
    mask = MaskLayout(np.eye(5, dtype=np.uint8))
    save_layout(mask, tmp_path / "m.png")
    np.testing.assert_array_equal(load_layout(tmp_path / "m.png").mask, mask.mask)


def test_manifest_roundtrip_and_sorting(tmp_path):
    clips = [make_record("b", 1), make_record("a", 2), make_record("b", 0)]
    clips[0].exo_frames = ["b/1.png"]
    m = DatasetManifest("toy", clips, None, tmp_path)
    assert [(c.video_id, c.clip_index) for c in m.clips] == [("a", 2), ("b", 0), ("b", 1)]
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back.to_json() == m.to_json()
    save_manifest(m, tmp_path / "sub" / "m.json")
    moved = load_manifest(tmp_path / "sub" / "m.json")
    assert moved.resolve(moved.clips[2].exo_frames[0]).resolve() == (tmp_path / "b/1.png").resolve()


def test_manifest_rejects_empty_metadata():
    with pytest.raises(ConfigError):
        DatasetManifest("x", [make_record("v", 0, subject="")])


# -- splits ------------------------------------------------------------------


def test_new_actions_ten_clips():
    m = DatasetManifest("x", [make_record("v", k) for k in range(10)])
    train, test = generate_split(m, SplitSpec("new_actions"))
    assert [c.clip_index for c in train] == list(range(8))
    assert [c.clip_index for c in test] == [8, 9]


def test_new_actions_rounding_is_exact():
    # 0.8 * 15 is 12.000000000000002 in floating point.
    m = DatasetManifest("x", [make_record("v", k) for k in range(15)])
    train, test = generate_split(m, SplitSpec("new_actions"))
    assert (len(train), len(test)) == (12, 3)


def test_new_subjects_five_five():
    clips = [make_record("a", k, subject="s1") for k in range(5)] + [make_record("b", k, subject="s2") for k in range(5)]
    train, test = generate_split(DatasetManifest("x", clips), SplitSpec("new_subjects", train_subjects=("s1",), test_subjects=("s2",)))
    assert len(train) == len(test) == 5
    assert {c.subject_id for c in train} == {"s1"} and {c.subject_id for c in test} == {"s2"}


def test_new_objects_and_scenes():
    clips = [make_record(f"v{i}", 0, obj=f"o{i % 3}", scene=f"k{i % 4}") for i in range(12)]
    m = DatasetManifest("x", clips)
    train, test = generate_split(m, SplitSpec("new_objects", held_out_object="o2"))
    assert {c.object_id for c in test} == {"o2"} and "o2" not in {c.object_id for c in train}
    train, test = generate_split(m, SplitSpec("new_scenes", train_scenes=("k0", "k1"), test_scenes=("k3",)))
    assert len(train) == 6 and len(test) == 3


@pytest.mark.parametrize("spec", [
    SplitSpec("new_objects", held_out_object="nope"),
    SplitSpec("new_subjects", train_subjects=("s1",), test_subjects=("s9",)),
    SplitSpec("new_scenes", train_scenes=("k1",), test_scenes=("k1",)),
    SplitSpec("new_objects"),
])
def test_split_errors(spec):
    clips = [make_record("v", k, subject="s1", obj="o1", scene="k1") for k in range(3)]
    with pytest.raises(ConfigError):
        generate_split(DatasetManifest("x", clips), spec)


def test_split_spec_validation():
    with pytest.raises(ConfigError):
        SplitSpec("new_weather")
    with pytest.raises(ConfigError):
        SplitSpec("new_actions", train_fraction=1.0)
    assert SplitSpec("new-actions").strategy == "new_actions"


def test_single_clip_video_gives_empty_test():
    with pytest.raises(ConfigError):
        generate_split(DatasetManifest("x", [make_record("v", 0)]), SplitSpec("new_actions"))


@settings(deadline=None, max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_new_actions_partition_and_order(seed):
    m = random_manifest(np.random.default_rng(seed))
    try:
        train, test = generate_split(m, SplitSpec("new_actions"))
    except ConfigError:
        return
    ids = lambda cs: {c.clip_id for c in cs}
    assert not ids(train) & ids(test)
    assert ids(train) | ids(test) == ids(m.clips)
    for vid in {c.video_id for c in test}:
        assert max(c.clip_index for c in train if c.video_id == vid) < min(c.clip_index for c in test if c.video_id == vid)


def test_write_split(tmp_path):
    m = DatasetManifest("x", [make_record("v", k) for k in range(10)], None, tmp_path)
    tr, te = write_split(m, SplitSpec("new_actions"), tmp_path / "out")
    assert len(json.loads(tr.read_text())["clips"]) == 8
    assert len(json.loads(te.read_text())["clips"]) == 2
