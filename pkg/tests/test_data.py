import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnet import data

# Header bytes of the standard 10k-item handwritten-digit test archives.
CANONICAL_IMAGES_HEADER = bytes.fromhex("00000803 00002710 0000001c 0000001c".replace(" ", ""))
CANONICAL_LABELS_HEADER = bytes.fromhex("00000801 00002710".replace(" ", ""))


def canonical_archive(tmp_path, gz=False):
    rng = np.random.default_rng(7)
    pixels = rng.integers(0, 256, 10000 * 28 * 28, dtype=np.uint8).tobytes()
    labels = rng.integers(0, 10, 10000, dtype=np.uint8).tobytes()
    suffix = ".gz" if gz else ""
    ip, lp = tmp_path / f"t10k-images-idx3-ubyte{suffix}", tmp_path / f"t10k-labels-idx1-ubyte{suffix}"
    opener = gzip.open if gz else open
    with opener(ip, "wb") as f:
        f.write(CANONICAL_IMAGES_HEADER + pixels)
    with opener(lp, "wb") as f:
        f.write(CANONICAL_LABELS_HEADER + labels)
    return ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_canonical_archive_header(tmp_path, gz):
    ip, lp = canonical_archive(tmp_path, gz)
    x, y = data.load_idx_archive(ip, lp)
    assert x.shape == (10000, 28, 28) and x.dtype == np.float32
    assert y.shape == (10000,)
    assert 0.0 <= x.min() and x.max() <= 1.0
    assert set(np.unique(y)) <= set(range(10))


def test_write_idx_produces_canonical_header(tmp_path):
    p = tmp_path / "img.idx"
    data.write_idx(p, np.zeros((10000, 28, 28), np.uint8))
    assert p.read_bytes()[:16] == CANONICAL_IMAGES_HEADER
    p = tmp_path / "lab.idx"
    data.write_idx(p, np.zeros(10000, np.uint8))
    assert p.read_bytes()[:8] == CANONICAL_LABELS_HEADER


def test_idx_round_trip(tmp_path, rng):
    a = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    p = tmp_path / "a.idx"
    data.write_idx(p, a)
    b = data.read_idx(p)
    assert b.dtype == np.dtype(">u1") and np.array_equal(a, b)


@pytest.mark.parametrize("cut, offset", [(2, 2), (10, 10), (16 + 5, 21)])
def test_truncated_idx_reports_offset(tmp_path, cut, offset):
    p = tmp_path / "a.idx"
    data.write_idx(p, np.zeros((2, 3, 3), np.uint8))
    p.write_bytes(p.read_bytes()[:cut])
    with pytest.raises(data.IdxFormatError) as e:
        data.read_idx(p)
    assert e.value.offset == offset
    assert f"offset {offset}" in str(e.value)


def test_bad_magic_rejected(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, np.zeros((2, 2, 2), np.uint8))
    data.write_idx(lp, np.zeros(2, np.uint8))
    with pytest.raises(data.IdxFormatError):
        data.load_idx_archive(lp, lp)  # label file where images are expected
    ip.write_bytes(b"\x01\x02" + ip.read_bytes()[2:])
    with pytest.raises(data.IdxFormatError):
        data.read_idx(ip)


def test_count_mismatch_rejected(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    data.write_idx(ip, np.zeros((3, 2, 2), np.uint8))
    data.write_idx(lp, np.zeros(2, np.uint8))
    with pytest.raises(ValueError, match="labels"):
        data.load_idx_archive(ip, lp)


def test_synth_dataset_deterministic():
    a = data.synth_pose_dataset(6, seed=3, image_size=32)
    b = data.synth_pose_dataset(6, seed=3, image_size=32)
    c = data.synth_pose_dataset(6, seed=4, image_size=32)
    for f in ("images", "landmarks", "heatmaps"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert not np.array_equal(a.landmarks, c.landmarks)


@pytest.mark.parametrize("stride", [2, 4])
def test_heatmap_peak_near_landmark(stride):
    ds = data.synth_pose_dataset(40, seed=1, image_size=32, stride=stride)
    assert ds.heatmaps.min() >= 0 and ds.heatmaps.max() <= 1
    n, h, w, lm = ds.heatmaps.shape
    flat = ds.heatmaps.transpose(0, 3, 1, 2).reshape(n, lm, -1).argmax(-1)
    ys, xs = np.divmod(flat, w)
    target = data.to_heatmap_coords(ds.landmarks, stride)
    assert np.all(np.abs(xs - target[..., 0]) <= 1) and np.all(np.abs(ys - target[..., 1]) <= 1)
    assert np.allclose(ds.heatmaps.max(axis=(1, 2)), 1.0, atol=0.5)  # peak 1 at subpixel offsets


def test_render_heatmap_exact_peak():
    hm = data.render_heatmaps(np.array([[5.5, 9.5]]), 8, stride=4, sigma=1.0)
    # (5.5 + 0.5) / 4 - 0.5 = 1.0, (9.5 + 0.5) / 4 - 0.5 = 2.0
    assert hm[2, 1, 0] == 1.0
    assert hm[2, 2, 0] == pytest.approx(np.exp(-0.5))


def test_synth_errors():
    with pytest.raises(ValueError):
        data.synth_pose_dataset(0)
    with pytest.raises(ValueError):
        data.synth_pose_dataset(2, image_size=30, stride=4)


def test_dataset_cache_round_trip(tmp_path):
    ds = data.synth_pose_dataset(4, seed=2, image_size=16)
    p = tmp_path / "ds.bin"
    data.save_dataset(p, ds)
    back = data.load_dataset(p)
    for f in ("images", "landmarks", "heatmaps"):
        assert getattr(back, f).tobytes() == getattr(ds, f).tobytes()
    assert (back.stride, back.sigma) == (ds.stride, ds.sigma)


# -- augmentation --------------------------------------------------------------------

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_augment_params_in_range(seed):
    flip, scale, angle = data.augment_params(np.random.default_rng(seed))
    assert -30.0 <= angle <= 30.0
    assert 0.75 <= scale <= 1.25
    assert isinstance(flip, bool)


@given(st.booleans(), st.floats(0.75, 1.25), st.floats(-30, 30))
@settings(max_examples=100, deadline=None)
def test_affine_inverse_round_trip(flip, scale, angle):
    m = data.affine_matrix(32, flip, scale, angle)
    pts = np.array([[3.0, 4.0], [15.5, 15.5], [28.0, 1.0]])
    inv = np.linalg.inv(np.vstack([m, [0, 0, 1]]))[:2]
    assert np.allclose(data.apply_affine(data.apply_affine(pts, m), inv), pts, atol=1e-9)
    # the image center is a fixed point
    assert np.allclose(data.apply_affine([[15.5, 15.5]], m), [[15.5, 15.5]])


def test_augment_moves_image_and_landmark_together():
    """A single bright pixel must land where the affine map sends its coordinate."""
    size = 33
    img = np.zeros((size, size, 1), np.float32)
    pt = np.array([[22.0, 9.0]])
    img[9, 22, 0] = 1.0
    for seed in range(20):
        out, new_pt, heat, (flip, scale, angle) = data.augment(img, pt, np.random.default_rng(seed), stride=1)
        m = data.affine_matrix(size, flip, scale, angle)
        assert np.allclose(new_pt, data.apply_affine(pt, m))
        y, x = np.unravel_index(out[..., 0].argmax(), (size, size))
        assert abs(x - new_pt[0, 0]) <= 1 and abs(y - new_pt[0, 1]) <= 1
        assert heat.shape == (size, size, 1)


def test_augment_flip_mirrors_x():
    m = data.affine_matrix(32, True, 1.0, 0.0)
    assert np.allclose(data.apply_affine([[0.0, 7.0]], m), [[31.0, 7.0]])


# -- PCK ---------------------------------------------------------------------------

def test_pck_perfect_is_100():
    ds = data.synth_pose_dataset(20, seed=5, image_size=32, stride=2)
    assert data.pck(ds.heatmaps, ds.landmarks, stride=2) == 100.0


def test_pck_corner_predictions_zero():
    ds = data.synth_pose_dataset(10, seed=5, image_size=32, stride=2)
    pred = np.zeros_like(ds.heatmaps)
    pred[:, 0, 0, :] = 1.0
    # every landmark is at least 2 px from the border and figures are large
    far = np.hypot(*(data.to_image_coords(np.zeros(2), 2)[None, None] - ds.landmarks).transpose(2, 0, 1))
    assert np.all(far > 0.1 * ds.norms[:, None])
    assert data.pck(pred, ds.landmarks, stride=2) == 0.0


def test_pck_hand_count_one_miss():
    gt = np.array([[[0.0, 0.0], [30.0, 0.0], [0.0, 40.0]]])  # diagonal 50, threshold 5
    pred = np.zeros((1, 50, 50, 3))
    pred[0, 0, 3, 0] = 1   # 3 px off: hit
    pred[0, 4, 30, 1] = 1  # 4 px off: hit
    pred[0, 40, 6, 2] = 1  # 6 px off: miss
    assert data.pck(pred, gt, 0.1, stride=1) == pytest.approx(200 / 3)


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_pck_invariant_to_monotone_rescaling(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((4, 8, 8, 3))
    gt = rng.uniform(0, 31, (4, 3, 2))
    base = data.pck(pred, gt, stride=4)
    assert data.pck(np.exp(5 * pred) - 3, gt, stride=4) == base
    assert data.pck(pred ** 3, gt, stride=4) == base


def test_pck_errors():
    with pytest.raises(ValueError):
        data.pck(np.zeros((0, 4, 4, 1)), np.zeros((0, 1, 2)))
    with pytest.raises(ValueError):
        data.pck(np.zeros((1, 4, 4, 1)), np.zeros((1, 1, 2)), threshold_frac=0)


def test_bbox_diagonal():
    assert data.bbox_diagonal(np.array([[1.0, 1.0], [4.0, 5.0], [2.0, 3.0]])) == 5.0
