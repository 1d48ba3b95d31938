"""Desk-scale data: IDX archives, a synthetic stick-figure landmark task,
heatmap rendering, augmentation and PCK."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from bnet import bitcore

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}

LANDMARK_NAMES = ("head", "neck", "hip", "hand", "foot")


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


# -- IDX ---------------------------------------------------------------------------

def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read any IDX file into an array with its native dtype."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IdxFormatError("file too short for an IDX header", len(data))
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}", 0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated IDX dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    need = header_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < need:
        raise IdxFormatError(f"truncated IDX payload: expected {need} bytes, file has {len(data)}", len(data))
    if len(data) > need:
        raise IdxFormatError("trailing bytes after IDX payload", need)
    return np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header_end).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09}.get(array.dtype)
    if code is None:
        raise ValueError("write_idx supports uint8 and int8 arrays")
    with (gzip.open(path, "wb") if str(path).endswith(".gz") else open(path, "wb")) as f:
        f.write(struct.pack(">HBB", 0, code, array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx_archive(images_path, labels_path):
    """Images scaled to [0, 1] (float32, [n, rows, cols]) and uint8 labels."""
    magic = _peek_magic(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}", 0)
    magic = _peek_magic(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}", 0)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.uint8)


def _peek_magic(path) -> int:
    with _open(path) as f:
        head = f.read(4)
    if len(head) < 4:
        raise IdxFormatError("file too short for an IDX header", len(head))
    return struct.unpack(">I", head)[0]


# -- synthetic pose task --------------------------------------------------------------

@dataclass
class PoseDataset:
    images: np.ndarray      # [n, S, S, 1] float32 in [0, 1]
    landmarks: np.ndarray   # [n, L, 2] (x, y) in image pixels
    heatmaps: np.ndarray    # [n, S/stride, S/stride, L] float32 in [0, 1]
    stride: int = 4
    sigma: float = 1.0

    def __len__(self):
        return self.images.shape[0]

    @property
    def norms(self) -> np.ndarray:
        return bbox_diagonal(self.landmarks)

    def subset(self, idx) -> "PoseDataset":
        return PoseDataset(self.images[idx], self.landmarks[idx], self.heatmaps[idx], self.stride, self.sigma)


def bbox_diagonal(landmarks) -> np.ndarray:
    """Diagonal of the landmark bounding box; [L, 2] -> scalar, [n, L, 2] -> [n]."""
    extent = landmarks.max(axis=-2) - landmarks.min(axis=-2)
    return np.hypot(extent[..., 0], extent[..., 1])


def to_heatmap_coords(points, stride):
    """Image pixel coordinates -> heatmap pixel coordinates (pixel centers aligned)."""
    return (np.asarray(points, dtype=np.float64) + 0.5) / stride - 0.5


def to_image_coords(points, stride):
    return (np.asarray(points, dtype=np.float64) + 0.5) * stride - 0.5


def render_heatmaps(landmarks, size, stride=4, sigma=1.0) -> np.ndarray:
    """Unnormalized Gaussians (value 1 at the landmark), [size, size, L]."""
    pts = to_heatmap_coords(landmarks, stride)
    grid = np.arange(size, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - pts[:, 0:1]) ** 2) / (2 * sigma ** 2))  # [L, W]
    gy = np.exp(-((grid[None, :] - pts[:, 1:2]) ** 2) / (2 * sigma ** 2))  # [L, H]
    return (gy[:, :, None] * gx[:, None, :]).transpose(1, 2, 0).astype(np.float32)


def _segment_distance(px, py, a, b):
    ab = b - a
    t = ((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / max(ab @ ab, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _polar(angle_deg, length):
    a = np.deg2rad(angle_deg)
    return np.array([np.cos(a), np.sin(a)]) * length


def _sample_figure(rng, size):
    """Joint positions of one stick figure; returns (landmarks [5, 2], elbow, knee, scale)."""
    margin = 2.0
    while True:
        scale = rng.uniform(0.22, 0.34) * size
        hip = rng.uniform(0.3 * size, 0.7 * size, 2)
        torso = rng.uniform(-115, -65)  # pointing up (image y grows downwards)
        neck = hip + _polar(torso, scale)
        head = neck + _polar(torso + rng.uniform(-25, 25), 0.45 * scale)
        elbow = neck + _polar(rng.uniform(0, 360), 0.5 * scale)
        hand = elbow + _polar(rng.uniform(0, 360), 0.45 * scale)
        leg_dir = torso + 180 + rng.uniform(-45, 45)
        knee = hip + _polar(leg_dir, 0.55 * scale)
        foot = knee + _polar(leg_dir + rng.uniform(-60, 60), 0.5 * scale)
        pts = np.stack([head, neck, hip, hand, foot, elbow, knee])
        if pts.min() >= margin and pts.max() <= size - 1 - margin:
            return np.stack([head, neck, hip, hand, foot]), elbow, knee, scale


def render_figure(landmarks, elbow, knee, scale, size, rng=None, noise=0.05) -> np.ndarray:
    head, neck, hip, hand, foot = landmarks
    py, px = np.mgrid[0:size, 0:size].astype(np.float64)
    thick = 0.6 + 0.02 * scale
    img = np.zeros((size, size))
    for a, b in ((neck, hip), (neck, elbow), (elbow, hand), (hip, knee), (knee, foot), (neck, head)):
        d = _segment_distance(px, py, a, b)
        img = np.maximum(img, np.clip(thick + 0.5 - d, 0.0, 1.0))
    r = 0.16 * scale
    img = np.maximum(img, np.clip(r + 0.5 - np.hypot(px - head[0], py - head[1]), 0.0, 1.0))
    # hand and foot markers make the two chain ends distinguishable
    img = np.maximum(img, 0.6 * np.clip(1.8 - np.hypot(px - hand[0], py - hand[1]), 0.0, 1.0))
    sq = np.maximum(np.abs(px - foot[0]), np.abs(py - foot[1]))
    img = np.maximum(img, 0.6 * np.clip(1.8 - sq, 0.0, 1.0))
    if rng is not None and noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_pose_dataset(n, seed=0, num_landmarks=5, image_size=64, sigma=1.0, stride=4) -> PoseDataset:
    """Deterministic stick-figure images with landmark heatmaps."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 1 <= num_landmarks <= len(LANDMARK_NAMES):
        raise ValueError(f"num_landmarks must be in 1..{len(LANDMARK_NAMES)}")
    if image_size % stride:
        raise ValueError("image size must be divisible by the heatmap stride")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    hsize = image_size // stride
    images = np.empty((n, image_size, image_size, 1), dtype=np.float32)
    landmarks = np.empty((n, num_landmarks, 2))
    heatmaps = np.empty((n, hsize, hsize, num_landmarks), dtype=np.float32)
    for i in range(n):
        pts, elbow, knee, scale = _sample_figure(rng, image_size)
        images[i, :, :, 0] = render_figure(pts, elbow, knee, scale, image_size, rng)
        landmarks[i] = pts[:num_landmarks].astype(np.float32)  # exact in the f32 tensor cache
        heatmaps[i] = render_heatmaps(landmarks[i], hsize, stride, sigma)
    return PoseDataset(images, landmarks, heatmaps, stride, sigma)


# -- augmentation ----------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentRecipe:
    flip: bool = True
    scale: tuple = (0.75, 1.25)
    rotation: tuple = (-30.0, 30.0)


def augment_params(rng, recipe: AugmentRecipe = AugmentRecipe()):
    flip = bool(recipe.flip and rng.random() < 0.5)
    scale = float(rng.uniform(*recipe.scale))
    angle = float(rng.uniform(*recipe.rotation))
    return flip, scale, angle


def affine_matrix(size, flip, scale, angle_deg):
    """2x3 forward map on (x, y) image coordinates about the image center."""
    c = (size - 1) / 2.0
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) * scale
    if flip:
        rot = rot @ np.diag([-1.0, 1.0])
    offset = np.array([c, c]) - rot @ np.array([c, c])
    return np.hstack([rot, offset[:, None]])


def apply_affine(points, m):
    points = np.asarray(points, dtype=np.float64)
    return points @ m[:, :2].T + m[:, 2]


def augment(image, landmarks, rng, recipe: AugmentRecipe = AugmentRecipe(), stride=4, sigma=1.0):
    """Random flip/scale/rotation applied consistently to an image and its landmarks.

    Returns (image, landmarks, heatmaps, (flip, scale, angle)).
    """
    flip, scale, angle = augment_params(rng, recipe)
    size = image.shape[0]
    m = affine_matrix(size, flip, scale, angle)
    inv = np.linalg.inv(np.vstack([m, [0, 0, 1]]))[:2]
    # ndimage works in (row, col) = (y, x) order
    swap = np.array([[0, 1], [1, 0]])
    mat_rc = swap @ inv[:, :2] @ swap
    off_rc = swap @ inv[:, 2]
    out = np.empty_like(image)
    for ch in range(image.shape[-1]):
        out[..., ch] = ndimage.affine_transform(image[..., ch], mat_rc, off_rc, order=1, mode="constant", cval=0.0)
    new_pts = apply_affine(landmarks, m)
    heat = render_heatmaps(new_pts, size // stride, stride, sigma)
    return out, new_pts, heat, (flip, scale, angle)


# -- metric -------------------------------------------------------------------------------

def heatmap_argmax(heatmaps, stride=4):
    """[n, h, w, L] heatmaps -> [n, L, 2] (x, y) predictions in image pixels."""
    heatmaps = np.asarray(heatmaps)
    n, h, w, lm = heatmaps.shape
    flat = heatmaps.transpose(0, 3, 1, 2).reshape(n, lm, h * w)
    idx = flat.argmax(axis=-1)
    ys, xs = np.divmod(idx, w)
    return to_image_coords(np.stack([xs, ys], axis=-1), stride)


def pck(pred_heatmaps, gt_landmarks, threshold_frac=0.1, norms=None, stride=4) -> float:
    """Percentage of landmarks whose heatmap argmax lies within
    ``threshold_frac`` times the figure's bounding-box diagonal."""
    pred_heatmaps = np.asarray(pred_heatmaps)
    if pred_heatmaps.size == 0 or pred_heatmaps.shape[0] == 0:
        raise ValueError("no predictions")
    if threshold_frac <= 0:
        raise ValueError("threshold_frac must be positive")
    gt = np.asarray(gt_landmarks, dtype=np.float64)
    norms = bbox_diagonal(gt) if norms is None else np.asarray(norms)
    pred = heatmap_argmax(pred_heatmaps, stride)
    dist = np.hypot(*(pred - gt).transpose(2, 0, 1))
    hits = dist <= threshold_frac * norms[:, None]
    return 100.0 * float(hits.mean())


# -- cache in the tensor container format ------------------------------------------------

_DS_MAGIC = b"BNDS"


def save_dataset(path, ds: PoseDataset) -> None:
    with open(path, "wb") as f:
        f.write(_DS_MAGIC + struct.pack("<If", ds.stride, ds.sigma))
        for arr in (ds.images, ds.landmarks, ds.heatmaps):
            bitcore.write_tensor(f, arr)


def load_dataset(path) -> PoseDataset:
    with open(path, "rb") as f:
        if f.read(4) != _DS_MAGIC:
            raise bitcore.FormatError("not a cached dataset")
        stride, sigma = struct.unpack("<If", f.read(8))
        images, landmarks, heatmaps = (bitcore.read_tensor(f) for _ in range(3))
    return PoseDataset(images, landmarks.astype(np.float64), heatmaps, stride, float(sigma))
