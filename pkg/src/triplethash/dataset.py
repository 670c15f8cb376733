"""Dataset loading, image rotation and triplet construction.

Supports the MNIST IDX format and the CIFAR-10 binary batch format.
Training data is unlabeled from the model's point of view: labels are
carried through only so the evaluation stage can score retrieval.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, InsufficientDataError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


@dataclass(frozen=True)
class ImageSample:
    """One image with pixels in [0, 1], an optional label, and its source index."""

    pixels: np.ndarray  # H x W x C float64 in [0, 1]
    label: Optional[int]
    index: int


@dataclass(frozen=True)
class Dataset:
    samples: list
    name: str
    dims: tuple  # (H, W, C)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def subset(self, indices, name=None):
        """New dataset holding the given samples, re-indexed from 0."""
        picked = [
            ImageSample(self.samples[i].pixels, self.samples[i].label, new_idx)
            for new_idx, i in enumerate(indices)
        ]
        return Dataset(picked, name or self.name, self.dims)

    def pixel_matrix(self):
        """All images flattened row-wise into an (n, H*W*C) array."""
        return np.stack([s.pixels.reshape(-1) for s in self.samples])


@dataclass(frozen=True)
class Triplet:
    anchor_index: int
    positive: ImageSample  # rotated copy of the anchor, stored eagerly
    negative_index: int
    rotation_degrees: float


@dataclass(frozen=True)
class RotationConfig:
    degrees: tuple = (-10.0, -5.0, 5.0, 10.0)

    def __post_init__(self):
        if len(self.degrees) == 0:
            raise ConfigError("rotation degree set must be non-empty")
        if any(d == 0 for d in self.degrees):
            raise ConfigError("0-degree rotation would make positive == anchor")


def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"{path}: truncated file (wanted {n} bytes, got {len(data)})")
    return data


def load_mnist_idx(images_path, labels_path):
    """Load an MNIST-style IDX image/label file pair into a Dataset.

    Both files are big-endian; magic numbers 0x803 (images) and 0x801
    (labels). Pixel bytes are scaled to [0, 1] by dividing by 255.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
        raw = _read_exact(f, count * rows * cols, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad IDX label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)

    if label_count != count:
        raise FormatError(
            f"image/label count mismatch: {count} images vs {label_count} labels"
        )

    samples = [
        ImageSample(images[i].astype(np.float64)[:, :, None] / 255.0, int(labels[i]), i)
        for i in range(count)
    ]
    return Dataset(samples, "mnist", (rows, cols, 1))


def write_mnist_idx(dataset, images_path, labels_path):
    """Write a Dataset back out as an IDX file pair (round-trip/test helper)."""
    h, w, c = dataset.dims
    if c != 1:
        raise ConfigError("IDX writer only supports single-channel images")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(dataset), h, w))
        for s in dataset.samples:
            f.write(np.round(s.pixels[:, :, 0] * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset)))
        f.write(bytes(0 if s.label is None else s.label for s in dataset.samples))


def load_cifar10(batch_paths):
    """Load CIFAR-10 binary batches (3073-byte records, label byte first)."""
    samples = []
    idx = 0
    for path in batch_paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise FormatError(
                f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max(initial=0) > 9:
            raise FormatError(f"{path}: label byte > 9")
        # channel-major R,G,B planes -> H x W x C
        pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        for rec_label, rec_pixels in zip(labels, pixels):
            samples.append(
                ImageSample(rec_pixels.astype(np.float64) / 255.0, int(rec_label), idx)
            )
            idx += 1
    return Dataset(samples, "cifar10", (32, 32, 3))


def write_cifar10(dataset, path):
    """Write a Dataset as one CIFAR-10 binary batch (round-trip/test helper)."""
    h, w, c = dataset.dims
    if (h, w, c) != (32, 32, 3):
        raise ConfigError("CIFAR-10 writer requires 32x32x3 images")
    with open(path, "wb") as f:
        for s in dataset.samples:
            f.write(bytes([0 if s.label is None else s.label]))
            planes = np.round(s.pixels * 255.0).astype(np.uint8).transpose(2, 0, 1)
            f.write(planes.tobytes())


def rotate_image(image, degrees):
    """Rotate about the image center with bilinear interpolation.

    Out-of-bounds source coordinates fill with 0; output is clamped to
    [0, 1] and keeps the input dims.
    """
    pixels = image.pixels
    h, w, _ = pixels.shape
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate output coordinates back into the source frame
    src_y = cy + cos_t * dy + sin_t * dx
    src_x = cx - sin_t * dy + cos_t * dx

    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = src_y - y0
    wx = src_x - x0

    out = np.zeros_like(pixels)
    for oy, ox, weight in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        ys, xs = y0 + oy, x0 + ox
        valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        ys_c = np.clip(ys, 0, h - 1)
        xs_c = np.clip(xs, 0, w - 1)
        out += (weight * valid)[:, :, None] * pixels[ys_c, xs_c, :]

    return ImageSample(np.clip(out, 0.0, 1.0), image.label, image.index)


def sample_triplets(dataset, config, seed, count):
    """Build `count` (anchor, rotated positive, random negative) triplets.

    Anchors cycle through seeded shuffles of the dataset so coverage stays
    even; rotation degrees are uniform over the configured set; negatives
    are uniform over all other indices. Pure function of its arguments.
    """
    n = len(dataset)
    if n < 2:
        raise InsufficientDataError("need at least 2 samples to form triplets")
    if count < 1:
        raise ConfigError("triplet count must be >= 1")

    rng = np.random.default_rng(seed)
    degrees = np.asarray(config.degrees, dtype=np.float64)

    anchors = np.concatenate(
        [rng.permutation(n) for _ in range((count + n - 1) // n)]
    )[:count]
    degree_picks = degrees[rng.integers(0, len(degrees), size=count)]
    # uniform over the n-1 indices != anchor
    negatives = rng.integers(0, n - 1, size=count)
    negatives[negatives >= anchors] += 1

    triplets = []
    for a, neg, deg in zip(anchors, negatives, degree_picks):
        positive = rotate_image(dataset[int(a)], float(deg))
        triplets.append(Triplet(int(a), positive, int(neg), float(deg)))
    return triplets
