"""Binary code generation and exact Hamming-distance search.

Codes are packed LSB-first into 64-bit words (bit m lives in word m//64
at position m%64); padding bits past the code width are always zero.
Search is a vectorized linear scan with word-level popcount, which is
milliseconds at desk scale. Ties are broken by ascending id so rankings
are deterministic.
"""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError, ShapeError
from .network import forward_array

CODES_MAGIC = b"UTHC"
CODES_VERSION = 1


def _word_count(bit_width):
    return (bit_width + 63) // 64


def pack_bits(bits):
    """Pack a boolean/0-1 vector (or batch of them) into uint64 words, LSB-first."""
    bits = np.asarray(bits).astype(bool)
    m = bits.shape[-1]
    lead = bits.shape[:-1]
    flat = bits.reshape(-1, m).astype(np.uint64)
    words = np.zeros((flat.shape[0], _word_count(m)), dtype=np.uint64)
    for w in range(words.shape[1]):
        chunk = flat[:, w * 64 : (w + 1) * 64]
        powers = np.uint64(1) << np.arange(chunk.shape[1], dtype=np.uint64)
        words[:, w] = (chunk * powers).sum(axis=1)
    return words.reshape(lead + (words.shape[1],))


def unpack_bits(words, bit_width):
    """Inverse of pack_bits: uint64 words back to a boolean vector."""
    words = np.asarray(words, dtype=np.uint64)
    positions = np.arange(bit_width)
    return (
        (words[..., positions // 64] >> (positions % 64).astype(np.uint64))
        & np.uint64(1)
    ).astype(bool)


@dataclass(frozen=True)
class HashCode:
    words: np.ndarray  # uint64, length ceil(bit_width/64)
    bit_width: int

    def bits(self):
        return unpack_bits(self.words, self.bit_width)

    def __eq__(self, other):
        return (
            isinstance(other, HashCode)
            and self.bit_width == other.bit_width
            and np.array_equal(self.words, other.words)
        )


@dataclass(frozen=True)
class Neighbor:
    id: int
    distance: int


@dataclass(frozen=True)
class CodeDatabase:
    words: np.ndarray  # (n, word_count) uint64
    ids: np.ndarray  # (n,) int64
    labels: Optional[np.ndarray]  # (n,) int64, evaluation only
    bit_width: int

    def __len__(self):
        return self.words.shape[0]

    def code(self, row):
        return HashCode(self.words[row].copy(), self.bit_width)

    def subset(self, rows):
        return CodeDatabase(
            self.words[rows].copy(),
            self.ids[rows].copy(),
            None if self.labels is None else self.labels[rows].copy(),
            self.bit_width,
        )


def binarize(features, threshold=0.5):
    """Threshold an M-vector into a HashCode; bit m = 1 iff F_m > threshold."""
    f = np.asarray(features, dtype=np.float64)
    return HashCode(pack_bits(f > threshold), f.shape[-1])


def hamming_distance(a, b):
    if a.bit_width != b.bit_width:
        raise ShapeError(f"bit width mismatch: {a.bit_width} vs {b.bit_width}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def _all_distances(db, query):
    if db.bit_width != query.bit_width:
        raise ShapeError(f"bit width mismatch: {db.bit_width} vs {query.bit_width}")
    return np.bitwise_count(db.words ^ query.words[None, :]).sum(axis=1).astype(np.int64)


def knn_search(db, query, k):
    """k nearest codes by Hamming distance, ties broken by ascending id."""
    if k < 1:
        raise ShapeError("k must be >= 1")
    dist = _all_distances(db, query)
    order = np.lexsort((db.ids, dist))[: min(k, len(db))]
    return [Neighbor(int(db.ids[i]), int(dist[i])) for i in order]


def radius_search(db, query, r):
    """All codes within Hamming distance r, ordered by (distance, id)."""
    if not (0 <= r <= db.bit_width):
        raise ShapeError(f"radius {r} outside [0, {db.bit_width}]")
    dist = _all_distances(db, query)
    hit = np.flatnonzero(dist <= r)
    order = hit[np.lexsort((db.ids[hit], dist[hit]))]
    return [Neighbor(int(db.ids[i]), int(dist[i])) for i in order]


def lsh_encode(features, bit_width, seed):
    """Random-hyperplane codes: bit m = 1 iff the m-th projection is > 0."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    rng = np.random.default_rng(seed)
    planes = rng.standard_normal((bit_width, f.shape[1]))
    projections = f @ planes.T
    packed = pack_bits(projections > 0.0)
    return [HashCode(packed[i], bit_width) for i in range(f.shape[0])]


def encode_dataset(params, dataset, threshold=0.5, batch_size=256):
    """Forward every sample through the network and binarize into a CodeDatabase."""
    n = len(dataset)
    rows = []
    for start in range(0, n, batch_size):
        batch = dataset.samples[start : start + batch_size]
        x = np.stack([s.pixels for s in batch])
        features, _ = forward_array(params, x)
        rows.append(pack_bits(features > threshold))
    words = np.concatenate(rows, axis=0) if rows else np.zeros((0, 1), dtype=np.uint64)
    ids = np.array([s.index for s in dataset.samples], dtype=np.int64)
    has_labels = n > 0 and all(s.label is not None for s in dataset.samples)
    labels = (
        np.array([s.label for s in dataset.samples], dtype=np.int64) if has_labels else None
    )
    return CodeDatabase(words, ids, labels, params.bit_width)


def codes_from_list(codes, ids, labels=None):
    """Assemble a CodeDatabase from HashCode objects and parallel id/label lists."""
    if len(codes) != len(ids) or (labels is not None and len(labels) != len(codes)):
        raise ShapeError("codes, ids and labels must be parallel lists")
    widths = {c.bit_width for c in codes}
    if len(widths) > 1:
        raise ShapeError("codes must share one bit width")
    bit_width = widths.pop() if widths else 0
    words = (
        np.stack([c.words for c in codes])
        if codes
        else np.zeros((0, _word_count(bit_width or 1)), dtype=np.uint64)
    )
    return CodeDatabase(
        words,
        np.asarray(ids, dtype=np.int64),
        None if labels is None else np.asarray(labels, dtype=np.int64),
        bit_width,
    )


def save_codes(db, path):
    """Little-endian code file: header, ids, packed words, optional labels."""
    with open(path, "wb") as f:
        f.write(CODES_MAGIC)
        f.write(
            struct.pack("<IIQB", CODES_VERSION, db.bit_width, len(db), db.labels is not None)
        )
        f.write(np.ascontiguousarray(db.ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(db.words, dtype="<u8").tobytes())
        if db.labels is not None:
            f.write(np.ascontiguousarray(db.labels, dtype="<i8").tobytes())


def load_codes(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CODES_MAGIC:
            raise FormatError(f"{path}: bad code-file magic {magic!r}")
        header = f.read(17)
        if len(header) != 17:
            raise FormatError(f"{path}: truncated header")
        version, bit_width, count, has_labels = struct.unpack("<IIQB", header)
        if version != CODES_VERSION:
            raise FormatError(f"{path}: unsupported code-file version {version}")

        def read_array(dtype, shape):
            n_bytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
            raw = f.read(n_bytes)
            if len(raw) != n_bytes:
                raise FormatError(f"{path}: truncated payload")
            return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

        ids = read_array("<i8", (count,))
        words = read_array("<u8", (count, _word_count(bit_width)))
        labels = read_array("<i8", (count,)) if has_labels else None
        if f.read(1) != b"":
            raise FormatError(f"{path}: trailing bytes")
    return CodeDatabase(words, ids.astype(np.int64), labels, bit_width)
