import hashlib
import logging
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from trajectory.model import GridMismatch
from utils.errors import EngineError

logger = logging.getLogger(__name__)

MAGIC = b"OCBK"
HEADER_SIZE = 12  # magic + K (u32) + D (u32)


class BadMagic(EngineError):
    pass


class TruncatedBlob(EngineError):
    pass


class NonFiniteEntry(EngineError):
    pass


class IndexOutOfRange(EngineError):
    pass


@dataclass(frozen=True, eq=False)
class Codebook:
    """
    Frozen visual codebook E (K x D).

    Values come from little-endian float32 storage and are held as float64.
    """

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise EngineError(f"codebook must be a non-empty K x D matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise NonFiniteEntry("codebook contains NaN or infinite entries")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def k(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]

    @cached_property
    def fingerprint(self):
        return hashlib.sha1(self.rows.astype("<f8").tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class EmbeddingGrid:
    """Z: H_q x W_q x D embedding grid of one image segment."""

    values: np.ndarray

    @property
    def h(self):
        return self.values.shape[0]

    @property
    def w(self):
        return self.values.shape[1]

    @property
    def d(self):
        return self.values.shape[2]


def load_codebook(blob):
    """
    Parse a binary codebook blob.

    Layout: b"OCBK", K (u32 LE), D (u32 LE), then K*D float32 LE values row-major.

    Args:
        blob: Raw bytes

    Returns:
        cb: Codebook
    """
    if len(blob) < HEADER_SIZE:
        raise TruncatedBlob(f"blob has {len(blob)} bytes, header needs {HEADER_SIZE}")
    if blob[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {bytes(blob[:4])!r}")

    k, d = (int(v) for v in np.frombuffer(blob, dtype="<u4", count=2, offset=4))
    if k < 1 or d < 1:
        raise TruncatedBlob(f"header declares an empty codebook ({k}x{d})")

    expected = HEADER_SIZE + 4 * k * d
    if len(blob) < expected:
        raise TruncatedBlob(f"payload has {len(blob) - HEADER_SIZE} bytes, expected {4 * k * d}")
    if len(blob) > expected:
        raise TruncatedBlob(f"{len(blob) - expected} unexpected trailing bytes after payload")

    values = np.frombuffer(blob, dtype="<f4", count=k * d, offset=HEADER_SIZE).reshape(k, d)
    if not np.all(np.isfinite(values)):
        raise NonFiniteEntry("codebook payload contains NaN or infinite entries")
    return Codebook(rows=values.astype(np.float64))


def dump_codebook(cb):
    """Serialize a codebook to the binary layout read by load_codebook."""
    header = MAGIC + np.array([cb.k, cb.d], dtype="<u4").tobytes()
    return header + cb.rows.astype("<f4").tobytes()


def save_codebook(cb, output_path):
    directory = os.path.dirname(output_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(output_path, "wb") as f:
        f.write(dump_codebook(cb))
    logger.info(f"Saved codebook to {output_path} (K={cb.k}, D={cb.d})")


def read_codebook(path):
    with open(path, "rb") as f:
        return load_codebook(f.read())


def generate_codebook(k, d, seed):
    """
    Reproducible random codebook with unit-variance Gaussian entries.

    Draws from numpy's PCG64 generator seeded with `seed`; values are rounded
    to float32 so that save/load is exact.
    """
    if k < 1 or d < 1:
        raise EngineError(f"codebook size must be positive, got K={k}, D={d}")
    rng = np.random.Generator(np.random.PCG64(seed))
    values = rng.standard_normal((k, d)).astype(np.float32)
    return Codebook(rows=values.astype(np.float64))


def lookup(cb, c):
    """e_t = E[c_t]."""
    if isinstance(c, bool) or not 0 <= int(c) < cb.k:
        raise IndexOutOfRange(f"code index {c} outside [0, {cb.k})")
    return cb.rows[int(c)]


def reshape_grid(seg, cb):
    """
    Build the embedding grid Z for an image-token segment.

    Args:
        seg: ImageTokens segment (row-major indices)
        cb: Codebook

    Returns:
        grid: EmbeddingGrid with values[i][j] = E[indices[i * W_q + j]]
    """
    indices = np.asarray(seg.indices, dtype=np.int64)
    if indices.size != seg.grid_h * seg.grid_w:
        raise GridMismatch(f"{indices.size} indices do not fill a {seg.grid_h}x{seg.grid_w} grid")
    if indices.size and (indices.min() < 0 or indices.max() >= cb.k):
        bad = int(indices[(indices < 0) | (indices >= cb.k)][0])
        raise IndexOutOfRange(f"code index {bad} outside [0, {cb.k})")
    values = cb.rows[indices].reshape(seg.grid_h, seg.grid_w, cb.d)
    return EmbeddingGrid(values=values)
