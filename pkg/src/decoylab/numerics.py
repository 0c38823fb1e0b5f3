"""Vector primitives, seeded randomness and the binary image/embedding formats.

Images are numpy arrays of shape ``(height, width, channels)`` holding float64
values in ``[0, 1]``.  Embeddings are 1-D float64 arrays.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

NORM_FLOOR = 1e-12

IMAGE_MAGIC = b"FGI1"
EMBEDDING_MAGIC = b"FGE1"


class DegenerateVectorError(ValueError):
    """Raised when an embedding has (numerically) zero norm."""


class EmptySetError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class FormatError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a generator fully determined by ``(seed, stream)``.

    PCG64 seeded through SeedSequence is platform independent, so equal
    pairs give identical draw sequences everywhere.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(int(stream) & (2**64 - 1),))
    return np.random.Generator(np.random.PCG64(ss))


def check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ShapeError(f"image must be (height, width, channels), got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image pixels must lie in [0, 1]")
    return x


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < NORM_FLOOR:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def normalize_rows(vs: np.ndarray) -> np.ndarray:
    vs = np.asarray(vs, dtype=np.float64)
    norms = np.linalg.norm(vs, axis=-1, keepdims=True)
    bad = ~np.isfinite(norms) | (norms < NORM_FLOOR)
    if np.any(bad):
        rows = np.flatnonzero(bad.reshape(-1))
        raise DegenerateVectorError(f"degenerate rows at {rows[:10].tolist()}")
    return vs / norms


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance between the unit-normalized vectors; in [0, 4]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = normalize(a) - normalize(b)
    return float(np.dot(diff, diff))


def embedding_stats(vs) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population std of normalized embeddings."""
    vs = np.asarray(vs, dtype=np.float64)
    if vs.size == 0:
        raise EmptySetError("embedding_stats needs at least one vector")
    vs = vs.reshape(len(vs), -1)
    mean = vs.mean(axis=0)
    std = np.sqrt(((vs - mean) ** 2).mean(axis=0))
    return mean, std


# --- binary formats -------------------------------------------------------


def write_image(path, x: np.ndarray) -> None:
    x = check_image(x)
    h, w, c = x.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(x.astype("<f4").tobytes(order="C"))


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    w, h, c = struct.unpack_from("<III", data, 4)
    n = w * h * c
    if len(data) != 16 + 4 * n:
        raise FormatError(f"{path}: expected {n} floats")
    px = np.frombuffer(data, dtype="<f4", offset=16, count=n).astype(np.float64)
    return px.reshape(h, w, c)


def write_embeddings(path, vs: np.ndarray) -> None:
    vs = np.asarray(vs, dtype=np.float64)
    if vs.ndim != 2:
        raise ShapeError("embedding cache must be 2-D (count, dim)")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", *vs.shape))
        fh.write(vs.astype("<f4").tobytes(order="C"))


def read_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    count, dim = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * count * dim:
        raise FormatError(f"{path}: expected {count}x{dim} floats")
    vs = np.frombuffer(data, dtype="<f4", offset=12, count=count * dim)
    return vs.astype(np.float64).reshape(count, dim)
