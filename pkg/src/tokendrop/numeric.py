"""Dense numeric kernels and the seeded random source.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is pure.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRowError, ShapeError, UndefinedSimilarityError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax(m, mask=None) -> np.ndarray:
    """Softmax along each row.

    ``mask`` is a boolean matrix of the same shape where ``True`` marks the
    entries that take part; masked entries come out as exactly 0.
    """
    m = as_matrix(m)
    if mask is None:
        shifted = m - m.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != m.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match {m.shape}")
    live = mask.any(axis=1)
    if not live.all():
        raise DegenerateRowError(f"row {int(np.argmin(live))} is fully masked")
    filled = np.where(mask, m, -np.inf)
    shifted = filled - filled.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def scaled_attention(q, k, v, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(softmax(q k^T / sqrt(d_k)) v, attention map)``."""
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if v.shape[0] != k.shape[0]:
        raise ShapeError(f"{v.shape[0]} values for {k.shape[0]} keys")
    logits = (q @ k.T) / np.sqrt(k.shape[1])
    attn = row_softmax(logits, mask)
    return attn @ v, attn


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _splitmix64_block(state: int, n: int) -> np.ndarray:
    steps = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(state) + steps * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededSource:
    """splitmix64 stream.

    ``next_u64`` yields the raw outputs; ``uniform`` maps the high 63 bits
    of each output onto [-1, 1] as ``(x >> 1) / 2**62 - 1``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def u64(self, n: int) -> np.ndarray:
        out = _splitmix64_block(self.state, n)
        self.state = (self.state + n * int(_GOLDEN)) & _MASK64
        return out

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        raw = self.u64(n) >> np.uint64(1)
        return raw.astype(np.float64) * 2.0**-62 - 1.0

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        return self.uniform(rows * cols).reshape(rows, cols)

    def unit(self, n: int) -> np.ndarray:
        """Uniform values on [0, 1]."""
        return (self.uniform(n) + 1.0) / 2.0

    def integers(self, n: int, high: int) -> np.ndarray:
        """Values in ``[0, high)`` from the raw stream (modulo reduction)."""
        return (self.u64(n) % np.uint64(high)).astype(np.int64)
