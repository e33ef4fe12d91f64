"""Token containers passed between the stages."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

CLS_ID = 0


@dataclass(frozen=True)
class VisionToken:
    id: int
    embedding: np.ndarray
    position: tuple[float, float]
    mass: int = 1
    provenance: frozenset = field(default_factory=frozenset)

    def with_embedding(self, embedding: np.ndarray) -> "VisionToken":
        return replace(self, embedding=embedding)


@dataclass
class TokenGrid:
    """Vision tokens laid out on the patch grid, plus the CLS embedding.

    ``depth`` counts the encoder layers already applied to the embeddings.
    Patch token ids run from 1 to ``grid_rows * grid_cols`` in row-major
    order; id 0 is reserved for CLS.
    """

    tokens: list[VisionToken]
    grid_rows: int
    grid_cols: int
    cls: np.ndarray
    depth: int = 0

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.tokens]

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def embeddings(self) -> np.ndarray:
        if not self.tokens:
            return np.zeros((0, self.cls.shape[0]))
        return np.stack([t.embedding for t in self.tokens])

    def stacked(self) -> np.ndarray:
        """CLS row followed by the vision rows, the encoder's input layout."""
        return np.vstack([self.cls[None, :], self.embeddings()])

    def with_embeddings(self, stacked: np.ndarray, depth: int) -> "TokenGrid":
        tokens = [t.with_embedding(stacked[i + 1].copy()) for i, t in enumerate(self.tokens)]
        return TokenGrid(tokens, self.grid_rows, self.grid_cols, stacked[0].copy(), depth)

    def by_id(self) -> dict[int, VisionToken]:
        return {t.id: t for t in self.tokens}


@dataclass
class MultimodalSequence:
    """Ordered language-model input: vision entries first, then text.

    ``hidden`` holds the current residual-stream rows; ``positions`` are the
    original position ids, which survive pruning unchanged.
    """

    ids: np.ndarray
    is_vision: np.ndarray
    hidden: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.is_vision = np.asarray(self.is_vision, dtype=bool)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = len(self.ids)
        if self.hidden.shape[0] != n or len(self.is_vision) != n or len(self.positions) != n:
            raise ValueError("sequence fields disagree in length")
        if len(set(self.ids.tolist())) != n:
            raise ValueError("sequence ids must be unique")
        nv = int(self.is_vision.sum())
        if not self.is_vision[:nv].all():
            raise ValueError("vision entries must precede text entries")

    @property
    def num_vision(self) -> int:
        return int(self.is_vision.sum())

    @property
    def num_text(self) -> int:
        return len(self.ids) - self.num_vision

    @property
    def vision_ids(self) -> list[int]:
        return self.ids[self.is_vision].tolist()

    def drop(self, ids) -> "MultimodalSequence":
        keep = ~np.isin(self.ids, list(ids))
        return MultimodalSequence(
            self.ids[keep], self.is_vision[keep], self.hidden[keep], self.positions[keep]
        )

    def with_hidden(self, hidden: np.ndarray) -> "MultimodalSequence":
        return MultimodalSequence(self.ids, self.is_vision, hidden, self.positions)
