"""Per-layer key/value store addressed by token id."""

from __future__ import annotations

import numpy as np

from .errors import CacheError


class LayerCache:
    __slots__ = ("ids", "is_vision", "keys", "values")

    def __init__(self, dim: int):
        self.ids = np.zeros(0, dtype=np.int64)
        self.is_vision = np.zeros(0, dtype=bool)
        self.keys = np.zeros((0, dim))
        self.values = np.zeros((0, dim))

    def __len__(self):
        return len(self.ids)

    def copy(self) -> "LayerCache":
        out = LayerCache(self.keys.shape[1])
        out.ids = self.ids.copy()
        out.is_vision = self.is_vision.copy()
        out.keys = self.keys.copy()
        out.values = self.values.copy()
        return out


class KVCache:
    """Keys and values for every language-model layer.

    Entries keep insertion order. Text and generated entries can never be
    evicted; ``evict`` only accepts vision ids.
    """

    def __init__(self, num_layers: int, dim: int):
        self.num_layers = num_layers
        self.dim = dim
        self.layers = [LayerCache(dim) for _ in range(num_layers)]

    def _layer(self, layer: int) -> LayerCache:
        if not 0 <= layer < self.num_layers:
            raise CacheError(f"cache has {self.num_layers} layers, no layer {layer}")
        return self.layers[layer]

    def append(self, layer, ids, is_vision, keys, values):
        lc = self._layer(layer)
        ids = np.asarray(ids, dtype=np.int64)
        if np.isin(ids, lc.ids).any():
            raise CacheError(f"duplicate ids appended to layer {layer}")
        lc.ids = np.concatenate([lc.ids, ids])
        lc.is_vision = np.concatenate([lc.is_vision, np.asarray(is_vision, dtype=bool)])
        lc.keys = np.vstack([lc.keys, keys])
        lc.values = np.vstack([lc.values, values])

    def evict(self, layer, ids) -> list[int]:
        """Drop vision entries with the given ids; returns the ids removed."""
        lc = self._layer(layer)
        hit = np.isin(lc.ids, list(ids))
        if (hit & ~lc.is_vision).any():
            raise CacheError("text entries are never evicted")
        removed = lc.ids[hit].tolist()
        keep = ~hit
        lc.ids, lc.is_vision = lc.ids[keep], lc.is_vision[keep]
        lc.keys, lc.values = lc.keys[keep], lc.values[keep]
        return removed

    def length(self, layer: int) -> int:
        return len(self._layer(layer))

    def vision_ids(self, layer: int) -> list[int]:
        lc = self._layer(layer)
        return lc.ids[lc.is_vision].tolist()

    def vision_counts(self) -> list[int]:
        return [int(lc.is_vision.sum()) for lc in self.layers]

    def nbytes(self, bytes_per_element: int, vision_only: bool = True) -> int:
        rows = sum(int(lc.is_vision.sum()) if vision_only else len(lc) for lc in self.layers)
        return rows * 2 * self.dim * bytes_per_element

    def copy(self) -> "KVCache":
        out = KVCache(self.num_layers, self.dim)
        out.layers = [lc.copy() for lc in self.layers]
        return out
