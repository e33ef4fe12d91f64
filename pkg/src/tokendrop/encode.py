"""Vision-encoding stage: local spatial merging and key-token retention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedSimilarityError
from .model import ToyWeights, encoder_layer_forward, encode_patches, forward_encoder
from .tokens import TokenGrid, VisionToken

CLS_WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class EncodeConfig:
    """``key_layer=None`` means the penultimate encoder layer."""

    window_k: int = 2
    tau_mean: float = 0.8
    key_layer: int | None = None
    iqr_factor: float = 1.5

    def __post_init__(self):
        if self.window_k < 2:
            raise ConfigError("window_k must be >= 2")
        if not 0.0 < self.tau_mean < 1.0:
            raise ConfigError("tau_mean must lie in (0, 1)")

    def resolved_key_layer(self, encoder_layers: int) -> int:
        layer = max(encoder_layers - 2, 0) if self.key_layer is None else self.key_layer
        if not 0 <= layer < encoder_layers:
            raise ConfigError(f"key_layer {layer} outside encoder depth {encoder_layers}")
        return layer


@dataclass(frozen=True)
class MergeEvent:
    window: int
    member_ids: tuple[int, ...]
    score: float
    threshold: float
    result_id: int


@dataclass(frozen=True)
class KeyTokenSet:
    member_ids: frozenset
    scores: dict
    threshold_used: float

    def __contains__(self, token_id) -> bool:
        return token_id in self.member_ids

    def __len__(self) -> int:
        return len(self.member_ids)

    @classmethod
    def empty(cls) -> "KeyTokenSet":
        return cls(frozenset(), {}, float("inf"))


def partition_windows(grid: TokenGrid, k: int) -> list[list[int]]:
    """Non-overlapping k x k tiles in row-major tile order.

    Returns indices into ``grid.tokens``. Boundary tiles of a grid whose
    sides are not multiples of ``k`` come out smaller.
    """
    if k < 2:
        raise ConfigError("window size k must be >= 2")
    if k > grid.grid_rows and k > grid.grid_cols:
        raise ConfigError(f"window size {k} exceeds both grid sides {grid.grid_rows}x{grid.grid_cols}")
    tiles_c = -(-grid.grid_cols // k)
    buckets: dict[int, list[tuple[int, int, int]]] = {}
    for idx, tok in enumerate(grid.tokens):
        r, c = int(round(tok.position[0])), int(round(tok.position[1]))
        buckets.setdefault((r // k) * tiles_c + c // k, []).append((r, c, idx))
    return [[idx for _, _, idx in sorted(buckets[w])] for w in sorted(buckets)]


def window_similarity(embeddings) -> float:
    """Sum of cosine similarities over ordered pairs of distinct members."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.shape[0] < 2:
        raise ValueError("window similarity needs at least two tokens")
    norms = np.linalg.norm(e, axis=1)
    if (norms == 0.0).any():
        raise UndefinedSimilarityError("zero-embedding token in window")
    u = e / norms[:, None]
    gram = np.clip(u @ u.T, -1.0, 1.0)
    return float(gram.sum() - np.trace(gram))


def merge_threshold(window_size: int, tau_mean: float) -> float:
    return tau_mean * window_size * (window_size - 1)


def merge_decision(score: float, window_size: int, tau_mean: float) -> bool:
    return score > merge_threshold(window_size, tau_mean)


def merge_window(tokens: list[VisionToken], cls_attention) -> VisionToken:
    """Collapse a window into one token.

    Members are weighted by ``mass * cls_attention``; if every CLS weight in
    the window is negligible the weights fall back to mass alone.
    """
    mass = np.array([t.mass for t in tokens], dtype=np.float64)
    cls = np.asarray(cls_attention, dtype=np.float64)
    if np.all(cls <= CLS_WEIGHT_FLOOR):
        raw = mass
    else:
        raw = mass * cls
    w = raw / raw.sum()
    emb = w @ np.stack([t.embedding for t in tokens])
    total = int(mass.sum())
    pos = np.array([t.position for t in tokens]) * mass[:, None]
    centroid = pos.sum(axis=0) / total
    prov = frozenset().union(*(t.provenance for t in tokens))
    return VisionToken(min(t.id for t in tokens), emb, (float(centroid[0]), float(centroid[1])), total, prov)


def local_spatial_merge(grid: TokenGrid, weights: ToyWeights, config: EncodeConfig):
    """Merge highly similar windows after the first encoder layer.

    Similarity is judged on the layer-0 inputs; merged embeddings average the
    layer-0 outputs with layer-0 CLS attention as weights, and the result is
    the input of encoder layer 1. Returns ``(grid', merge_events)``.
    """
    if grid.depth != 0 or any(t.mass != 1 for t in grid.tokens):
        raise ConfigError("local spatial merging expects a freshly encoded grid")
    out, attn = encoder_layer_forward(grid.stacked(), weights, 0)
    cls_row = attn[0, 1:]
    after = grid.with_embeddings(out, depth=1)

    merged: list[VisionToken] = []
    events: list[MergeEvent] = []
    for w_idx, members in enumerate(partition_windows(grid, config.window_k)):
        if len(members) < 2:
            merged.extend(after.tokens[i] for i in members)
            continue
        score = window_similarity([grid.tokens[i].embedding for i in members])
        if merge_decision(score, len(members), config.tau_mean):
            tok = merge_window([after.tokens[i] for i in members], cls_row[members])
            merged.append(tok)
            events.append(MergeEvent(w_idx, tuple(grid.tokens[i].id for i in members), score,
                                     merge_threshold(len(members), config.tau_mean), tok.id))
        else:
            merged.extend(after.tokens[i] for i in members)
    merged.sort(key=lambda t: t.id)
    return TokenGrid(merged, grid.grid_rows, grid.grid_cols, after.cls, depth=1), events


def key_set_from_scores(ids, scores, iqr_factor: float = 1.5) -> KeyTokenSet:
    """Outliers above the IQR upper fence ``Q3 + iqr_factor * IQR``.

    With fewer than four scores the fence becomes ``mean + iqr_factor * std``.
    """
    ids = list(ids)
    s = np.asarray(scores, dtype=np.float64)
    if len(ids) == 0:
        return KeyTokenSet.empty()
    if len(ids) < 4:
        mu = float(s.mean() + iqr_factor * s.std())
    else:
        q1, q3 = np.percentile(s, [25, 75])
        mu = float(q3 + iqr_factor * (q3 - q1))
    members = frozenset(i for i, v in zip(ids, s) if v > mu)
    return KeyTokenSet(members, {i: float(v) for i, v in zip(ids, s)}, mu)


def build_key_set(grid: TokenGrid, weights: ToyWeights, config: EncodeConfig) -> KeyTokenSet:
    key_set, _ = _key_set_and_features(grid, weights, config)
    return key_set


def _key_set_and_features(grid, weights, config):
    layer = config.resolved_key_layer(weights.config.encoder_layers)
    feats, attn = forward_encoder(grid, weights, layer)
    return key_set_from_scores(grid.ids, attn[0, 1:], config.iqr_factor), feats


@dataclass
class EncodeResult:
    """Everything the later stages need from the encoder.

    ``features`` holds the vision tokens as handed to the language model
    (output of the key layer); ``merged`` is the grid right after merging.
    """

    original: TokenGrid
    merged: TokenGrid
    features: TokenGrid
    key_set: KeyTokenSet
    events: list[MergeEvent] = field(default_factory=list)


def encode_stage(patches, weights: ToyWeights, config: EncodeConfig, merge: bool = True,
                 key_set: bool = True) -> EncodeResult:
    grid = encode_patches(patches, weights)
    if merge:
        merged, events = local_spatial_merge(grid, weights, config)
    else:
        merged, events = grid, []
    keys, feats = _key_set_and_features(merged, weights, config)
    if not key_set:
        keys = KeyTokenSet(frozenset(), keys.scores, float("inf"))
    return EncodeResult(grid, merged, feats, keys, events)
