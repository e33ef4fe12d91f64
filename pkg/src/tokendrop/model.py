"""Deterministic toy vision encoder and decoder-only language stack.

Both stacks use the same pre-norm block::

    x = x + MHSA(LN(x)) W_o
    x = x + GELU(LN(x) W_up) W_down

Attention maps handed to the dropping stages are averaged over heads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cache import KVCache
from .errors import CacheError, ConfigError, ShapeError
from .numeric import SeededSource, row_softmax
from .tokens import CLS_ID, TokenGrid, VisionToken

LAYER_MATRICES = ("ffn_down", "ffn_up", "w_k", "w_o", "w_q", "w_v")
GLOBAL_MATRICES = ("cls", "patch_bias", "patch_proj", "token_embed", "vocab_head")
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelGeometry:
    name: str
    num_layers: int
    hidden_dim: int
    ffn_dim: int
    num_heads: int
    bytes_per_element: int

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        if self.bytes_per_element not in (1, 2, 4, 8):
            raise ConfigError(f"bytes_per_element must be 1, 2, 4 or 8, got {self.bytes_per_element}")


# Native vision-token counts belong to the preset's image pipeline, not to
# the transformer geometry, so they live beside the presets.
PRESETS = {
    "llava-1.5-7b": ModelGeometry("llava-1.5-7b", 32, 4096, 11008, 32, 2),
    "llava-next-7b": ModelGeometry("llava-next-7b", 32, 4096, 11008, 32, 2),
}
PRESET_VISION_TOKENS = {"llava-1.5-7b": 576, "llava-next-7b": 2880}


def get_geometry(name: str) -> ModelGeometry:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown geometry preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class ToyConfig:
    encoder_layers: int = 4
    lm_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    grid_side: int = 8
    patch_side: int = 4
    text_len: int = 8
    vocab_size: int = 32
    pos_scale: float = 0.1

    def __post_init__(self):
        for name in ("encoder_layers", "lm_layers", "hidden_dim", "num_heads", "ffn_dim",
                     "grid_side", "patch_side", "text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 16:
            raise ConfigError("vocab_size must be >= 16")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def patch_dim(self) -> int:
        return self.patch_side**2

    def geometry(self) -> ModelGeometry:
        """The language stack as an accounting geometry (float64 storage)."""
        return ModelGeometry("toy", self.lm_layers, self.hidden_dim, self.ffn_dim, self.num_heads, 8)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyWeights:
    config: ToyConfig
    seed: int
    encoder: list[dict[str, np.ndarray]]
    lm: list[dict[str, np.ndarray]]
    globals: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.globals[name]


def _layer_shapes(cfg: ToyConfig) -> dict[str, tuple[int, int]]:
    d, m = cfg.hidden_dim, cfg.ffn_dim
    return {"ffn_down": (m, d), "ffn_up": (d, m), "w_k": (d, d), "w_o": (d, d),
            "w_q": (d, d), "w_v": (d, d)}


def _global_shapes(cfg: ToyConfig) -> dict[str, tuple[int, int]]:
    d = cfg.hidden_dim
    return {"cls": (1, d), "patch_bias": (1, d), "patch_proj": (cfg.patch_dim, d),
            "token_embed": (cfg.vocab_size, d), "vocab_head": (d, cfg.vocab_size)}


def synthesize_weights(config: ToyConfig, seed: int) -> ToyWeights:
    """Fill every matrix from one splitmix64 stream.

    Draw order: encoder layers 0.., then language layers 0..; inside a layer
    the matrices in alphabetical order; finally the global matrices in
    alphabetical order. Each matrix is filled row-major and scaled by
    ``1/sqrt(hidden_dim)``.
    """
    src = SeededSource(seed)
    scale = 1.0 / math.sqrt(config.hidden_dim)
    shapes = _layer_shapes(config)

    def draw(shape):
        return src.matrix(*shape) * scale

    encoder = [{name: draw(shapes[name]) for name in LAYER_MATRICES}
               for _ in range(config.encoder_layers)]
    lm = [{name: draw(shapes[name]) for name in LAYER_MATRICES} for _ in range(config.lm_layers)]
    gshapes = _global_shapes(config)
    glob = {name: draw(gshapes[name]) for name in GLOBAL_MATRICES}
    glob["cls"] = glob["cls"][0]
    glob["patch_bias"] = glob["patch_bias"][0]
    return ToyWeights(config, seed, encoder, lm, glob)


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def positional_encoding(positions, dim: int, scale: float) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.zeros((pos.shape[0], dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return scale * pe


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _attend(q, k, v, n_heads, mask):
    """Multi-head attention; returns merged head outputs and the head-mean map."""
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    d_head = qh.shape[-1]
    outs, maps = [], []
    for h in range(n_heads):
        a = row_softmax(qh[h] @ kh[h].T / math.sqrt(d_head), mask)
        outs.append(a @ vh[h])
        maps.append(a)
    merged = np.concatenate(outs, axis=1)
    return merged, np.mean(maps, axis=0)


def _block(x, w, n_heads, keys_prefix=None, values_prefix=None, mask=None):
    h = layer_norm(x)
    q, k, v = h @ w["w_q"], h @ w["w_k"], h @ w["w_v"]
    k_all = k if keys_prefix is None else np.vstack([keys_prefix, k])
    v_all = v if values_prefix is None else np.vstack([values_prefix, v])
    merged, attn = _attend(q, k_all, v_all, n_heads, mask)
    x = x + merged @ w["w_o"]
    x = x + gelu(layer_norm(x) @ w["ffn_up"]) @ w["ffn_down"]
    return x, attn, k, v


# --- vision encoder -------------------------------------------------------

def encode_patches(image_patches, weights: ToyWeights) -> TokenGrid:
    """Project patches to tokens on a square grid; CLS is kept separately as id 0."""
    patches = np.asarray(image_patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ShapeError("patches must be a 2-D matrix")
    n = patches.shape[0]
    side = math.isqrt(n)
    if side * side != n or n == 0:
        raise ShapeError(f"patch count {n} is not a perfect square")
    if patches.shape[1] != weights["patch_proj"].shape[0]:
        raise ShapeError(f"patch_dim {patches.shape[1]} != {weights['patch_proj'].shape[0]}")
    emb = patches @ weights["patch_proj"] + weights["patch_bias"]
    tokens = [
        VisionToken(i + 1, emb[i].copy(), (float(i // side), float(i % side)), 1, frozenset({i + 1}))
        for i in range(n)
    ]
    return TokenGrid(tokens, side, side, weights["cls"].copy(), depth=0)


def encoder_layer_forward(tokens, weights: ToyWeights, layer_index: int):
    """One encoder block over the stacked ``[CLS; vision]`` rows (no mask)."""
    if not 0 <= layer_index < weights.config.encoder_layers:
        raise ConfigError(f"encoder has no layer {layer_index}")
    x = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    out, attn, _, _ = _block(x, weights.encoder[layer_index], weights.config.num_heads)
    return out, attn


def forward_encoder(grid: TokenGrid, weights: ToyWeights, last_layer: int):
    """Run encoder layers ``grid.depth .. last_layer`` inclusive.

    Returns the advanced grid and the attention map of ``last_layer``.
    """
    x = grid.stacked()
    attn = None
    for layer in range(grid.depth, last_layer + 1):
        x, attn = encoder_layer_forward(x, weights, layer)
    if attn is None:
        raise ConfigError(f"grid already at depth {grid.depth}, cannot stop at {last_layer}")
    return grid.with_embeddings(x, last_layer + 1), attn


# --- language stack -------------------------------------------------------

def embed_text(token_ids, positions, weights: ToyWeights) -> np.ndarray:
    cfg = weights.config
    return weights["token_embed"][np.asarray(token_ids)] + positional_encoding(
        positions, cfg.hidden_dim, cfg.pos_scale)


def causal_mask(n_new: int, n_cached: int = 0) -> np.ndarray:
    """New row i sees every cached entry and new rows 0..i."""
    tri = np.tril(np.ones((n_new, n_new), dtype=bool))
    return np.hstack([np.ones((n_new, n_cached), dtype=bool), tri])


def lm_layer_forward(hidden, weights: ToyWeights, layer_index: int, cache: KVCache | None = None,
                     ids=None, is_vision=None, mask=None):
    """One decoder block.

    Without a cache the rows attend causally to each other. With a cache the
    rows also see every entry already cached for this layer, and their own
    keys/values are appended afterwards (tagged with ``ids``/``is_vision``).
    ``mask`` overrides the default visibility; its columns follow the order
    ``[cached entries, new rows]``. The returned attention map uses the same
    column order.
    """
    cfg = weights.config
    if not 0 <= layer_index < cfg.lm_layers:
        raise ConfigError(f"language stack has no layer {layer_index}")
    x = np.atleast_2d(np.asarray(hidden, dtype=np.float64))
    n = x.shape[0]
    kp = vp = None
    n_cached = 0
    if cache is not None:
        if cache.num_layers != cfg.lm_layers:
            raise CacheError(f"cache has {cache.num_layers} layers, model has {cfg.lm_layers}")
        lc = cache.layers[layer_index]
        kp, vp, n_cached = lc.keys, lc.values, len(lc)
    if mask is None:
        mask = causal_mask(n, n_cached)
    out, attn, k, v = _block(x, weights.lm[layer_index], cfg.num_heads, kp, vp, mask)
    if cache is not None:
        if ids is None or is_vision is None:
            raise ValueError("ids and is_vision are required when appending to a cache")
        cache.append(layer_index, ids, is_vision, k, v)
    return out, attn


def logits_from_hidden(hidden_row, weights: ToyWeights) -> np.ndarray:
    return layer_norm(np.atleast_2d(hidden_row))[0] @ weights["vocab_head"]


def greedy_token(logits) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the smallest id.
    return int(np.argmax(logits))


__all__ = [
    "CLS_ID", "ModelGeometry", "PRESETS", "PRESET_VISION_TOKENS", "ToyConfig", "ToyWeights",
    "causal_mask", "embed_text", "encode_patches", "encoder_layer_forward", "forward_encoder",
    "get_geometry", "greedy_token", "layer_norm", "lm_layer_forward", "logits_from_hidden",
    "positional_encoding", "synthesize_weights",
]
