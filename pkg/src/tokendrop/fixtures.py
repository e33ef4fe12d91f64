"""Synthetic and file-backed image fixtures."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encode import EncodeConfig, encode_stage
from .errors import ConfigError, ParseError, ShapeError
from .model import ToyConfig, ToyWeights, layer_norm, lm_layer_forward
from .numeric import SeededSource
from .prefill import build_sequence

KINDS = ("noise", "blocks", "needle", "image_file")
NEEDLE_MAX_ATTEMPTS = 32
# Seeds of regenerated needle fixtures are offset by multiples of this prime.
_RETRY_STRIDE = 1_000_003


@dataclass(frozen=True)
class FixtureSpec:
    kind: str = "blocks"
    count: int = 1
    first_seed: int = 0
    path: str | None = None
    noise: float = 0.6
    needle_scale: float = 8.0
    query_norm: float = 40.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown fixture kind {self.kind!r}")
        if self.count < 1:
            raise ConfigError("fixture count must be >= 1")
        if self.first_seed < 0:
            raise ConfigError("first_seed must be >= 0")
        if self.kind == "image_file" and not self.path:
            raise ConfigError("image_file fixtures need a path")


@dataclass
class Fixture:
    kind: str
    seed: int
    patches: np.ndarray
    text_ids: np.ndarray
    needle_id: int | None = None
    query_embedding: np.ndarray | None = None
    attempts: int = 1


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a binary (P5) graymap into a float array scaled to [0, 1]."""
    if data[:2] != b"P5":
        raise ParseError("missing P5 magic number", 0)
    pos = 2
    fields, starts = [], []
    while len(fields) < 3:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("expected a decimal header field", start)
        fields.append(int(data[start:pos]))
        starts.append(start)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("header must end with one whitespace byte", pos)
    pos += 1
    width, height, maxval = fields
    for value, start, ok in zip(fields, starts, (width >= 1, height >= 1, 0 < maxval < 65536)):
        if not ok:
            raise ParseError(f"invalid header value {value}", start)
    depth = 1 if maxval < 256 else 2
    need = width * height * depth
    if len(data) - pos < need:
        raise ParseError(f"expected {need} pixel bytes, found {len(data) - pos}", len(data))
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    pix = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return pix.reshape(height, width).astype(np.float64) / maxval


def image_to_patches(image: np.ndarray, patch_side: int) -> np.ndarray:
    """Tile the largest top-left square of whole patches, row-major."""
    side = min(image.shape[0], image.shape[1]) // patch_side
    if side < 1:
        raise ShapeError(f"image {image.shape} smaller than one {patch_side}x{patch_side} patch")
    img = image[: side * patch_side, : side * patch_side]
    tiles = img.reshape(side, patch_side, side, patch_side).transpose(0, 2, 1, 3)
    return tiles.reshape(side * side, patch_side * patch_side)


def _text_ids(src: SeededSource, cfg: ToyConfig) -> np.ndarray:
    return src.integers(cfg.text_len, cfg.vocab_size)


def _noise(src, cfg):
    return src.matrix(cfg.num_patches, cfg.patch_dim)


def _blocks(src, cfg, noise):
    """Rectangular regions of one colour each, with per-region noise levels."""
    g = cfg.grid_side

    def cuts():
        n_cuts = int(src.integers(1, 3)[0]) + 1
        return sorted(set((1 + src.integers(n_cuts, g - 1)).tolist()))

    rows = np.searchsorted(cuts(), np.arange(g), side="right")
    cols = np.searchsorted(cuts(), np.arange(g), side="right")
    region = rows[:, None] * (g + 1) + cols[None, :]
    labels = {r: i for i, r in enumerate(sorted(set(region.ravel().tolist())))}
    colours = src.matrix(len(labels), cfg.patch_dim)
    levels = src.unit(len(labels)) * noise
    jitter = src.matrix(cfg.num_patches, cfg.patch_dim)
    lab = np.array([labels[r] for r in region.ravel()])
    return colours[lab] + levels[lab][:, None] * jitter


def _needle_patches(src, cfg, scale):
    background = src.uniform(cfg.patch_dim)
    direction = src.uniform(cfg.patch_dim)
    direction -= (direction @ background) / (background @ background) * background
    needle = direction / np.linalg.norm(direction) * scale * np.linalg.norm(background)
    patches = np.tile(background, (cfg.num_patches, 1))
    idx = int(src.integers(1, cfg.num_patches)[0])
    patches[idx] = needle
    return patches, idx + 1


def needle_probe(patches, text_ids, query, needle_id, weights: ToyWeights, layer: int,
                 encode_config: EncodeConfig | None = None) -> bool:
    """True when, with nothing dropped, the last text row's strongest vision
    column at ``layer`` is the needle."""
    enc = encode_stage(patches, weights, encode_config or EncodeConfig(), merge=False, key_set=False)
    seq = build_sequence(enc.features, text_ids, weights, query)
    x = seq.hidden
    for lyr in range(layer + 1):
        x, attn = lm_layer_forward(x, weights, lyr)
    row = attn[-1, : seq.num_vision]
    return int(seq.ids[int(np.argmax(row))]) == needle_id


def construct_query(patches, needle_id, weights: ToyWeights, layers, norm: float,
                    encode_config: EncodeConfig | None = None) -> np.ndarray:
    """Text embedding whose queries at ``layers`` point at the needle's keys.

    The vision prefix is causal, so the needle's keys do not depend on the
    text. At one layer the query ``LN(x) W_q`` is maximally aligned with a
    key direction ``k`` (summed over heads) when ``LN(x)`` follows the centred
    vector ``W_q k``; here ``k`` is the needle key minus the mean of the other
    vision keys. The unit directions of all target layers are added. A large
    norm keeps the residual stream close to the embedding across layers.
    """
    layers = sorted({int(x) for x in np.atleast_1d(layers)})
    enc = encode_stage(patches, weights, encode_config or EncodeConfig(), merge=False, key_set=False)
    x = build_sequence(enc.features, [0], weights).hidden[:-1]
    row = enc.features.ids.index(needle_id)
    total = np.zeros(weights.config.hidden_dim)
    for lyr in range(layers[-1] + 1):
        if lyr in layers:
            keys = layer_norm(x) @ weights.lm[lyr]["w_k"]
            # Softmax ignores key components shared by every column, so aim at
            # what sets the needle apart from the rest of the image.
            key = keys[row] - np.delete(keys, row, axis=0).mean(axis=0)
            u = weights.lm[lyr]["w_q"] @ key
            u -= u.mean()
            total += u / np.linalg.norm(u)
        x, _ = lm_layer_forward(x, weights, lyr)
    total -= total.mean()
    return norm * total / np.linalg.norm(total)


def generate_fixture(spec: FixtureSpec, seed: int, config: ToyConfig,
                     weights: ToyWeights | None = None, probe_layers=(1,)) -> Fixture:
    """Deterministic fixture for ``seed``.

    Needle fixtures need ``weights``: the text query is aimed at the needle
    in every layer of ``probe_layers``, checked with :func:`needle_probe` at
    the first of them, and the fixture is regenerated from a derived seed
    until the check passes.
    """
    if spec.kind == "noise":
        src = SeededSource(seed)
        return Fixture("noise", seed, _noise(src, config), _text_ids(src, config))
    if spec.kind == "blocks":
        src = SeededSource(seed)
        return Fixture("blocks", seed, _blocks(src, config, spec.noise), _text_ids(src, config))
    if spec.kind == "image_file":
        img = read_pgm(Path(spec.path).read_bytes())
        patches = image_to_patches(img, config.patch_side)
        return Fixture("image_file", seed, patches, _text_ids(SeededSource(seed), config))
    if weights is None:
        raise ConfigError("needle fixtures need model weights")
    for attempt in range(NEEDLE_MAX_ATTEMPTS):
        src = SeededSource(seed + attempt * _RETRY_STRIDE)
        patches, needle = _needle_patches(src, config, spec.needle_scale)
        text = _text_ids(src, config)
        query = construct_query(patches, needle, weights, probe_layers, spec.query_norm)
        if needle_probe(patches, text, query, needle, weights, min(probe_layers)):
            return Fixture("needle", seed, patches, text, needle, query, attempt + 1)
    raise ConfigError(f"no valid needle fixture for seed {seed} after {NEEDLE_MAX_ATTEMPTS} attempts")
