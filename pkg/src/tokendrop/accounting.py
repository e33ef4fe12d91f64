"""Closed-form KV-cache and FLOPs accounting.

KV bytes per cached token: ``2 * num_layers * hidden_dim * bytes_per_element``
(one key and one value vector per layer). MB are decimal (10**6 bytes).

FLOPs per layer, with n live tokens, hidden size d and FFN width m::

    prefill:            4*n*d**2 + 2*n**2*d + 2*n*d*m
    decode (cache c):   4*d**2   + 2*c*d    + 2*d*m

Normalisation and softmax costs are ignored; only ratios are meant to be
compared against published numbers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .model import ModelGeometry

MB = 10**6


def kv_bytes(tokens, geometry: ModelGeometry):
    if tokens < 0:
        raise ConfigError("token count must be >= 0")
    return tokens * 2 * geometry.num_layers * geometry.hidden_dim * geometry.bytes_per_element


def kv_mb(tokens, geometry: ModelGeometry) -> float:
    return kv_bytes(tokens, geometry) / MB


def kv_bytes_per_layer(counts, geometry: ModelGeometry) -> int:
    """Bytes for caches whose per-layer token counts differ."""
    return sum(int(c) for c in counts) * 2 * geometry.hidden_dim * geometry.bytes_per_element


def flops_layer(n_tokens, geometry: ModelGeometry, mode: str = "prefill", cache_len: int | None = None):
    d, m = geometry.hidden_dim, geometry.ffn_dim
    if mode == "prefill":
        if n_tokens < 1:
            raise ConfigError("n_tokens must be >= 1")
        n = n_tokens
        return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m
    if mode == "decode":
        if cache_len is None or cache_len < 1:
            raise ConfigError("decode mode needs cache_len >= 1")
        return 4 * d * d + 2 * cache_len * d + 2 * d * m
    raise ConfigError(f"unknown FLOPs mode {mode!r}")


def flops_prefill(layer_counts, geometry: ModelGeometry):
    """Sum over layers; ``layer_counts[l]`` is the live token count of layer l."""
    return sum(flops_layer(n, geometry) for n in layer_counts)


def flops_reduction(baseline: float, reduced: float) -> float:
    return 1.0 - reduced / baseline


def compression_ratio(original, final_avg) -> float:
    if original <= 0:
        raise ConfigError("original token count must be > 0")
    return 1.0 - final_avg / original


def map_layers(counts, target_layers: int) -> list:
    """Stretch a per-layer schedule onto a deeper stack (layer p <- floor(p*L/T))."""
    src = len(counts)
    return [counts[(p * src) // target_layers] for p in range(target_layers)]


def preset_schedule(original: int, post_encode: float, final: float, num_layers: int,
                    first_prune_layer: int = 2) -> list[float]:
    """A per-layer vision-token schedule for a full-size stack.

    Layers before ``first_prune_layer`` carry ``post_encode`` tokens; the
    rest carry a constant count chosen so the layer average equals ``final``.
    """
    head = first_prune_layer * post_encode
    tail = num_layers - first_prune_layer
    rest = (final * num_layers - head) / tail
    if rest < 0:
        raise ConfigError("final average too small for the given head layers")
    return [post_encode] * first_prune_layer + [rest] * tail


@dataclass
class CostReport:
    """Aggregate accounting of one run (averaged over its fixtures).

    Token counts are vision tokens held in the KV cache, averaged over
    layers; ``*_layers`` lists give the per-layer means. Byte and FLOP
    figures are for the named preset geometry, with token counts rescaled by
    ``scale`` (preset vision tokens / toy vision tokens).
    """

    geometry: str
    baseline: str
    fixtures: int
    original_tokens: int
    scale: float
    post_encode_avg: float
    s_few_avg: float
    prefill_layers: list[float]
    prefill_avg: float
    decode_layers: list[float]
    decode_avg: float
    kv_bytes: dict = field(default_factory=dict)
    kv_mb: dict = field(default_factory=dict)
    flops: dict = field(default_factory=dict)
    compression_ratio: float = 0.0
    flops_reduction: float = 0.0
    toy_kv_bytes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(geometry: ModelGeometry, preset_tokens: int, baseline: str, original: int,
                 post_encode: list[float], s_few: list[float], prefill_layers: list[list[int]],
                 decode_layers: list[list[int]], text_len: int, toy_geometry: ModelGeometry) -> CostReport:
    """Fold per-fixture counts into a report.

    ``prefill_layers[f][l]`` / ``decode_layers[f][l]`` are the vision entries
    cached at layer ``l`` for fixture ``f`` after prefill / after eviction.
    """
    nf = len(post_encode)
    n_layers = len(prefill_layers[0])

    def mean(xs):
        return float(sum(xs) / len(xs))

    pre_l = [mean([f[l] for f in prefill_layers]) for l in range(n_layers)]
    dec_l = [mean([f[l] for f in decode_layers]) for l in range(n_layers)]
    enc_avg = mean(post_encode)
    pre_avg, dec_avg = mean(pre_l), mean(dec_l)
    scale = preset_tokens / original

    stages = {"baseline": float(original), "encode": enc_avg, "prefill": pre_avg, "decode": dec_avg}
    kvb = {k: kv_bytes(v * scale, geometry) for k, v in stages.items()}
    toy_kvb = {k: kv_bytes(v, toy_geometry) for k, v in stages.items()}

    full = [preset_tokens + text_len] * geometry.num_layers
    pruned = [c * scale + text_len for c in map_layers(pre_l, geometry.num_layers)]
    fl = {"baseline": float(flops_prefill(full, geometry)), "pruned": float(flops_prefill(pruned, geometry))}

    return CostReport(
        geometry=geometry.name, baseline=baseline, fixtures=nf, original_tokens=original,
        scale=scale, post_encode_avg=enc_avg, s_few_avg=mean(s_few), prefill_layers=pre_l,
        prefill_avg=pre_avg, decode_layers=dec_l, decode_avg=dec_avg,
        kv_bytes={k: float(v) for k, v in kvb.items()},
        kv_mb={k: float(v) / MB for k, v in kvb.items()}, flops=fl,
        compression_ratio=compression_ratio(original, dec_avg),
        flops_reduction=flops_reduction(fl["baseline"], fl["pruned"]),
        toy_kv_bytes={k: float(v) for k, v in toy_kvb.items()},
    )
