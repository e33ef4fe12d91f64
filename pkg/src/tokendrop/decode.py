"""Decoding stage with a real KV cache and the output-aware eviction policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import KVCache
from .encode import KeyTokenSet
from .errors import CacheError, ConfigError
from .model import ToyWeights, embed_text, greedy_token, lm_layer_forward, logits_from_hidden


@dataclass(frozen=True)
class DecodeConfig:
    keep_from_layer: int = 2
    max_new_tokens: int = 8
    greedy: bool = True

    def __post_init__(self):
        if self.keep_from_layer < 0:
            raise ConfigError("keep_from_layer must be >= 0")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        if not self.greedy:
            raise ConfigError("only greedy decoding is supported")

    def validate_depth(self, lm_layers: int):
        if self.keep_from_layer > lm_layers:
            raise ConfigError(f"keep_from_layer {self.keep_from_layer} beyond depth {lm_layers}")


@dataclass(frozen=True)
class EvictEvent:
    layer: int
    token_id: int
    reason: str = "outside_s_few"


def evict_output_aware(cache: KVCache, s_few, key_set: KeyTokenSet, config: DecodeConfig):
    """Keep only ``S_few ∪ O`` vision entries in layers ``>= keep_from_layer``.

    Returns a new cache and one event per removed (layer, id) pair; the
    input cache is left untouched.
    """
    keep = set(s_few) | set(key_set.member_ids)
    out = cache.copy()
    events: list[EvictEvent] = []
    for layer in range(config.keep_from_layer, cache.num_layers):
        doomed = [i for i in out.vision_ids(layer) if i not in keep]
        for token_id in out.evict(layer, doomed):
            events.append(EvictEvent(layer, token_id))
    return out, events


@dataclass
class StepOutput:
    token: int
    logits: np.ndarray
    hidden: np.ndarray
    attention: list[tuple[np.ndarray, np.ndarray]]  # per layer: (column ids, weights)


def decode_step(cache: KVCache, token_embedding, weights: ToyWeights, entry_id: int) -> StepOutput:
    """Run one new token through every layer against the cache.

    The token's keys/values are appended to each layer under ``entry_id``.
    """
    x = np.atleast_2d(np.asarray(token_embedding, dtype=np.float64))
    attention = []
    for layer in range(weights.config.lm_layers):
        if cache.length(layer) == 0:
            raise CacheError(f"layer {layer} cache is empty")
        x, attn = lm_layer_forward(x, weights, layer, cache, [entry_id], [False])
        attention.append((cache.layers[layer].ids.copy(), attn[0]))
    logits = logits_from_hidden(x[0], weights)
    return StepOutput(greedy_token(logits), logits, x[0].copy(), attention)


@dataclass
class StepStats:
    cache_lengths: list[int]
    vision_ids: list[list[int]]


@dataclass
class DecodeResult:
    generated: list[int]
    steps: list[StepOutput]
    stats: list[StepStats]
    events: list[EvictEvent]
    cache: KVCache
    post_eviction_vision: list[list[int]] = field(default_factory=list)


def run_decode(cache: KVCache, s_few, key_set: KeyTokenSet, weights: ToyWeights,
               config: DecodeConfig, first_token: int, next_position: int, next_id: int,
               evict: bool = True) -> DecodeResult:
    """Greedy generation of ``max_new_tokens`` tokens.

    ``first_token`` is the prefill argmax and counts as the first generated
    token; each further token costs one ``decode_step``. Eviction runs once
    before the first step (also when nothing is generated).
    """
    config.validate_depth(weights.config.lm_layers)
    if evict:
        cache, events = evict_output_aware(cache, s_few, key_set, config)
    else:
        cache, events = cache.copy(), []
    post = [cache.vision_ids(layer) for layer in range(cache.num_layers)]
    generated: list[int] = []
    steps: list[StepOutput] = []
    stats: list[StepStats] = []
    if config.max_new_tokens:
        generated.append(int(first_token))
    for step in range(config.max_new_tokens - 1):
        emb = embed_text([generated[-1]], [next_position + step], weights)[0]
        out = decode_step(cache, emb, weights, next_id + step)
        steps.append(out)
        generated.append(out.token)
        stats.append(StepStats([cache.length(l) for l in range(cache.num_layers)],
                               [cache.vision_ids(l) for l in range(cache.num_layers)]))
    return DecodeResult(generated, steps, stats, events, cache, post)
