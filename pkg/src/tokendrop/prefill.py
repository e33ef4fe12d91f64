"""Prefilling stage: text-guided dual-attention pruning of vision tokens."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cache import KVCache
from .encode import KeyTokenSet
from .errors import CalibrationError, ConfigError
from .model import ToyWeights, embed_text, lm_layer_forward, logits_from_hidden, positional_encoding
from .tokens import MultimodalSequence, TokenGrid


@dataclass(frozen=True)
class PrefillConfig:
    """Exactly one of ``gamma`` (fixed threshold) or ``budget`` (target mean
    number of surviving vision tokens, resolved by calibration) is set."""

    prune_layers: tuple[int, ...] = (1, 2)
    gamma: float | None = None
    budget: float | None = None
    alpha: float = 0.05
    spare_key_set: bool = True

    def __post_init__(self):
        object.__setattr__(self, "prune_layers", tuple(sorted(int(x) for x in self.prune_layers)))
        if (self.gamma is None) == (self.budget is None):
            raise ConfigError("set exactly one of gamma or budget")
        if self.gamma is not None and self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.budget is not None and self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")

    def validate_depth(self, lm_layers: int):
        bad = [x for x in self.prune_layers if not 0 <= x < lm_layers]
        if bad:
            raise ConfigError(f"prune layers {bad} outside language depth {lm_layers}")

    def with_gamma(self, gamma: float) -> "PrefillConfig":
        return replace(self, gamma=float(gamma), budget=None)


@dataclass
class PruneDecision:
    layer: int
    global_scores: dict = field(default_factory=dict)
    candidates: frozenset = frozenset()
    individual_max: dict = field(default_factory=dict)
    pruned: frozenset = frozenset()
    spared_by_key: frozenset = frozenset()
    threshold: float = 0.0


def build_sequence(features: TokenGrid, text_ids, weights: ToyWeights,
                   query_embedding=None) -> MultimodalSequence:
    """Vision features first, then text; position ids 0..M+N-1.

    Text entries get ids after the largest possible patch id. When
    ``query_embedding`` is given it replaces the token embedding of the last
    text entry.
    """
    cfg = weights.config
    m = len(features.tokens)
    text_ids = np.asarray(text_ids, dtype=np.int64)
    n = len(text_ids)
    if n < 1:
        raise ConfigError("at least one text token is required")
    pos = np.arange(m + n)
    vis = features.embeddings() + positional_encoding(pos[:m], cfg.hidden_dim, cfg.pos_scale)
    txt = embed_text(text_ids, pos[m:], weights)
    if query_embedding is not None:
        txt[-1] = np.asarray(query_embedding) + positional_encoding(pos[-1:], cfg.hidden_dim, cfg.pos_scale)[0]
    base = features.num_patches + 1
    ids = np.concatenate([np.asarray(features.ids, dtype=np.int64), base + np.arange(n)])
    return MultimodalSequence(ids, np.r_[np.ones(m, bool), np.zeros(n, bool)],
                              np.vstack([vis, txt]) if m else txt, pos)


def text_vision_block(attn: np.ndarray, seq: MultimodalSequence) -> np.ndarray:
    """Rows = text entries, columns = vision entries of a square prefill map."""
    return attn[np.ix_(~seq.is_vision, seq.is_vision)]


def global_scores(attn, vision_ids) -> dict:
    """Total attention each vision token receives from all text rows."""
    attn = np.atleast_2d(np.asarray(attn, dtype=np.float64))
    if attn.shape[0] == 0:
        raise ConfigError("global scores need at least one text row")
    col = attn.sum(axis=0)
    return {int(i): float(v) for i, v in zip(vision_ids, col)}


def candidate_set(scores: dict, gamma: float) -> frozenset:
    total = sum(scores.values())
    return frozenset(j for j, v in scores.items() if v <= gamma * total)


def individual_max(attn, vision_ids) -> dict:
    attn = np.atleast_2d(np.asarray(attn, dtype=np.float64))
    return {int(i): float(v) for i, v in zip(vision_ids, attn.max(axis=0))}


def individual_filter(attn, vision_ids, candidates, alpha: float) -> frozenset:
    """Candidates whose strongest single-text attention is still below ``alpha``."""
    best = individual_max(attn, vision_ids)
    return frozenset(j for j in candidates if best[j] < alpha)


def prune_at_layer(seq: MultimodalSequence, attn, key_set: KeyTokenSet, config: PrefillConfig,
                   layer: int):
    """Apply the dual filter at one scheduled layer.

    ``attn`` is the layer's square attention map over ``seq``. Returns the
    shortened sequence and the decision record.
    """
    if layer not in config.prune_layers:
        raise ConfigError(f"layer {layer} is not in the prune schedule")
    if config.gamma is None:
        raise ConfigError("prune_at_layer needs a resolved gamma")
    vids = seq.vision_ids
    if not vids:
        return seq, PruneDecision(layer)
    tv = text_vision_block(attn, seq)
    scores = global_scores(tv, vids)
    d = candidate_set(scores, config.gamma)
    best = individual_max(tv, vids)
    confirmed = frozenset(j for j in d if best[j] < config.alpha)
    spared = frozenset(confirmed & key_set.member_ids) if config.spare_key_set else frozenset()
    pruned = confirmed - spared
    decision = PruneDecision(layer, scores, d, best, pruned, spared,
                             config.gamma * sum(scores.values()))
    return seq.drop(pruned), decision


# A policy maps (sequence, attention map, layer) to a decision.
PrunePolicy = Callable[[MultimodalSequence, np.ndarray, int], PruneDecision]


@dataclass
class PrefillResult:
    """``layer_vision_ids[l]`` is the vision set alive when layer ``l`` ran
    (and therefore cached there)."""

    s_few: frozenset
    cache: KVCache
    decisions: list[PruneDecision]
    sequence: MultimodalSequence
    layer_vision_ids: list[list[int]]
    logits: np.ndarray

    @property
    def last_hidden(self) -> np.ndarray:
        return self.sequence.hidden[-1]


def run_prefill(seq: MultimodalSequence, weights: ToyWeights, key_set: KeyTokenSet,
                config: PrefillConfig, policy: PrunePolicy | None = None) -> PrefillResult:
    """Forward every language layer, pruning at the scheduled ones.

    Each layer caches the entries alive when it runs; tokens pruned at layer
    ``l`` stay in the caches of layers ``<= l`` until decode-time eviction.
    """
    cfg = weights.config
    config.validate_depth(cfg.lm_layers)
    if policy is None:
        def policy(s, a, layer):
            return prune_at_layer(s, a, key_set, config, layer)[1]
    cache = KVCache(cfg.lm_layers, cfg.hidden_dim)
    decisions: list[PruneDecision] = []
    alive: list[list[int]] = []
    for layer in range(cfg.lm_layers):
        alive.append(seq.vision_ids)
        hidden, attn = lm_layer_forward(seq.hidden, weights, layer, cache, seq.ids, seq.is_vision)
        seq = seq.with_hidden(hidden)
        if layer in config.prune_layers:
            decision = policy(seq, attn, layer)
            if decision.pruned:
                seq = seq.drop(decision.pruned)
            decisions.append(decision)
    logits = logits_from_hidden(seq.hidden[-1], weights)
    return PrefillResult(frozenset(seq.vision_ids), cache, decisions, seq, alive, logits)


def calibrate_gamma(inputs, weights: ToyWeights, config: PrefillConfig, budget: float | None = None,
                    tolerance: float = 0.05, max_iter: int = 40) -> tuple[float, float]:
    """Bisection on gamma so the mean ``|S_few|`` over ``inputs`` meets the budget.

    ``inputs`` is a sequence of ``(MultimodalSequence, KeyTokenSet)`` pairs.
    ``alpha`` and the schedule are held fixed. Returns ``(gamma, achieved_mean)``
    for the best gamma seen; stops early once within ``tolerance`` (relative).
    """
    target = config.budget if budget is None else budget
    if target is None:
        raise ConfigError("calibration needs a budget")
    inputs = list(inputs)
    if not inputs:
        raise ConfigError("calibration needs at least one fixture")

    def mean_survivors(gamma):
        cfg = config.with_gamma(gamma)
        return float(np.mean([len(run_prefill(s, weights, k, cfg).s_few) for s, k in inputs]))

    def close(m):
        return abs(m - target) <= tolerance * target

    lo, hi = 0.0, 1.0
    m_lo = mean_survivors(lo)
    best = (abs(m_lo - target), lo, m_lo)
    if close(m_lo) or target >= m_lo:
        return lo, m_lo
    m_hi = mean_survivors(hi)
    if target < m_hi and not close(m_hi):
        raise CalibrationError(
            f"budget {target:g} is below the reachable floor {m_hi:.3f} "
            f"(key-set members and alpha-rescued tokens cannot be pruned)", floor=m_hi)
    best = min(best, (abs(m_hi - target), hi, m_hi))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        m = mean_survivors(mid)
        best = min(best, (abs(m - target), mid, m))
        if close(m):
            return mid, m
        if m > target:
            lo = mid
        else:
            hi = mid
    return best[1], best[2]
