"""End-to-end orchestration: fixtures -> encode -> prefill -> decode -> reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .accounting import CostReport, build_report
from .config import PipelineConfig
from .decode import DecodeResult, run_decode
from .encode import EncodeConfig, EncodeResult, KeyTokenSet, encode_stage, local_spatial_merge
from .errors import ConfigError
from .fixtures import Fixture, generate_fixture
from .model import PRESET_VISION_TOKENS, ToyWeights, get_geometry, synthesize_weights
from .numeric import SeededSource
from .prefill import (PrefillConfig, PrefillResult, PruneDecision, build_sequence, calibrate_gamma,
                      global_scores, run_prefill, text_vision_block)
from .tokens import MultimodalSequence
from .trace import TraceRecorder

BASELINES = ("mustdrop", "none", "random_drop", "fastv_like", "encoder_only")
# Baselines whose keep count must match the mustdrop budget.
BUDGETED = ("random_drop", "fastv_like", "encoder_only")
_DROP_STREAM = 0x5EED_D20B


@dataclass
class FixtureRun:
    """Outcome of one fixture; id sets are vision-token ids."""

    fixture: Fixture
    encode: EncodeResult
    prefill: PrefillResult
    decode: DecodeResult
    post_encode: frozenset
    key_set: KeyTokenSet
    prompt: MultimodalSequence

    @property
    def s_few(self) -> frozenset:
        return self.prefill.s_few

    @property
    def generated(self) -> list[int]:
        return self.decode.generated

    @property
    def prefill_layers(self) -> list[list[int]]:
        return self.prefill.layer_vision_ids

    @property
    def decode_layers(self) -> list[list[int]]:
        return self.decode.post_eviction_vision


@dataclass
class SuiteResult:
    config: PipelineConfig
    runs: list[FixtureRun]
    report: CostReport
    recorder: TraceRecorder
    gamma: float | None = None
    keep_counts: list[int] = field(default_factory=list)

    @property
    def events(self):
        return self.recorder.events

    def mean_s_few(self) -> float:
        return float(np.mean([len(r.s_few) for r in self.runs]))

    def needle_retention(self) -> int:
        return sum(1 for r in self.runs if r.fixture.needle_id is not None and r.fixture.needle_id in r.s_few)


def load_model(config: PipelineConfig) -> ToyWeights:
    return synthesize_weights(config.model, config.seed)


def fixture_seeds(config: PipelineConfig) -> list[int]:
    return [config.fixtures.first_seed + i for i in range(config.fixtures.count)]


def make_fixtures(config: PipelineConfig, weights: ToyWeights) -> list[Fixture]:
    probe = config.prefill.prune_layers or (0,)
    return [generate_fixture(config.fixtures, s, config.model, weights, probe)
            for s in fixture_seeds(config)]


def keep_counts(budget: float, n: int, available: int) -> list[int]:
    """Integer keep counts whose running mean tracks ``budget`` exactly
    (cumulative rounding), clipped to ``available``."""
    if budget < 0:
        raise ConfigError("budget must be >= 0")
    return [min(available, math.floor((i + 1) * budget + 0.5) - math.floor(i * budget + 0.5))
            for i in range(n)]


# -- stage policies ---------------------------------------------------------

def _encode_for(baseline: str, fx: Fixture, weights: ToyWeights, ecfg: EncodeConfig) -> EncodeResult:
    mustdrop = baseline == "mustdrop"
    return encode_stage(fx.patches, weights, ecfg, merge=mustdrop, key_set=mustdrop)


def _cls_top_keep(enc: EncodeResult, keep: int) -> tuple[EncodeResult, list[int], dict]:
    """Keep the ``keep`` tokens with the highest key-layer CLS score (ties: smaller id)."""
    scores = enc.key_set.scores
    order = sorted(enc.features.ids, key=lambda i: (-scores[i], i))
    kept = set(order[:keep])
    dropped = [i for i in enc.features.ids if i not in kept]
    feats = replace(enc.features, tokens=[t for t in enc.features.tokens if t.id in kept])
    cut = scores[order[keep - 1]] if keep else math.inf
    return replace(enc, features=feats), dropped, {"threshold": cut, "scores": scores}


def _ranked_policy(seq_layer: int, keep: int, rank):
    """Prefill policy that keeps the ``keep`` best-ranked vision tokens at one layer."""

    def policy(seq, attn, layer):
        vids = seq.vision_ids
        if layer != seq_layer or not vids:
            return PruneDecision(layer)
        tv = text_vision_block(attn, seq)
        scores = global_scores(tv, vids)
        order = rank(vids, scores)
        pruned = frozenset(order[keep:])
        return PruneDecision(layer, scores, pruned, {}, pruned, frozenset(), math.nan)

    return policy


def _random_policy(layer: int, keep: int, seed: int):
    src = SeededSource(seed ^ _DROP_STREAM)

    def rank(vids, scores):
        perm = np.argsort(src.unit(len(vids)), kind="stable")
        return [vids[i] for i in perm]

    return _ranked_policy(layer, keep, rank)


def _fastv_policy(layer: int, keep: int):
    return _ranked_policy(layer, keep, lambda vids, s: sorted(vids, key=lambda i: (-s[i], i)))


def run_fixture(fx: Fixture, weights: ToyWeights, config: PipelineConfig, gamma: float | None,
                keep: int | None = None, recorder: TraceRecorder | None = None,
                index: int = 0) -> FixtureRun:
    baseline = config.baseline
    enc = _encode_for(baseline, fx, weights, config.encode)
    if baseline == "encoder_only":
        enc, enc_dropped, enc_info = _cls_top_keep(enc, keep)
    seq = build_sequence(enc.features, fx.text_ids, weights, fx.query_embedding)
    key_set = enc.key_set

    pcfg = config.prefill
    policy = None
    if baseline == "mustdrop":
        pcfg = pcfg.with_gamma(gamma)
    elif baseline in ("none", "encoder_only"):
        pcfg = PrefillConfig(prune_layers=(), gamma=0.0, alpha=pcfg.alpha)
    else:
        first = pcfg.prune_layers[0]
        pcfg = PrefillConfig(prune_layers=(first,), gamma=0.0, alpha=pcfg.alpha, spare_key_set=False)
        policy = _random_policy(first, keep, fx.seed) if baseline == "random_drop" else _fastv_policy(first, keep)
    pre = run_prefill(seq, weights, key_set, pcfg, policy)

    first_token = int(np.argmax(pre.logits))
    next_pos = int(seq.positions[-1]) + 1
    next_id = int(seq.ids.max()) + 1
    dec = run_decode(pre.cache, pre.s_few, key_set, weights, config.decode, first_token,
                     next_pos, next_id, evict=baseline == "mustdrop")

    if recorder is not None:
        for ev in enc.events:
            recorder.add(index, "encode", "merge", 0, ev.member_ids, ev.score, ev.threshold)
        if baseline == "mustdrop":
            recorder.add(index, "encode", "key", config.encode.resolved_key_layer(config.model.encoder_layers),
                         sorted(key_set.member_ids), None, key_set.threshold_used)
        if baseline == "encoder_only":
            layer = config.encode.resolved_key_layer(config.model.encoder_layers)
            for i in enc_dropped:
                recorder.add(index, "encode", "prune", layer, [i], enc_info["scores"][i], enc_info["threshold"])
        for d in pre.decisions:
            for i in sorted(d.pruned):
                recorder.add(index, "prefill", "prune", d.layer, [i], d.global_scores.get(i), d.threshold)
        for e in dec.events:
            recorder.add(index, "decode", "evict", e.layer, [e.token_id])

    return FixtureRun(fx, enc, pre, dec, frozenset(enc.features.ids), key_set, seq)


# -- suites -----------------------------------------------------------------

def _prepared_inputs(fixtures, weights, config):
    out = []
    for fx in fixtures:
        enc = _encode_for("mustdrop", fx, weights, config.encode)
        out.append((build_sequence(enc.features, fx.text_ids, weights, fx.query_embedding), enc.key_set))
    return out


def resolve_gamma(config: PipelineConfig, weights: ToyWeights, fixtures) -> float:
    """The configured gamma, or one calibrated to the configured budget."""
    if config.prefill.gamma is not None:
        return config.prefill.gamma
    gamma, _ = calibrate_gamma(_prepared_inputs(fixtures, weights, config), weights, config.prefill)
    return gamma


def calibrate(config: PipelineConfig, budget: float, weights: ToyWeights | None = None,
              fixtures=None) -> tuple[float, float]:
    weights = weights or load_model(config)
    fixtures = fixtures if fixtures is not None else make_fixtures(config, weights)
    return calibrate_gamma(_prepared_inputs(fixtures, weights, config), weights, config.prefill, budget)


def calibrate_tau_mean(fixtures, weights: ToyWeights, config: EncodeConfig, target: float,
                       max_iter: int = 40) -> tuple[float, float]:
    """Bisection on ``tau_mean`` for a target mean post-merge token count.

    Survivors grow with ``tau_mean`` (fewer windows pass), so the search is
    monotone. Returns ``(tau_mean, achieved_mean)`` of the closest probe.
    """
    grids = [encode_stage(f.patches, weights, config, merge=False, key_set=False).original for f in fixtures]
    def survivors(tau):
        c = replace(config, tau_mean=tau)
        return float(np.mean([len(local_spatial_merge(g, weights, c)[0].tokens) for g in grids]))

    lo, hi = 1e-6, 1 - 1e-6
    best = None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        m = survivors(mid)
        if best is None or abs(m - target) < abs(best[1] - target):
            best = (mid, m)
        if m == target:
            break
        if m < target:
            lo = mid
        else:
            hi = mid
    return best


def mustdrop_budget(config: PipelineConfig, weights: ToyWeights, fixtures) -> float:
    """Average ``|S_few|`` a mustdrop run of ``config`` reaches; the budget
    budget-matched baselines must consume."""
    if config.prefill.budget is not None and config.baseline != "mustdrop":
        return float(config.prefill.budget)
    md = replace(config, baseline="mustdrop")
    gamma = resolve_gamma(md, weights, fixtures)
    return float(np.mean([len(run_fixture(f, weights, md, gamma).s_few) for f in fixtures]))


def run_suite(config: PipelineConfig, weights: ToyWeights | None = None, fixtures=None,
              budget: float | None = None) -> SuiteResult:
    """Run every fixture of ``config`` and fold the results into a report.

    ``budget`` overrides the keep budget of budget-matched baselines; by
    default it is the configured budget, or the mean ``|S_few|`` of a
    mustdrop run with the same config.
    """
    weights = weights or load_model(config)
    fixtures = fixtures if fixtures is not None else make_fixtures(config, weights)
    gamma = None
    keeps: list[int] = []
    if config.baseline == "mustdrop":
        gamma = resolve_gamma(config, weights, fixtures)
    elif config.baseline in BUDGETED:
        b = budget if budget is not None else mustdrop_budget(config, weights, fixtures)
        keeps = keep_counts(b, len(fixtures), config.model.num_patches)
    recorder = TraceRecorder()
    runs = [run_fixture(fx, weights, config, gamma, keeps[i] if keeps else None, recorder, i)
            for i, fx in enumerate(fixtures)]
    return SuiteResult(config, runs, suite_report(config, runs), recorder, gamma, keeps)


def suite_report(config: PipelineConfig, runs: list[FixtureRun]) -> CostReport:
    geo = get_geometry(config.geometry)
    return build_report(
        geo, PRESET_VISION_TOKENS[geo.name], config.baseline, config.model.num_patches,
        [len(r.post_encode) for r in runs], [len(r.s_few) for r in runs],
        [[len(x) for x in r.prefill_layers] for r in runs],
        [[len(x) for x in r.decode_layers] for r in runs],
        config.model.text_len, config.model.geometry())


def run_pipeline(config: PipelineConfig):
    """``(generated ids per fixture, CostReport, trace events)``."""
    res = run_suite(config)
    return [r.generated for r in res.runs], res.report, res.events


def eviction_sparsity(run_on: FixtureRun, run_off: FixtureRun) -> list[float]:
    """Per decode step of the eviction-off run: final-layer attention mass on
    the ids the eviction-on run dropped, divided by the mean per-entry mass
    (``1 / cache length``), averaged over evicted ids. Empty if nothing was
    evicted."""
    evicted = {e.token_id for e in run_on.decode.events}
    out = []
    if not evicted:
        return out
    for step in run_off.decode.steps:
        ids, row = step.attention[-1]
        mask = np.isin(ids, list(evicted))
        if mask.any():
            out.append(float(row[mask].mean() * len(row)))
    return out


__all__ = [
    "BASELINES", "FixtureRun", "SuiteResult", "calibrate", "calibrate_tau_mean", "eviction_sparsity",
    "keep_counts", "load_model", "make_fixtures", "mustdrop_budget", "run_fixture", "run_pipeline",
    "run_suite", "suite_report",
]
