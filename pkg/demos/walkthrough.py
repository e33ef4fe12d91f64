"""
One needle image through the three stages
=========================================

A flat background with a single odd patch, and a text query aimed at it.
We follow the vision-token count from the encoder to the decode cache.
"""

from tokendrop import FixtureSpec, PipelineConfig, PrefillConfig
from tokendrop.pipeline import load_model, make_fixtures, run_suite

# 20 needle fixtures; gamma calibrated so S_few averages 7.1 of 64 tokens
config = PipelineConfig(fixtures=FixtureSpec(kind="needle", count=20), prefill=PrefillConfig(budget=7.1))
weights = load_model(config)
fixtures = make_fixtures(config, weights)
suite = run_suite(config, weights, fixtures)
print(f"calibrated gamma: {suite.gamma:.4f}")

run = suite.runs[0]
fx = run.fixture
print(f"needle patch id: {fx.needle_id}")

# encoder: the background windows are identical, so nearly all of them merge
print(f"after merging: {len(run.post_encode)} of 64 tokens, {len(run.encode.events)} windows merged")
print(f"key set (CLS outliers): {sorted(run.key_set.member_ids)}")

# prefill: text attention decides who stays at the scheduled layers
for d in run.prefill.decisions:
    print(f"layer {d.layer}: pruned {len(d.pruned)}, spared by key set {len(d.spared_by_key)}")
print(f"S_few: {sorted(run.s_few)}  needle kept: {fx.needle_id in run.s_few}")

# decode: deep-layer caches keep only S_few and the key set
print("vision entries per layer after eviction:", [len(x) for x in run.decode_layers])
print("generated ids:", run.generated)

# across the suite
print(f"needle retained on {suite.needle_retention()}/{len(suite.runs)} fixtures")
r = suite.report
print(f"compression ratio {r.compression_ratio:.3f}, KV cache {r.kv_mb['decode']:.1f} MB "
      f"vs {r.kv_mb['baseline']:.1f} MB unpruned (llava-1.5-7b scale)")
