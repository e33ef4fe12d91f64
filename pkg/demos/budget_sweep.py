"""
Budgets and baselines
=====================

Calibrate the prefill threshold for three budgets on textured "blocks"
images, then compare against budget-matched baselines on needle images.
"""

from dataclasses import replace

from tokendrop import FixtureSpec, PipelineConfig, PrefillConfig
from tokendrop.pipeline import BASELINES, load_model, make_fixtures, run_suite

# 64-patch analogs of keeping 192, 128 and 64 of 576 tokens
budgets = [round(64 * b / 576, 1) for b in (192, 128, 64)]

config = PipelineConfig(fixtures=FixtureSpec(kind="blocks", count=40), prefill=PrefillConfig(budget=budgets[0]))
weights = load_model(config)
fixtures = make_fixtures(config, weights)

print(f"{'budget':>7} {'gamma':>8} {'S_few':>6} {'ratio':>6} {'KV MB':>7}")
for b in budgets:
    res = run_suite(replace(config, prefill=PrefillConfig(budget=b)), weights, fixtures)
    r = res.report
    print(f"{b:7.1f} {res.gamma:8.4f} {res.mean_s_few():6.2f} {r.compression_ratio:6.3f} {r.kv_mb['decode']:7.1f}")

# same budget for everyone; only mustdrop consults the text and the key set
needle = PipelineConfig(fixtures=FixtureSpec(kind="needle", count=40), prefill=PrefillConfig(budget=budgets[-1]))
nfix = make_fixtures(needle, weights)
ref = run_suite(needle, weights, nfix)
print(f"\nneedle retention at budget {ref.mean_s_few():.2f}")
for name in BASELINES:
    res = ref if name == "mustdrop" else run_suite(replace(needle, baseline=name), weights, nfix, ref.mean_s_few())
    print(f"  {name:13} {res.needle_retention():3d}/{len(res.runs)}")
