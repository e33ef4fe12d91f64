"""
Memory and compute at full scale
================================

The toy model is tiny, but the cost model is sized for real 7B geometries.
"""

from tokendrop import compression_ratio, flops_prefill, get_geometry, kv_mb
from tokendrop.accounting import preset_schedule

geo = get_geometry("llava-1.5-7b")
print(f"{geo.name}: {geo.num_layers} layers, hidden {geo.hidden_dim}, fp{8 * geo.bytes_per_element}")
for tokens in (576, 440, 64, 45):
    print(f"  {tokens:4d} vision tokens -> {kv_mb(tokens, geo):6.1f} MB of KV cache")
print(f"  576 -> 45 is a {100 * compression_ratio(576, 45):.1f}% compression")

# a high-resolution preset: five 576-token crops
geo = get_geometry("llava-next-7b")
full = flops_prefill([2880] * geo.num_layers, geo)
# two full layers, then a flat count chosen so the layer average is 320
schedule = preset_schedule(2880, 2880, 320, geo.num_layers)
pruned = flops_prefill(schedule, geo)
print(f"\n{geo.name}: {kv_mb(2880, geo):.1f} MB -> {kv_mb(320, geo):.1f} MB")
print(f"prefill FLOPs {full / 1e12:.2f} T -> {pruned / 1e12:.2f} T ({100 * (1 - pruned / full):.1f}% less)")
print("per-layer tokens:", schedule[:4], "...")
