"""Command-line harness.

Exit codes: 0 success, 1 domain error (including failed accounting checks),
2 usage error (bad flags, unreadable or invalid config).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .accounting import compression_ratio, flops_prefill, flops_reduction, kv_mb, preset_schedule
from .config import PipelineConfig, load_config
from .errors import ConfigError, TokenDropError
from .model import get_geometry
from .pipeline import BASELINES, calibrate, load_model, make_fixtures, run_suite
from .trace import emit_trace

# Published (tokens, MB) pairs for the two presets, and published ratios.
KV_TARGETS = {
    "llava-1.5-7b": ((576, 302.4), (440, 231.0), (64, 33.6), (45, 23.6)),
    "llava-next-7b": ((2880, 1512.1), (320, 168.0)),
}
RATIO_TARGETS = ((576, 45, 0.922), (2880, 320, 0.889))
FLOPS_WINDOW = (0.85, 0.92)
PUBLISHED_FLOPS = (9.6, 1.1)
KV_TOLERANCE = 0.01
RATIO_TOLERANCE = 0.001


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(path) -> PipelineConfig:
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _budgets(text: str) -> list[float]:
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad budget list {text!r}") from None
    if not out:
        raise UsageError("empty budget list")
    return out


def _status(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _report_json(report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def cmd_run(args, out) -> int:
    cfg = _config(args.config)
    res = run_suite(cfg)
    if args.trace:
        emit_trace(res.events, args.trace)
    if args.report:
        Path(args.report).write_text(_report_json(res.report))
    r = res.report
    out.write(f"baseline {cfg.baseline}, {r.fixtures} fixtures, geometry {r.geometry}\n")
    if res.gamma is not None:
        out.write(f"gamma {res.gamma:.6f}\n")
    out.write(f"vision tokens: original {r.original_tokens}, post-encode {r.post_encode_avg:.2f}, "
              f"S_few {r.s_few_avg:.2f}, cached after eviction {r.decode_avg:.2f}\n")
    out.write(f"compression ratio {r.compression_ratio:.4f}, kv {r.kv_mb['decode']:.1f} MB "
              f"(baseline {r.kv_mb['baseline']:.1f} MB), flops reduction {r.flops_reduction:.4f}\n")
    if cfg.fixtures.kind == "needle":
        out.write(f"needle retained in S_few: {res.needle_retention()}/{len(res.runs)}\n")
    return 0


def cmd_calibrate(args, out) -> int:
    cfg = _config(args.config)
    if args.fixtures is not None:
        if args.fixtures < 1:
            raise UsageError("--fixtures must be >= 1")
        cfg = replace(cfg, fixtures=replace(cfg.fixtures, count=args.fixtures))
    gamma, achieved = calibrate(cfg, args.budget)
    out.write(f"gamma {gamma:.6f}\nachieved mean |S_few| {achieved:.4f} (target {args.budget:g})\n")
    return 0


def cmd_sweep(args, out) -> int:
    cfg = replace(_config(args.config), baseline="mustdrop")
    weights = load_model(cfg)
    fixtures = make_fixtures(cfg, weights)
    out.write(f"{'budget':>8} {'gamma':>10} {'S_few':>7} {'cached':>7} {'ratio':>7} {'kv MB':>8} {'flops red':>9}\n")
    for b in sorted(_budgets(args.budgets), reverse=True):
        res = run_suite(replace(cfg, prefill=replace(cfg.prefill, gamma=None, budget=b)), weights, fixtures)
        r = res.report
        out.write(f"{b:8.2f} {res.gamma:10.6f} {r.s_few_avg:7.2f} {r.decode_avg:7.2f} "
                  f"{r.compression_ratio:7.4f} {r.kv_mb['decode']:8.1f} {r.flops_reduction:9.4f}\n")
    return 0


def _kv_rows(name, out) -> bool:
    geo = get_geometry(name)
    ok = True
    for tokens, published in KV_TARGETS[name]:
        mb = kv_mb(tokens, geo)
        err = abs(mb - published) / published
        ok &= err <= KV_TOLERANCE
        out.write(f"{name:14} {tokens:5d} tokens -> {mb:7.1f} MB  published {published:7.1f}  "
                  f"err {100 * err:5.2f}%  {_status(err <= KV_TOLERANCE)}\n")
    return ok


def flops_check():
    """Reduction for a llava-next-7b schedule: full tokens in layers 0-1, then
    a constant count so the layer average is 320."""
    geo = get_geometry("llava-next-7b")
    base = flops_prefill([2880] * geo.num_layers, geo)
    pruned = flops_prefill(preset_schedule(2880, 2880, 320, geo.num_layers), geo)
    return base, pruned, flops_reduction(base, pruned)


def cmd_table3(args, out) -> int:
    ok = _kv_rows("llava-1.5-7b", out)
    orig, final, want = RATIO_TARGETS[0]
    got = compression_ratio(orig, final)
    good = abs(got - want) <= RATIO_TOLERANCE
    out.write(f"compression {orig} -> {final}: {100 * got:.2f}%  published {100 * want:.1f}%  {_status(good)}\n")
    return 0 if ok and good else 1


def cmd_table6(args, out) -> int:
    ok = _kv_rows("llava-next-7b", out)
    orig, final, want = RATIO_TARGETS[1]
    got = compression_ratio(orig, final)
    good = abs(got - want) <= RATIO_TOLERANCE
    out.write(f"compression {orig} -> {final}: {100 * got:.2f}%  published {100 * want:.1f}%  {_status(good)}\n")
    base, pruned, red = flops_check()
    in_window = FLOPS_WINDOW[0] <= red <= FLOPS_WINDOW[1]
    pub = 1 - PUBLISHED_FLOPS[1] / PUBLISHED_FLOPS[0]
    out.write(f"prefill FLOPs {base / 1e12:.2f} T -> {pruned / 1e12:.2f} T: reduction {100 * red:.2f}%  "
              f"published {100 * pub:.1f}%  window [{100 * FLOPS_WINDOW[0]:.0f}%, "
              f"{100 * FLOPS_WINDOW[1]:.0f}%]  {_status(in_window)}\n")
    return 0 if ok and good and in_window else 1


def cmd_compare(args, out) -> int:
    cfg = _config(args.config)
    names = list(BASELINES) if args.baselines == "all" else [b.strip() for b in args.baselines.split(",")]
    unknown = [b for b in names if b not in BASELINES]
    if unknown:
        raise UsageError(f"unknown baselines {unknown}; known: {', '.join(BASELINES)}")
    weights = load_model(cfg)
    fixtures = make_fixtures(cfg, weights)
    ref = run_suite(replace(cfg, baseline="mustdrop"), weights, fixtures)
    budget = ref.mean_s_few()
    needle = cfg.fixtures.kind == "needle"
    out.write(f"budget (mean |S_few| of mustdrop) {budget:.2f} of {cfg.model.num_patches}\n")
    out.write(f"{'baseline':13} {'S_few':>7} {'cached':>7} {'ratio':>7} {'kv MB':>8} {'flops red':>9}"
              + (f" {'needle':>7}" if needle else "") + "\n")
    for name in names:
        res = ref if name == "mustdrop" else run_suite(replace(cfg, baseline=name), weights, fixtures, budget)
        r = res.report
        line = (f"{name:13} {r.s_few_avg:7.2f} {r.decode_avg:7.2f} {r.compression_ratio:7.4f} "
                f"{r.kv_mb['decode']:8.1f} {r.flops_reduction:9.4f}")
        if needle:
            line += f" {res.needle_retention():3d}/{len(res.runs):<3d}"
        out.write(line + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tokendrop", description="Three-stage vision-token dropping on a toy model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run the pipeline over the configured fixtures")
    r.add_argument("--config", required=True)
    r.add_argument("--trace")
    r.add_argument("--report")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="find gamma for a target mean |S_few|")
    c.add_argument("--config", required=True)
    c.add_argument("--budget", required=True, type=float)
    c.add_argument("--fixtures", type=int)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("sweep", help="calibrate and run several budgets")
    s.add_argument("--config", required=True)
    s.add_argument("--budgets", required=True)
    s.set_defaults(func=cmd_sweep)

    sub.add_parser("table3", help="KV-memory accounting, llava-1.5-7b").set_defaults(func=cmd_table3)
    sub.add_parser("table6", help="KV-memory and FLOPs accounting, llava-next-7b").set_defaults(func=cmd_table6)

    cp = sub.add_parser("compare", help="budget-matched baseline comparison")
    cp.add_argument("--config", required=True)
    cp.add_argument("--baselines", default="all")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return 2
    except (TokenDropError, OSError) as exc:
        err.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
