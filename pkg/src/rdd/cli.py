"""Command-line entry point: single decodes, suites, trace analysis,
scenario generation.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 internal invariant
violation. The default output directory comes from $RDD_OUT_DIR.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .engine import DecodeConfig, Method, decode
from .errors import InvariantViolation, ScenarioIOError, UsageError
from .harness import (
    SuiteSettings,
    export_heatmap,
    render_heatmap_figure,
    run_suite,
)
from .scenarios import (
    Scenario,
    build_denoiser,
    canonical_trap,
    check_geometry,
    load_scenario,
    make_bigram_scenario,
    make_trap_corpus,
    markov_corpus,
    save_scenario,
)
from .schedule import ScheduleConfig
from .types import read_trace, write_trace


def _out_dir(args) -> str:
    d = args.out_dir or os.environ.get("RDD_OUT_DIR") or "rdd-out"
    os.makedirs(d, exist_ok=True)
    return d


_OPTION_DEFAULTS = {
    "method": "rdd",
    "block_len": 32,
    "gen_len": 224,
    "f": 0.9,
    "f_r": None,
    "lambda_": 1.0,
    "rollback_budget": None,
    "seed": None,
    "remask_mode": "confidence",
    "step_cap": None,
}

# config-file key -> option name (file keys mirror the flag spellings)
_CONFIG_KEYS = {
    "method": "method",
    "block_len": "block_len",
    "gen_len": "gen_len",
    "f": "f",
    "f_r": "f_r",
    "lambda": "lambda_",
    "rollback_budget": "rollback_budget",
    "seed": "seed",
    "remask_mode": "remask_mode",
    "step_cap": "step_cap",
    "use_cache": "use_cache",
}


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    # defaults stay None here so an explicit flag can override the config file
    p.add_argument("--config", default=None, help="JSON file with the option keys; flags win")
    p.add_argument("--method", default=None, choices=[m.value for m in Method])
    p.add_argument("--block-len", type=int, default=None)
    p.add_argument("--gen-len", type=int, default=None, help="generated tokens after the prompt")
    p.add_argument("--f", type=float, default=None, help="normal scaling factor")
    p.add_argument("--f-r", type=float, default=None, help="recovery scaling factor (default: f)")
    p.add_argument("--lambda", dest="lambda_", type=float, default=None, help="re-mask sensitivity")
    p.add_argument("--rollback-budget", type=int, default=None,
                   help="rollbacks per block chain (default: 1; block/vanilla force 0)")
    p.add_argument("--seed", type=int, default=None, help="session seed (default: scenario seed)")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--remask-mode", default=None,
                   help="'confidence' or 'random:<ratio>' (baseline)")
    p.add_argument("--step-cap", type=int, default=None)
    p.add_argument("--debug-cache", action="store_true",
                   help="dump cache store metadata per step to a sidecar file")
    p.add_argument("--out-dir", default=None)


def _resolve_options(args) -> dict:
    """Layer option sources: explicit flag > config file > built-in default."""
    from_file: dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ScenarioIOError(args.config, str(exc)) from exc
        except json.JSONDecodeError as exc:
            raise ScenarioIOError(args.config, f"malformed config: {exc}") from exc
        unknown = set(raw) - set(_CONFIG_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        from_file = {_CONFIG_KEYS[k]: v for k, v in raw.items()}
    opts = {}
    for name, default in _OPTION_DEFAULTS.items():
        flag = getattr(args, name)
        if flag is not None:
            opts[name] = flag
        elif name in from_file:
            opts[name] = from_file[name]
        else:
            opts[name] = default
    if args.no_cache:
        opts["use_cache"] = False
    else:
        opts["use_cache"] = bool(from_file.get("use_cache", True))
    return opts


def _resolve_scenario(model_spec: str | None, opts: dict) -> Scenario:
    spec = model_spec
    if spec is None:
        raise UsageError("--model is required (scripted:trap1, scripted:FILE, bigram:FILE, scenario:FILE)")
    if spec == "scripted:trap1":
        gen_blocks, rem = divmod(opts["gen_len"], opts["block_len"])
        if rem or gen_blocks < 3:
            raise UsageError("trap1 needs a gen length of at least 3 whole blocks")
        return canonical_trap(block_len=opts["block_len"], gen_blocks=gen_blocks)
    if spec.startswith("scenario:") or (spec.endswith(".json") and os.path.exists(spec)):
        path = spec.split(":", 1)[1] if spec.startswith("scenario:") else spec
        return load_scenario(path)
    if spec.startswith("scripted:"):
        from .denoise import load_trap_spec

        path = spec.split(":", 1)[1]
        trap = load_trap_spec(path)
        name = os.path.splitext(os.path.basename(path))[0]
        return Scenario(
            name=name,
            prompt=list(trap.prompt),
            ground_truth=list(trap.truth[trap.prompt_len:]),
            seed=opts["seed"] if opts["seed"] is not None else 0,
            model={"kind": "trap", "spec": trap.to_dict()},
        )
    if spec.startswith("bigram:"):
        from .denoise import load_corpus

        path = spec.split(":", 1)[1]
        corpus = load_corpus(path)
        return make_bigram_scenario(corpus, seed=opts["seed"] or 0,
                                    prompt_len=opts["block_len"], gen_len=opts["gen_len"])
    raise UsageError(f"unrecognized --model {spec!r}")


def cmd_decode(args) -> int:
    opts = _resolve_options(args)
    scenario = _resolve_scenario(args.model, opts)
    check_geometry(scenario, opts["block_len"])
    method = Method(opts["method"])
    budget = opts["rollback_budget"]
    if budget is None:
        budget = 0 if method in (Method.BLOCK, Method.VANILLA) else 1
    f_r = opts["f_r"]
    if f_r is None or method in (Method.BLOCK, Method.RDD, Method.VANILLA):
        f_r = opts["f"]
    schedule = ScheduleConfig(f=opts["f"], f_r=f_r, lambda_=opts["lambda_"],
                              rollback_budget=budget)
    cfg = DecodeConfig(
        schedule=schedule,
        block_len=opts["block_len"],
        total_len=scenario.total_len,
        method=method,
        seed=opts["seed"] if opts["seed"] is not None else scenario.seed,
        step_cap=opts["step_cap"],
        use_cache=opts["use_cache"],
        remask_mode=opts["remask_mode"],
        debug_cache=args.debug_cache,
    )
    echo = {
        "scenario": scenario.name,
        "method": method.value,
        "block_len": cfg.block_len,
        "total_len": cfg.total_len,
        "f": schedule.f,
        "f_r": schedule.f_r,
        "lambda": schedule.lambda_,
        "rollback_budget": schedule.rollback_budget,
        "seed": cfg.seed,
        "use_cache": cfg.use_cache,
        "remask_mode": cfg.remask_mode,
    }
    print("config " + json.dumps(echo, separators=(",", ":")))

    denoiser = build_denoiser(scenario)
    result = decode(denoiser, scenario.prompt, cfg)
    denoiser.close()

    out = _out_dir(args)
    trace_path = os.path.join(out, f"{scenario.name}__{method.value}__trace.jsonl")
    write_trace(result.trace, trace_path)
    seq_path = os.path.join(out, f"{scenario.name}__{method.value}__sequence.json")
    with open(seq_path, "w", encoding="utf-8") as fh:
        json.dump({"tokens": result.tokens, "prompt_len": len(scenario.prompt)}, fh)
        fh.write("\n")
    if result.cache_debug is not None:
        meta_path = os.path.join(out, f"{scenario.name}__{method.value}__cache_meta.jsonl")
        with open(meta_path, "w", encoding="utf-8") as fh:
            for entry in result.cache_debug:
                fh.write(json.dumps(entry, separators=(",", ":")) + "\n")

    m = result.metrics
    gen = cfg.total_len - len(scenario.prompt)
    score = int(result.buffer.continuation() == scenario.ground_truth)
    tput = gen / m.wall_time if m.wall_time > 0 else 0.0
    print(
        f"nfe={m.nfe} nfe_f={m.nfe_f} r_s={(m.nfe_f / m.nfe):.4f} "
        f"rollbacks={m.rollback_count} remasked={m.remasked_token_count} "
        f"score={score} gen_tokens={gen} wall_s={m.wall_time:.4f} tok_per_s={tput:.1f}"
    )
    print(f"trace {trace_path}")
    return 0


def _parse_grid(items: list[str] | None) -> dict[str, list] | None:
    if not items:
        return None
    grid: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like key=values")
        key, val = item.split("=", 1)
        key = key.strip()
        if ":" in val:
            parts = val.split(":")
            if len(parts) != 3:
                raise UsageError(f"grid range {val!r} must be start:stop:step")
            start, stop, step = (float(p) for p in parts)
            vals: list = []
            x = start
            while x <= stop + 1e-9:
                vals.append(round(x, 10))
                x += step
        else:
            raw = [v.strip() for v in val.split(",") if v.strip()]
            vals = []
            for v in raw:
                try:
                    vals.append(int(v))
                except ValueError:
                    try:
                        vals.append(float(v))
                    except ValueError:
                        vals.append(v)
        if key == "R":
            vals = [int(v) for v in vals]
        grid[key] = vals
    return grid


def cmd_suite(args) -> int:
    opts = _resolve_options(args)
    grid = _parse_grid(args.grid)
    settings = SuiteSettings(
        f=opts["f"],
        f_r=opts["f_r"],
        lambda_=opts["lambda_"],
        rollback_budget=opts["rollback_budget"] if opts["rollback_budget"] is not None else 1,
        block_len=opts["block_len"],
        use_cache=opts["use_cache"],
        remask_mode=opts["remask_mode"],
        step_cap=opts["step_cap"],
    )
    out = _out_dir(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows, _ = run_suite(
        args.scenarios,
        methods,
        settings=settings,
        grid=grid,
        workers=args.workers,
        out_dir=out,
        heatmaps=args.heatmaps,
    )
    with open(os.path.join(out, "report.md"), "r", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    print(f"report {os.path.join(out, 'report.json')}")
    return 0


def cmd_analyze(args) -> int:
    trace = read_trace(args.trace)
    out = _out_dir(args)
    stem = os.path.splitext(os.path.basename(args.trace))[0]
    csv_path = os.path.join(out, stem + "_heatmap.csv")
    _, summary = export_heatmap(trace, csv_path)
    png_path = os.path.join(out, stem + "_heatmap.png")
    render_heatmap_figure(trace, png_path)
    print(json.dumps(summary, separators=(",", ":")))
    print(f"heatmap {csv_path}")
    print(f"figure {png_path}")
    return 0


def cmd_gen_scenarios(args) -> int:
    if args.kind == "trap":
        gen_blocks, rem = divmod(args.gen_len, args.block_len)
        if rem:
            raise UsageError("--gen-len must be a multiple of --block-len")
        scenarios = make_trap_corpus(
            args.count, seed=args.seed, block_len=args.block_len,
            prompt_len=args.prompt_len, gen_blocks=gen_blocks,
        )
    elif args.kind == "bigram":
        corpus = markov_corpus(seed=args.seed)
        scenarios = [
            make_bigram_scenario(corpus, seed=args.seed + k, prompt_len=args.prompt_len,
                                 gen_len=args.gen_len, name=f"bigram{k:03d}")
            for k in range(args.count)
        ]
    else:
        raise UsageError(f"unknown scenario kind {args.kind!r}")
    for sc in scenarios:
        save_scenario(sc, args.out)
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("decode", help="run one decode and write its trace")
    d.add_argument("--model", default=None,
                   help="scripted:trap1 | scripted:FILE.json | bigram:CORPUS | scenario:FILE.json")
    _add_decode_flags(d)
    d.set_defaults(fn=cmd_decode)

    s = sub.add_parser("suite", help="run a scenario suite and write the report")
    s.add_argument("--scenarios", required=True, help="directory of scenario JSON files")
    s.add_argument("--methods", default="block,rdd", help="comma-separated method list")
    s.add_argument("--grid", action="append", default=None,
                   help="key=v1,v2 or key=start:stop:step; repeatable (keys: f, f_r, lambda, R, remask)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--heatmaps", action="store_true")
    _add_decode_flags(s)
    s.set_defaults(fn=cmd_suite)

    a = sub.add_parser("analyze", help="export heatmap CSV and figure from a trace")
    a.add_argument("--trace", required=True)
    a.add_argument("--out-dir", default=None)
    a.set_defaults(fn=cmd_analyze)

    g = sub.add_parser("gen-scenarios", help="write a scenario corpus")
    g.add_argument("--kind", choices=["trap", "bigram"], required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--block-len", type=int, default=32)
    g.add_argument("--gen-len", type=int, default=224)
    g.add_argument("--prompt-len", type=int, default=32)
    g.set_defaults(fn=cmd_gen_scenarios)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ScenarioIOError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except InvariantViolation as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
