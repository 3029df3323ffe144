"""Experiment orchestration: metrics, suites, reports, heatmaps and figures.

A suite runs every (scenario, method, grid cell) combination with fixed
seeds, writes the full trace archive, and aggregates one report row per
(method, cell). Count-based numbers are pure functions of the archived
traces; wall-time numbers are reported but excluded from any determinism
guarantee.
"""

from __future__ import annotations

import csv
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .engine import DecodeConfig, Method, decode
from .errors import ScenarioIOError, UsageError
from .scenarios import Scenario, build_denoiser, check_geometry, load_scenario
from .schedule import ScheduleConfig
from .types import EventKind, TraceEvent


def stagnation_rate(nfe_f: int, nfe: int) -> float:
    """Share of evaluations that ended in forced decoding."""
    if nfe <= 0:
        raise UsageError(f"nfe must be positive, got {nfe}")
    if nfe_f > nfe or nfe_f < 0:
        raise UsageError(f"nfe_f={nfe_f} must lie in [0, nfe={nfe}]")
    return nfe_f / nfe


# ---------------------------------------------------------------------------
# suite configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteSettings:
    f: float = 0.9
    f_r: float | None = None  # None: equal to f
    lambda_: float = 1.0
    rollback_budget: int = 1
    block_len: int = 32
    use_cache: bool = True
    remask_mode: str = "confidence"
    step_cap: int | None = None


_GRID_KEYS = {"f", "f_r", "lambda", "R", "remask"}


def build_config(method: Method, settings: SuiteSettings, total_len: int,
                 seed: int, cell: dict | None = None) -> DecodeConfig:
    """Resolve settings plus one grid cell into a decode configuration.

    Per-method normalization: block and vanilla force a zero budget, block
    and rdd force a single scaling factor.
    """
    cell = dict(cell or {})
    unknown = set(cell) - _GRID_KEYS
    if unknown:
        raise UsageError(f"unknown grid keys: {sorted(unknown)}")
    f = float(cell.get("f", settings.f))
    f_r = cell.get("f_r", settings.f_r)
    f_r = f if f_r is None else float(f_r)
    lam = float(cell.get("lambda", settings.lambda_))
    budget = int(cell.get("R", settings.rollback_budget))
    remask_mode = str(cell.get("remask", settings.remask_mode))
    if method in (Method.BLOCK, Method.VANILLA):
        budget = 0
    if method in (Method.BLOCK, Method.RDD, Method.VANILLA):
        f_r = f
    schedule = ScheduleConfig(f=f, f_r=f_r, lambda_=lam, rollback_budget=budget)
    return DecodeConfig(
        schedule=schedule,
        block_len=settings.block_len,
        total_len=total_len,
        method=method,
        seed=seed,
        step_cap=settings.step_cap,
        use_cache=settings.use_cache,
        remask_mode=remask_mode,
    )


# ---------------------------------------------------------------------------
# single runs and aggregation
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    scenario: str
    method: str
    cell: dict
    score: int
    gen_tokens: int
    nfe: int
    nfe_f: int
    rollback_count: int
    remasked_token_count: int
    wall_time: float
    trace: list[TraceEvent] = field(default_factory=list, repr=False)
    tokens: list[int] = field(default_factory=list, repr=False)
    prompt_len: int = 0
    ground_truth: list[int] = field(default_factory=list, repr=False)


def run_one(scenario: Scenario, method: Method, settings: SuiteSettings,
            cell: dict | None = None, base_dir: str | None = None) -> RunRecord:
    check_geometry(scenario, settings.block_len)
    denoiser = build_denoiser(scenario, base_dir=base_dir)
    cfg = build_config(method, settings, scenario.total_len, scenario.seed, cell)
    result = decode(denoiser, scenario.prompt, cfg)
    denoiser.close()
    continuation = result.buffer.continuation()
    return RunRecord(
        scenario=scenario.name,
        method=method.value,
        cell=dict(cell or {}),
        score=int(continuation == scenario.ground_truth),
        gen_tokens=len(continuation),
        nfe=result.metrics.nfe,
        nfe_f=result.metrics.nfe_f,
        rollback_count=result.metrics.rollback_count,
        remasked_token_count=result.metrics.remasked_token_count,
        wall_time=result.metrics.wall_time,
        trace=result.trace,
        tokens=result.tokens,
        prompt_len=len(scenario.prompt),
        ground_truth=list(scenario.ground_truth),
    )


@dataclass
class ReportRow:
    method: str
    cell: dict
    runs: int
    score: float
    throughput: float
    latency: float
    nfe: int
    nfe_f: int
    stagnation: float
    rollback_count: int
    remask_count: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "cell": self.cell,
            "runs": self.runs,
            "score": self.score,
            "throughput": self.throughput,
            "latency": self.latency,
            "nfe": self.nfe,
            "nfe_f": self.nfe_f,
            "stagnation_rate": self.stagnation,
            "rollback_count": self.rollback_count,
            "remask_count": self.remask_count,
        }


def aggregate(records: list[RunRecord]) -> list[ReportRow]:
    """One row per (method, cell), in first-seen order."""
    groups: dict[tuple, list[RunRecord]] = {}
    order: list[tuple] = []
    for rec in records:
        key = (rec.method, tuple(sorted(rec.cell.items())))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)
    rows = []
    for key in order:
        recs = groups[key]
        nfe = sum(r.nfe for r in recs)
        nfe_f = sum(r.nfe_f for r in recs)
        wall = sum(r.wall_time for r in recs)
        tokens = sum(r.gen_tokens for r in recs)
        rows.append(
            ReportRow(
                method=recs[0].method,
                cell=dict(recs[0].cell),
                runs=len(recs),
                score=sum(r.score for r in recs) / len(recs),
                throughput=tokens / wall if wall > 0 else 0.0,
                latency=wall / len(recs),
                nfe=nfe,
                nfe_f=nfe_f,
                stagnation=stagnation_rate(nfe_f, nfe),
                rollback_count=sum(r.rollback_count for r in recs),
                remask_count=sum(r.remasked_token_count for r in recs),
            )
        )
    return rows


def _cell_slug(cell: dict) -> str:
    if not cell:
        return "base"
    parts = [f"{k}={cell[k]}" for k in sorted(cell)]
    return re.sub(r"[^A-Za-z0-9_.=,-]", "_", ",".join(parts))


def _grid_cells(grid: dict[str, list] | None) -> list[dict]:
    if not grid:
        return [{}]
    keys = sorted(grid)
    cells: list[dict] = [{}]
    for k in keys:
        cells = [dict(c, **{k: v}) for c in cells for v in grid[k]]
    return cells


def _run_unit(args) -> RunRecord:
    scenario_dict, method_value, settings, cell, base_dir = args
    scenario = Scenario(
        name=scenario_dict["name"],
        prompt=scenario_dict["prompt"],
        ground_truth=scenario_dict["ground_truth"],
        seed=scenario_dict["seed"],
        model=scenario_dict["model"],
    )
    return run_one(scenario, Method(method_value), settings, cell, base_dir=base_dir)


def run_suite(
    scenarios,
    methods,
    settings: SuiteSettings = SuiteSettings(),
    grid: dict[str, list] | None = None,
    workers: int = 1,
    out_dir: str | None = None,
    heatmaps: bool = False,
) -> tuple[list[ReportRow], list[RunRecord]]:
    """Run every (scenario, method, cell) combination.

    ``scenarios`` is a list of Scenario objects or a directory of scenario
    JSON files. Returns (aggregated rows, individual records) and, when
    out_dir is given, writes the report, trace archive and figures there.
    """
    base_dir = None
    if isinstance(scenarios, str):
        base_dir = scenarios
        paths = sorted(
            os.path.join(scenarios, p) for p in os.listdir(scenarios) if p.endswith(".json")
        )
        if not paths:
            raise ScenarioIOError(scenarios, "no scenario files found")
        scenarios = [load_scenario(p) for p in paths]
    if not scenarios:
        raise ScenarioIOError("<memory>", "empty scenario list")
    methods = [Method(m) for m in methods]
    cells = _grid_cells(grid)

    units = [
        (sc.to_dict(), m.value, settings, cell, base_dir)
        for m in methods
        for cell in cells
        for sc in scenarios
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_unit, units, chunksize=8))
    else:
        records = [_run_unit(u) for u in units]

    rows = aggregate(records)
    if out_dir is not None:
        write_archive(rows, records, out_dir, grid=grid, heatmaps=heatmaps)
    return rows, records


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------


def final_commit_confidences(trace: list[TraceEvent]) -> dict[int, float]:
    """Replay a trace and return the confidence each generated position
    carried at its final commit. Raises if the trace left holes."""
    if not trace:
        raise UsageError("empty trace")
    conf: dict[int, float] = {}
    for ev in trace:
        if ev.kind in (EventKind.DECODE, EventKind.FORCE):
            for i, c in zip(ev.positions, ev.confidences):
                conf[i] = c
        elif ev.kind is EventKind.REMASK:
            for i in ev.positions:
                del conf[i]
    start = min(ev.window.start for ev in trace)
    end = max(ev.window.end for ev in trace)
    missing = [i for i in range(start, end) if i not in conf]
    if missing:
        raise UsageError(f"incomplete trace: positions {missing[:8]}... never committed")
    return conf


def export_heatmap(trace: list[TraceEvent], csv_path: str | None = None) -> tuple[list[tuple[int, float]], dict]:
    """Position/commit-confidence table plus summary statistics."""
    conf = final_commit_confidences(trace)
    rows = sorted(conf.items())
    values = [c for _, c in rows]
    summary = {
        "positions": len(values),
        "mean_confidence": sum(values) / len(values),
        "frac_below_0.7": sum(1 for c in values if c < 0.7) / len(values),
    }
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "confidence"])
            for pos, c in rows:
                w.writerow([pos, repr(c)])
        with open(_sibling(csv_path, "_summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1)
            fh.write("\n")
    return rows, summary


def _sibling(path: str, suffix: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + suffix


# ---------------------------------------------------------------------------
# report and archive output
# ---------------------------------------------------------------------------


def report_markdown(rows: list[ReportRow]) -> str:
    head = (
        "| method | cell | runs | score | tok/s | latency_s | NFE | NFE_f | r_s | rollbacks | remasked |\n"
        "|---|---|---|---|---|---|---|---|---|---|---|\n"
    )
    body = []
    for r in rows:
        body.append(
            f"| {r.method} | {_cell_slug(r.cell)} | {r.runs} | {r.score:.4f} "
            f"| {r.throughput:.1f} | {r.latency:.4f} | {r.nfe} | {r.nfe_f} "
            f"| {r.stagnation:.4f} | {r.rollback_count} | {r.remask_count} |"
        )
    return head + "\n".join(body) + "\n"


def write_archive(rows: list[ReportRow], records: list[RunRecord], out_dir: str,
                  grid: dict[str, list] | None = None, heatmaps: bool = False) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as fh:
        fh.write(report_markdown(rows))
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump({"rows": [r.to_dict() for r in rows]}, fh, indent=1)
        fh.write("\n")
    tdir = os.path.join(out_dir, "traces")
    sdir = os.path.join(out_dir, "sequences")
    os.makedirs(tdir, exist_ok=True)
    os.makedirs(sdir, exist_ok=True)
    hdir = os.path.join(out_dir, "heatmaps")
    if heatmaps:
        os.makedirs(hdir, exist_ok=True)
    for rec in records:
        stem = f"{rec.scenario}__{rec.method}__{_cell_slug(rec.cell)}"
        with open(os.path.join(tdir, stem + ".jsonl"), "w", encoding="utf-8") as fh:
            for ev in rec.trace:
                fh.write(ev.to_json_line())
                fh.write("\n")
        with open(os.path.join(sdir, stem + ".json"), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "scenario": rec.scenario,
                    "method": rec.method,
                    "cell": rec.cell,
                    "prompt_len": rec.prompt_len,
                    "tokens": rec.tokens,
                    "ground_truth": rec.ground_truth,
                },
                fh,
            )
            fh.write("\n")
        if heatmaps:
            export_heatmap(rec.trace, os.path.join(hdir, stem + ".csv"))
    render_figures(rows, out_dir, grid=grid)


def rebuild_rows(out_dir: str) -> list[ReportRow]:
    """Recompute report rows from the archived traces and sequences.

    Wall-time derived columns cannot be rebuilt and are zeroed; everything
    count-based must match the original report exactly.
    """
    tdir = os.path.join(out_dir, "traces")
    sdir = os.path.join(out_dir, "sequences")
    records = []
    for name in sorted(os.listdir(tdir)):
        if not name.endswith(".jsonl"):
            continue
        stem = name[: -len(".jsonl")]
        with open(os.path.join(tdir, name), "r", encoding="utf-8") as fh:
            trace = [TraceEvent.from_dict(json.loads(line)) for line in fh if line.strip()]
        with open(os.path.join(sdir, stem + ".json"), "r", encoding="utf-8") as fh:
            seq = json.load(fh)
        kinds = [ev.kind for ev in trace]
        nfe = sum(1 for k in kinds if k in (EventKind.DECODE, EventKind.STAGNATE))
        records.append(
            RunRecord(
                scenario=seq["scenario"],
                method=seq["method"],
                cell=seq["cell"],
                score=int(seq["tokens"][seq["prompt_len"]:] == seq["ground_truth"]),
                gen_tokens=len(seq["tokens"]) - seq["prompt_len"],
                nfe=nfe,
                nfe_f=sum(1 for k in kinds if k is EventKind.FORCE),
                rollback_count=sum(1 for k in kinds if k is EventKind.ROLLBACK),
                remasked_token_count=sum(
                    len(ev.positions) for ev in trace if ev.kind is EventKind.REMASK
                ),
                wall_time=0.0,
            )
        )
    records.sort(key=lambda r: (r.method, _cell_slug(r.cell), r.scenario))
    return aggregate(records)


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------


def render_figures(rows: list[ReportRow], out_dir: str, grid: dict[str, list] | None = None) -> list[str]:
    """Render summary figures next to the delimited outputs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fdir = os.path.join(out_dir, "figures")
    os.makedirs(fdir, exist_ok=True)
    written = []

    methods = sorted({r.method for r in rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    xs = range(len(rows))
    labels = [f"{r.method}\n{_cell_slug(r.cell)}" for r in rows]
    ax1.bar(xs, [r.score for r in rows], color="#4878a8")
    ax1.set_xticks(list(xs), labels, fontsize=6, rotation=30)
    ax1.set_ylabel("exact-match score")
    ax2.bar(xs, [r.stagnation for r in rows], color="#a85448")
    ax2.set_xticks(list(xs), labels, fontsize=6, rotation=30)
    ax2.set_ylabel("stagnation rate r_s")
    fig.tight_layout()
    path = os.path.join(fdir, "summary.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    numeric_keys = [
        k for k in (grid or {}) if all(isinstance(v, (int, float)) for v in grid[k])
    ]
    for key in numeric_keys:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
        for m in methods:
            pts = sorted(
                (r.cell[key], r.score, r.nfe) for r in rows if r.method == m and key in r.cell
            )
            if not pts:
                continue
            ax1.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
            ax2.plot([p[0] for p in pts], [p[2] for p in pts], marker="o", label=m)
        ax1.set_xlabel(key)
        ax1.set_ylabel("score")
        ax2.set_xlabel(key)
        ax2.set_ylabel("total NFE")
        ax1.legend(fontsize=7)
        fig.tight_layout()
        path = os.path.join(fdir, f"grid_{key}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_heatmap_figure(trace: list[TraceEvent], path: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, summary = export_heatmap(trace)
    fig, ax = plt.subplots(figsize=(9, 2.2))
    positions = [p for p, _ in rows]
    confs = [c for _, c in rows]
    img = ax.imshow([confs], aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0,
                    extent=(positions[0], positions[-1] + 1, 0, 1))
    ax.set_yticks([])
    ax.set_xlabel("position")
    ax.set_title(
        f"commit confidence (mean {summary['mean_confidence']:.3f}, "
        f"{summary['frac_below_0.7'] * 100:.1f}% below 0.7)",
        fontsize=9,
    )
    fig.colorbar(img, ax=ax, fraction=0.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
