"""The reversible block decoding state machine and its baseline modes.

One decode walks the generated region block by block. Inside a window the
loop is: evaluate the denoiser on the masked set, then take exactly one
transition:

  DECODE    at least one prediction clears the dynamic threshold; commit all
            of them in parallel.
  ROLLBACK  nothing clears the threshold, masks remain, budget is left and
            the window is not at the prompt: merge the previous block into
            the window, re-mask its shaky commits, drop the cached context
            for the merged span, and continue in recovery mode.
  FORCE     nothing clears the threshold and rollback is unavailable: commit
            the single highest-confidence prediction to guarantee progress.

Completing a window emits BLOCK_DONE and, when the frontier advanced into
new territory, restores the budget and the normal scheduling factor. The
rollback budget is therefore a per-chain cap: re-entering a merged window
never refreshes it.

Method reductions: BLOCK is this machine with a zero budget (the monotonic
baseline); RDD uses one factor for both modes; RDD_STAR enables the
conservative recovery factor. VANILLA ignores blocks entirely and commits
one globally best token per evaluation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cache import CacheHandle, CacheStore, disabled_handle
from .denoise import DenoiserContract, DenoiserOutput
from .errors import Runaway, UsageError
from .remask import apply_random_remask, apply_remask, remask_stream
from .schedule import ScheduleConfig, current_factor, select_decodable, threshold
from .types import (
    BlockWindow,
    DecodingState,
    EventKind,
    Mode,
    TokenBuffer,
    TraceEvent,
    count_masks,
    merge_window,
)


class Method(str, Enum):
    VANILLA = "vanilla"
    BLOCK = "block"
    RDD = "rdd"
    RDD_STAR = "rdd-star"


@dataclass(frozen=True)
class DecodeConfig:
    schedule: ScheduleConfig
    block_len: int
    total_len: int
    method: Method
    seed: int = 0
    step_cap: int | None = None
    use_cache: bool = True
    remask_mode: str = "confidence"  # or "random:<ratio>"
    debug_cache: bool = False

    def __post_init__(self) -> None:
        if self.block_len <= 0:
            raise UsageError(f"block length must be positive, got {self.block_len}")
        if self.total_len <= 0:
            raise UsageError(f"total length must be positive, got {self.total_len}")
        if self.step_cap is not None and self.step_cap <= 0:
            raise UsageError(f"step cap must be positive, got {self.step_cap}")
        s = self.schedule
        if self.method is Method.BLOCK:
            if s.rollback_budget != 0:
                raise UsageError("method block requires a zero rollback budget")
            if s.f_r != s.f:
                raise UsageError("method block requires f_r == f")
        elif self.method is Method.RDD:
            if s.f_r != s.f:
                raise UsageError("method rdd requires f_r == f (use rdd-star for a dual scale)")
        self._parse_remask_mode()

    def _parse_remask_mode(self) -> tuple[str, float]:
        mode = self.remask_mode
        if mode == "confidence":
            return "confidence", 0.0
        if mode.startswith("random:"):
            try:
                ratio = float(mode.split(":", 1)[1])
            except ValueError as exc:
                raise UsageError(f"bad remask mode {mode!r}") from exc
            if not 0.0 <= ratio <= 1.0:
                raise UsageError(f"random re-mask ratio must be in [0, 1], got {ratio}")
            return "random", ratio
        raise UsageError(f"unknown remask mode {mode!r}")


def nfe_bound(cfg: DecodeConfig, prompt_len: int) -> int:
    """Termination bound: every evaluation either commits a token or burns
    budget, and the budget refills at most once per block chain."""
    gen = cfg.total_len - prompt_len
    blocks = gen // cfg.block_len
    r = cfg.schedule.rollback_budget
    return (r + 1) * gen + blocks * (r + 1)


@dataclass
class DecodeMetrics:
    nfe: int = 0
    nfe_f: int = 0
    rollback_count: int = 0
    remasked_token_count: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "nfe": self.nfe,
            "nfe_f": self.nfe_f,
            "rollback_count": self.rollback_count,
            "remasked_token_count": self.remasked_token_count,
            "wall_time": self.wall_time,
        }


@dataclass
class DecodeResult:
    buffer: TokenBuffer
    trace: list[TraceEvent]
    metrics: DecodeMetrics
    cache_debug: list[dict] | None = None

    @property
    def tokens(self) -> list[int]:
        return list(self.buffer.tokens)

    def event_kinds(self) -> list[EventKind]:
        return [ev.kind for ev in self.trace]


def _event(step: int, kind: EventKind, window: BlockWindow, masked: int,
           tau: float | None, positions: list[int], confs: list[float]) -> TraceEvent:
    return TraceEvent(step=step, kind=kind, window=window, masked_count=masked,
                      tau=tau, positions=positions, confidences=confs)


def budget_policy(state: DecodingState, cfg: DecodeConfig) -> DecodingState:
    """Reset budget and mode when the completed window reaches new territory.

    Called at block completion; with contiguous advancement the completed
    window's end always meets or passes the recorded frontier, so each block
    chain starts with a full budget while mid-chain re-entries never refresh.
    """
    if state.window.end >= state.frontier:
        state.budget = cfg.schedule.rollback_budget
        state.mode = Mode.NORMAL
        state.frontier = max(state.frontier, state.window.end)
    return state


def step(
    state: DecodingState,
    output: DenoiserOutput,
    cfg: DecodeConfig,
    denoiser: DenoiserContract | None = None,
    rng: np.random.Generator | None = None,
    step_base: int = 0,
) -> tuple[DecodingState, list[TraceEvent]]:
    """Apply one transition for one denoiser evaluation.

    Returns the mutated state plus the trace events describing the
    transition: [DECODE], [STAGNATE, ROLLBACK, REMASK] or [STAGNATE, FORCE].
    """
    buffer = state.buffer
    window = state.window
    masked = buffer.masked_positions(window.start, window.end)
    if not masked:
        raise UsageError("step called on a completed window (detect BLOCK_DONE first)")
    output.check_covers(masked)
    m = len(masked)

    if cfg.method is Method.VANILLA:
        # one token per evaluation, globally highest confidence, lowest index on ties
        best = max(masked, key=lambda i: (output.predictions[i].confidence, -i))
        pred = output.predictions[best]
        buffer.commit(best, pred.token, pred.confidence)
        state.note_commits([best])
        ev = _event(step_base, EventKind.DECODE, window, m, -1.0, [best], [pred.confidence])
        return state, [ev]

    f_curr = current_factor(state.mode, cfg.schedule)
    tau = threshold(f_curr, m)
    chosen = select_decodable(output, tau)

    if chosen:
        confs = []
        for i in chosen:
            pred = output.predictions[i]
            buffer.commit(i, pred.token, pred.confidence)
            confs.append(pred.confidence)
        state.note_commits(chosen)
        ev = _event(step_base, EventKind.DECODE, window, m, tau, chosen, confs)
        return state, [ev]

    # stagnation: no prediction clears tau while masks remain
    events = [_event(step_base, EventKind.STAGNATE, window, m, tau, [], [])]

    can_roll = state.budget > 0 and window.start - window.block_len >= buffer.prompt_len
    if can_roll:
        if rng is None:
            rng = remask_stream(cfg.seed)
        events.append(_event(step_base + 1, EventKind.ROLLBACK, window, m, tau, [], []))
        merged = merge_window(window, buffer.prompt_len)
        revived = (merged.start, merged.end - merged.block_len)
        former = {i: buffer.commit_confidence[i] for i in range(*revived) if not buffer.is_masked(i)}
        mode, ratio = cfg._parse_remask_mode()
        if mode == "confidence":
            hit = apply_remask(buffer, revived, cfg.schedule.lambda_, rng)
        else:
            hit = apply_random_remask(buffer, revived, ratio, merged.block_len, rng)
        if denoiser is not None:
            state.cache = denoiser.invalidate(state.cache, (merged.start, merged.end))
        state.window = merged
        state.budget -= 1
        state.mode = Mode.RECOVERY
        post_masks = count_masks(buffer, merged)
        events.append(
            _event(step_base + 2, EventKind.REMASK, merged, post_masks, None,
                   hit, [former[i] for i in hit])
        )
        return state, events

    # forced decoding: single best prediction despite sub-threshold confidence
    best = max(masked, key=lambda i: (output.predictions[i].confidence, -i))
    pred = output.predictions[best]
    buffer.commit(best, pred.token, pred.confidence)
    state.note_commits([best])
    events.append(_event(step_base + 1, EventKind.FORCE, window, m, tau, [best], [pred.confidence]))
    return state, events


def decode(denoiser: DenoiserContract, prompt, cfg: DecodeConfig) -> DecodeResult:
    """Run one full decode; returns the finished buffer, trace and metrics."""
    t0 = time.perf_counter()
    buffer = TokenBuffer.fresh(prompt, cfg.total_len, denoiser.mask_id)
    gen = cfg.total_len - buffer.prompt_len
    if gen % cfg.block_len != 0:
        raise UsageError(
            f"block length {cfg.block_len} must divide the generated length {gen}"
        )

    if cfg.method is Method.VANILLA:
        window = BlockWindow(start=buffer.prompt_len, end=cfg.total_len, block_len=gen)
    else:
        window = BlockWindow(start=buffer.prompt_len, end=buffer.prompt_len + cfg.block_len,
                             block_len=cfg.block_len)

    if cfg.use_cache and cfg.method is not Method.VANILLA:
        handle: CacheHandle = CacheHandle(
            store=CacheStore(origin=buffer.prompt_len, block_len=cfg.block_len), generation=0
        )
    else:
        handle = disabled_handle()

    state = DecodingState(
        buffer=buffer,
        window=window,
        cache=handle,
        budget=cfg.schedule.rollback_budget,
        mode=Mode.NORMAL,
        frontier=buffer.prompt_len,
    )
    rng = remask_stream(cfg.seed)
    cap = cfg.step_cap if cfg.step_cap is not None else nfe_bound(cfg, buffer.prompt_len)

    trace: list[TraceEvent] = []
    metrics = DecodeMetrics()
    cache_debug: list[dict] | None = [] if cfg.debug_cache else None
    next_step = 0

    while True:
        if count_masks(state.buffer, state.window) == 0:
            trace.append(_event(next_step, EventKind.BLOCK_DONE, state.window, 0, None, [], []))
            next_step += 1
            if state.window.end >= cfg.total_len:
                break
            state = budget_policy(state, cfg)
            state.window = state.window.advanced()
            continue

        output, state.cache = denoiser.evaluate(state.buffer, state.window, state.cache)
        metrics.nfe += 1
        if metrics.nfe > cap:
            raise Runaway(f"decode exceeded its step cap of {cap} evaluations")

        state, events = step(state, output, cfg, denoiser=denoiser, rng=rng, step_base=next_step)
        next_step += len(events)
        trace.extend(events)
        for ev in events:
            if ev.kind is EventKind.FORCE:
                metrics.nfe_f += 1
            elif ev.kind is EventKind.ROLLBACK:
                metrics.rollback_count += 1
            elif ev.kind is EventKind.REMASK:
                metrics.remasked_token_count += len(ev.positions)
        if cache_debug is not None and state.cache.store is not None:
            cache_debug.append(state.cache.store.metadata())

    metrics.wall_time = time.perf_counter() - t0
    return DecodeResult(buffer=state.buffer, trace=trace, metrics=metrics, cache_debug=cache_debug)
