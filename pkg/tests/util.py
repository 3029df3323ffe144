"""Shared test helpers."""

from __future__ import annotations

from rdd import DecodeConfig, Method, ScheduleConfig


def make_cfg(
    method: Method,
    total_len: int,
    f: float = 0.9,
    f_r: float | None = None,
    budget: int | None = None,
    lam: float = 1.0,
    seed: int = 0,
    block_len: int = 32,
    use_cache: bool = True,
    remask_mode: str = "confidence",
    step_cap: int | None = None,
) -> DecodeConfig:
    if budget is None:
        budget = 0 if method in (Method.BLOCK, Method.VANILLA) else 1
    if f_r is None or method in (Method.BLOCK, Method.RDD, Method.VANILLA):
        f_r = f
    return DecodeConfig(
        schedule=ScheduleConfig(f=f, f_r=f_r, lambda_=lam, rollback_budget=budget),
        block_len=block_len,
        total_len=total_len,
        method=method,
        seed=seed,
        use_cache=use_cache,
        remask_mode=remask_mode,
        step_cap=step_cap,
    )


def trace_dicts(result) -> list[dict]:
    """Trace as comparable dicts (traces carry no wall-time fields)."""
    return [ev.to_dict() for ev in result.trace]
