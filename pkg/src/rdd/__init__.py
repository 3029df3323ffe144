"""Reversible block-diffusion decoding: engine, reference denoisers, harness."""

from .cache import CacheHandle, CacheStore, delete_range, disabled_handle, get_context
from .denoise import (
    BigramDenoiser,
    DenoiserContract,
    DenoiserOutput,
    Prediction,
    ScriptedDenoiser,
    Trap,
    TrapSpec,
    bigram_fit,
    committed_buffer,
    forward_corrupt,
    scripted_trap,
)
from .engine import (
    DecodeConfig,
    DecodeMetrics,
    DecodeResult,
    Method,
    budget_policy,
    decode,
    nfe_bound,
    step,
)
from .errors import (
    CacheMiss,
    InvariantViolation,
    RollbackAtOrigin,
    Runaway,
    ScenarioIOError,
    UsageError,
)
from .harness import (
    ReportRow,
    SuiteSettings,
    export_heatmap,
    run_one,
    run_suite,
    stagnation_rate,
)
from .remask import apply_remask, remask_probability, remask_stream
from .scenarios import (
    Scenario,
    build_denoiser,
    canonical_trap,
    load_scenario,
    make_bigram_scenario,
    make_trap_corpus,
    save_scenario,
)
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
    read_trace,
    write_trace,
)

__version__ = "0.1.0"
