"""Core vocabulary: token buffers, block windows, decoding state, trace events.

Positions are absolute indices into a fixed-length buffer. The prompt occupies
[0, prompt_len) and is never modified. Token ids are non-negative integers
below the vocabulary size; the value ``vocab_size`` itself is reserved as the
mask sentinel and is supplied per buffer (the denoiser owns the id space).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence

from .errors import RollbackAtOrigin, UsageError


class Mode(str, Enum):
    """Scheduling mode. RECOVERY is active between a rollback and the next
    completed block, and selects the conservative scaling factor."""

    NORMAL = "NORMAL"
    RECOVERY = "RECOVERY"


class EventKind(str, Enum):
    DECODE = "DECODE"
    STAGNATE = "STAGNATE"
    ROLLBACK = "ROLLBACK"
    REMASK = "REMASK"
    FORCE = "FORCE"
    BLOCK_DONE = "BLOCK_DONE"


@dataclass
class TokenBuffer:
    """Partially denoised sequence with per-position commit confidences.

    Invariants:
      * tokens[i] == mask_id marks an undecoded hole; holes never appear in
        the prompt region.
      * commit_confidence[i] is set exactly when position i is committed and
        lies outside the prompt; values are in (0, 1].
    """

    tokens: list[int]
    commit_confidence: list[float | None]
    prompt_len: int
    mask_id: int

    @classmethod
    def fresh(cls, prompt: Sequence[int], total_len: int, mask_id: int) -> "TokenBuffer":
        """All-mask buffer of length total_len with the prompt filled in."""
        prompt = list(prompt)
        if len(prompt) >= total_len:
            raise UsageError(f"prompt length {len(prompt)} must be < total length {total_len}")
        if any(t == mask_id for t in prompt):
            raise UsageError("prompt must not contain the mask sentinel")
        tokens = prompt + [mask_id] * (total_len - len(prompt))
        conf: list[float | None] = [None] * total_len
        return cls(tokens=tokens, commit_confidence=conf, prompt_len=len(prompt), mask_id=mask_id)

    def __len__(self) -> int:
        return len(self.tokens)

    def is_masked(self, i: int) -> bool:
        return self.tokens[i] == self.mask_id

    def commit(self, i: int, token: int, confidence: float) -> None:
        if i < self.prompt_len:
            raise UsageError(f"cannot commit inside the prompt (position {i})")
        if not self.is_masked(i):
            raise UsageError(f"position {i} is already committed")
        if not 0.0 < confidence <= 1.0:
            raise UsageError(f"commit confidence must be in (0, 1], got {confidence}")
        if token == self.mask_id:
            raise UsageError("cannot commit the mask sentinel")
        self.tokens[i] = token
        self.commit_confidence[i] = confidence

    def remask_position(self, i: int) -> None:
        if i < self.prompt_len:
            raise UsageError(f"cannot re-mask inside the prompt (position {i})")
        self.tokens[i] = self.mask_id
        self.commit_confidence[i] = None

    def masked_positions(self, start: int, end: int) -> list[int]:
        m = self.mask_id
        return [i for i in range(start, end) if self.tokens[i] == m]

    def continuation(self) -> list[int]:
        """Generated tokens after the prompt."""
        return self.tokens[self.prompt_len:]

    def clone(self) -> "TokenBuffer":
        return TokenBuffer(
            tokens=list(self.tokens),
            commit_confidence=list(self.commit_confidence),
            prompt_len=self.prompt_len,
            mask_id=self.mask_id,
        )


@dataclass(frozen=True)
class BlockWindow:
    """Contiguous decoding span. Length is always a positive multiple of
    block_len; it grows by one block per rollback merge."""

    start: int
    end: int
    block_len: int

    def __post_init__(self) -> None:
        if self.block_len <= 0:
            raise UsageError(f"block_len must be positive, got {self.block_len}")
        span = self.end - self.start
        if span <= 0 or span % self.block_len != 0:
            raise UsageError(
                f"window [{self.start}, {self.end}) must span a positive multiple of {self.block_len}"
            )

    def validate_within(self, buffer: TokenBuffer) -> None:
        if self.start < buffer.prompt_len or self.end > len(buffer):
            raise UsageError(
                f"window [{self.start}, {self.end}) out of bounds for "
                f"prompt_len={buffer.prompt_len}, total_len={len(buffer)}"
            )

    def advanced(self) -> "BlockWindow":
        """Next single-block window after this one completes."""
        return BlockWindow(start=self.end, end=self.end + self.block_len, block_len=self.block_len)


def count_masks(buffer: TokenBuffer, window: BlockWindow) -> int:
    """Number of mask holes inside the window."""
    window.validate_within(buffer)
    m = buffer.mask_id
    return sum(1 for i in range(window.start, window.end) if buffer.tokens[i] == m)


def merge_window(window: BlockWindow, prompt_len: int) -> BlockWindow:
    """Grow the window one block to the left (rollback merge).

    Raises RollbackAtOrigin when the merged start would enter the prompt;
    the engine must force-decode in that case.
    """
    new_start = window.start - window.block_len
    if new_start < prompt_len:
        raise RollbackAtOrigin(
            f"cannot merge below prompt boundary {prompt_len} (window start {window.start})"
        )
    return BlockWindow(start=new_start, end=window.end, block_len=window.block_len)


@dataclass
class TraceEvent:
    """One decoding action. Serializes to a single JSON line."""

    step: int
    kind: EventKind
    window: BlockWindow
    masked_count: int
    tau: float | None
    positions: list[int]
    confidences: list[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "kind": self.kind.value,
            "window": {"start": self.window.start, "end": self.window.end, "block_len": self.window.block_len},
            "masked_count": self.masked_count,
            "tau": self.tau,
            "positions": list(self.positions),
            "confidences": list(self.confidences),
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TraceEvent":
        w = d["window"]
        return cls(
            step=d["step"],
            kind=EventKind(d["kind"]),
            window=BlockWindow(start=w["start"], end=w["end"], block_len=w["block_len"]),
            masked_count=d["masked_count"],
            tau=d["tau"],
            positions=list(d["positions"]),
            confidences=list(d["confidences"]),
        )


def write_trace(events: Iterable[TraceEvent], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json_line())
            fh.write("\n")


def read_trace(path: str) -> list[TraceEvent]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TraceEvent.from_dict(json.loads(line)))
    return out


@dataclass
class DecodingState:
    """Mutable state of one decode session.

    ``frontier`` is the furthest position ever committed plus one; it never
    decreases, even across rollbacks, and scopes budget/mode resets.
    """

    buffer: TokenBuffer
    window: BlockWindow
    cache: Any
    budget: int
    mode: Mode
    frontier: int

    def note_commits(self, positions: Iterable[int]) -> None:
        top = max(positions, default=-1) + 1
        if top > self.frontier:
            self.frontier = top
