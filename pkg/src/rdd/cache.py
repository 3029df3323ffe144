"""Block-granular memo of denoiser context state with range deletion.

The store maps generated-block indices to opaque per-block payloads supplied
by the denoiser (a left-context summary for the bigram model, a fingerprint
for the scripted one). Block j spans [origin + j*block_len, origin +
(j+1)*block_len); origin is normally the prompt length. Entries must be
contiguous from block 0, which makes range invalidation exact and cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .errors import CacheMiss, InvariantViolation, UsageError
from .types import BlockWindow


@dataclass
class CacheStore:
    origin: int
    block_len: int
    entries: dict[int, Any] = field(default_factory=dict)
    generation: int = 0

    def block_of(self, position: int) -> int:
        if position < self.origin or (position - self.origin) % self.block_len != 0:
            raise UsageError(f"position {position} is not block-aligned (origin {self.origin})")
        return (position - self.origin) // self.block_len

    def span(self, block_index: int) -> tuple[int, int]:
        s = self.origin + block_index * self.block_len
        return s, s + self.block_len

    def put(self, block_index: int, payload: Any) -> None:
        if block_index > 0 and block_index - 1 not in self.entries:
            raise InvariantViolation(
                f"cache entries must be contiguous; block {block_index - 1} missing"
            )
        self.entries[block_index] = payload
        self.generation += 1

    def metadata(self) -> dict[str, Any]:
        return {"blocks": sorted(self.entries), "generation": self.generation}


@dataclass(frozen=True)
class CacheHandle:
    """Validated reference handed to the denoiser; store=None disables caching."""

    store: CacheStore | None
    generation: int = 0

    def check(self) -> None:
        if self.store is not None and self.generation != self.store.generation:
            raise UsageError(
                f"stale cache handle (generation {self.generation} != {self.store.generation})"
            )

    def refreshed(self) -> "CacheHandle":
        if self.store is None:
            return self
        return CacheHandle(store=self.store, generation=self.store.generation)


def disabled_handle() -> CacheHandle:
    return CacheHandle(store=None, generation=0)


def get_context(store: CacheStore, window: BlockWindow) -> tuple[tuple[int, Any], ...]:
    """Composed read-only context for the blocks left of the window.

    Returns ((block_index, payload), ...) ascending. Raises CacheMiss if any
    required block is absent; callers fall back to recomputing from the
    buffer and repairing the store.
    """
    if window.start < store.origin:
        raise UsageError(f"window start {window.start} precedes cache origin {store.origin}")
    if (window.start - store.origin) % store.block_len != 0:
        raise UsageError(f"window start {window.start} is not block-aligned")
    n = (window.start - store.origin) // store.block_len
    out = []
    for j in range(n):
        if j not in store.entries:
            raise CacheMiss(f"block {j} missing from cache")
        out.append((j, store.entries[j]))
    return tuple(out)


def delete_range(store: CacheStore, b_s: int, b_e: int) -> None:
    """Drop every entry whose block span intersects [b_s, b_e).

    Bounds must be block-aligned (b_e == buffer end is also accepted). The
    generation counter bumps even when nothing is removed, invalidating any
    outstanding handles.
    """
    if b_e < b_s:
        raise UsageError(f"empty-range bounds reversed: [{b_s}, {b_e})")
    for bound in (b_s, b_e):
        if (bound - store.origin) % store.block_len != 0:
            raise UsageError(f"bound {bound} is not block-aligned (origin {store.origin})")
    if b_e > b_s:
        first = (b_s - store.origin) // store.block_len
        last = (b_e - store.origin + store.block_len - 1) // store.block_len
        doomed = [j for j in store.entries if first <= j < last]
        # Later entries must not exist: the engine only rolls back the frontier.
        for j in store.entries:
            if j >= last:
                raise InvariantViolation(
                    f"cache entry {j} exists beyond the deleted range [{b_s}, {b_e})"
                )
        for j in doomed:
            del store.entries[j]
    store.generation += 1
