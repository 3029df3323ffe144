"""Model-evaluation contract plus two in-process reference denoisers.

A denoiser answers: for every masked position in the queried window, which
token would fill it and with what confidence (the max of the predicted
distribution). Both reference models condition on the committed prefix plus
the committed part of the window only, never on positions at or beyond
window.end; that keeps the cache-equivalence oracle exact.

The bigram model predicts through powers of its smoothed transition matrix:
a hole at distance d from the nearest committed token on the left receives
the d-step distribution conditioned on that token. All matrix arithmetic is
plain sequential float math (no BLAS) so that independent implementations of
the same model reproduce results bit-exactly.

The scripted model realizes a decoy trap: inside the trap's own block it
predicts a plausible-but-wrong token at the trap position, and once that
decoy is committed it caps the confidence of every later masked position,
stalling the decode until the decoy is removed. With a widened (merged)
window the ambiguity resolves and the model predicts the true token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache import CacheHandle, delete_range, get_context
from .errors import CacheMiss, ScenarioIOError, UsageError
from .types import BlockWindow, TokenBuffer

_TOPK_EPS = 1e-9


@dataclass(frozen=True)
class Prediction:
    token: int
    confidence: float
    top_k: tuple[tuple[int, float], ...] | None = None


@dataclass(frozen=True)
class DenoiserOutput:
    """Predictions for exactly the masked positions of the queried window."""

    predictions: dict[int, Prediction]
    eval_id: int

    def check_covers(self, positions: Sequence[int]) -> None:
        if set(self.predictions) != set(positions):
            raise UsageError("denoiser output does not cover the queried masked set")


class DenoiserContract:
    """Base class for model evaluations usable by the decode engine."""

    vocab_size: int

    def __init__(self) -> None:
        self._eval_count = 0

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def eval_count(self) -> int:
        return self._eval_count

    def evaluate(
        self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle
    ) -> tuple[DenoiserOutput, CacheHandle]:
        raise NotImplementedError

    def invalidate(self, handle: CacheHandle, span: tuple[int, int]) -> CacheHandle:
        """Drop cached context intersecting [span[0], span[1])."""
        if handle.store is None:
            return handle
        handle.check()
        delete_range(handle.store, span[0], span[1])
        return handle.refreshed()

    def close(self) -> None:
        pass

    # shared plumbing

    def _next_eval_id(self) -> int:
        self._eval_count += 1
        return self._eval_count

    def _warm_prefix(self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle) -> CacheHandle:
        """Ensure every committed block left of the window is cached."""
        store = handle.store
        if store is None:
            return handle
        handle.check()
        n = (window.start - store.origin) // store.block_len
        changed = False
        for j in range(n):
            if j not in store.entries:
                s, e = store.span(j)
                store.put(j, self._block_payload(buffer, s, e))
                changed = True
        return handle.refreshed() if changed else handle

    def _block_payload(self, buffer: TokenBuffer, start: int, end: int):
        raise NotImplementedError


def forward_corrupt(clean: TokenBuffer, alpha_bar: float, rng_seed: int) -> TokenBuffer:
    """Independently mask each non-prompt position with probability 1 - alpha_bar."""
    if not 0.0 <= alpha_bar <= 1.0:
        raise UsageError(f"alpha_bar must be in [0, 1], got {alpha_bar}")
    if any(clean.is_masked(i) for i in range(len(clean))):
        raise UsageError("forward corruption expects a fully committed buffer")
    out = clean.clone()
    n = len(clean) - clean.prompt_len
    if n == 0:
        return out
    u = np.random.default_rng(rng_seed).random(n)
    for k in range(n):
        if u[k] < 1.0 - alpha_bar:
            out.remask_position(clean.prompt_len + k)
    return out


def committed_buffer(tokens: Sequence[int], prompt_len: int, mask_id: int) -> TokenBuffer:
    """Fully committed buffer (confidence 1.0 outside the prompt)."""
    tokens = list(tokens)
    conf: list[float | None] = [None] * prompt_len + [1.0] * (len(tokens) - prompt_len)
    if any(t == mask_id for t in tokens):
        raise UsageError("committed buffer must not contain the mask sentinel")
    return TokenBuffer(tokens=tokens, commit_confidence=conf, prompt_len=prompt_len, mask_id=mask_id)


# ---------------------------------------------------------------------------
# bigram reference model
# ---------------------------------------------------------------------------


def _matmul(a: list[list[float]], b: list[list[float]], n: int) -> list[list[float]]:
    # Sequential i,k,j accumulation; the wire backend mirrors this order.
    out = [[0.0] * n for _ in range(n)]
    for i in range(n):
        ai = a[i]
        oi = out[i]
        for k in range(n):
            aik = ai[k]
            bk = b[k]
            for j in range(n):
                oi[j] += aik * bk[j]
    return out


def _row_argmax(row: Sequence[float]) -> tuple[int, float]:
    # First maximum wins: lowest token id on ties.
    best = row[0]
    tok = 0
    for j in range(1, len(row)):
        if row[j] > best:
            best = row[j]
            tok = j
    return tok, best


def _row_topk(row: Sequence[float], k: int) -> tuple[tuple[int, float], ...]:
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return tuple((j, row[j]) for j in order[:k])


class BigramDenoiser(DenoiserContract):
    """Additive-smoothed bigram model over an integer token space.

    Vocabulary is inferred from the corpus unless given. A masked position at
    distance d from its nearest committed left neighbour with token c gets
    the distribution row (P^d)[c]; with no committed neighbour at all the
    unigram distribution is used.
    """

    def __init__(
        self,
        corpus: Sequence[Sequence[int]],
        smoothing: float = 0.1,
        vocab_size: int | None = None,
        top_k: int = 0,
    ) -> None:
        super().__init__()
        if not corpus or all(len(seq) == 0 for seq in corpus):
            raise UsageError("bigram corpus must be non-empty")
        if smoothing <= 0:
            raise UsageError(f"smoothing must be positive, got {smoothing}")
        seen = max(max(seq) for seq in corpus if len(seq) > 0)
        v = vocab_size if vocab_size is not None else seen + 1
        if seen >= v:
            raise UsageError(f"corpus token {seen} exceeds vocab size {v}")
        self.vocab_size = v
        self.smoothing = smoothing
        self.top_k = top_k

        big = [[0] * v for _ in range(v)]
        uni = [0] * v
        for seq in corpus:
            for t in seq:
                uni[t] += 1
            for a, b in zip(seq, seq[1:]):
                big[a][b] += 1

        s = smoothing
        p = [[0.0] * v for _ in range(v)]
        for a in range(v):
            row_total = 0
            for b in range(v):
                row_total += big[a][b]
            for b in range(v):
                p[a][b] = (big[a][b] + s) / (row_total + s * v)
        total = 0
        for b in range(v):
            total += uni[b]
        self.unigram = [(uni[b] + s) / (total + s * v) for b in range(v)]
        self._uni_amax = _row_argmax(self.unigram)
        self._uni_topk = _row_topk(self.unigram, top_k) if top_k > 0 else None

        self._powers: list[list[list[float]] | None] = [None, p]
        self._amax: list[list[tuple[int, float]] | None] = [None, [_row_argmax(r) for r in p]]
        self._topk: list[list[tuple[tuple[int, float], ...]] | None] = [
            None,
            [_row_topk(r, top_k) for r in p] if top_k > 0 else None,
        ]

    def distribution(self, ctx: int | None, distance: int = 1) -> list[float]:
        """Full predicted distribution; exposed for tests and the harness."""
        if ctx is None:
            return list(self.unigram)
        self._ensure_distance(distance)
        return list(self._powers[distance][ctx])

    def _ensure_distance(self, d: int) -> None:
        if d < 1:
            raise UsageError(f"distance must be >= 1, got {d}")
        base = self._powers[1]
        while len(self._powers) <= d:
            nxt = _matmul(self._powers[-1], base, self.vocab_size)
            self._powers.append(nxt)
            self._amax.append([_row_argmax(r) for r in nxt])
            self._topk.append([_row_topk(r, self.top_k) for r in nxt] if self.top_k > 0 else None)

    def _block_payload(self, buffer: TokenBuffer, start: int, end: int):
        return buffer.tokens[end - 1]

    def _prefix_token(self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle) -> int | None:
        if window.start == 0:
            return None
        store = handle.store
        if store is None:
            return buffer.tokens[window.start - 1]
        try:
            ctx = get_context(store, window)
        except CacheMiss:
            # hole in the store: repair from the buffer and retry
            self._warm_prefix(buffer, window, handle.refreshed())
            ctx = get_context(store, window)
        if ctx:
            return ctx[-1][1]
        return buffer.tokens[window.start - 1]

    def evaluate(
        self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle
    ) -> tuple[DenoiserOutput, CacheHandle]:
        window.validate_within(buffer)
        handle = self._warm_prefix(buffer, window, handle)
        last_tok = self._prefix_token(buffer, window, handle)
        last_idx = window.start - 1 if last_tok is not None else None

        preds: dict[int, Prediction] = {}
        for i in range(window.start, window.end):
            t = buffer.tokens[i]
            if t != buffer.mask_id:
                last_tok, last_idx = t, i
                continue
            if last_idx is None:
                tok, p = self._uni_amax
                tk = self._uni_topk
            else:
                d = i - last_idx
                self._ensure_distance(d)
                tok, p = self._amax[d][last_tok]
                tk = self._topk[d][last_tok] if self.top_k > 0 else None
            preds[i] = Prediction(token=tok, confidence=p, top_k=tk)
        return DenoiserOutput(predictions=preds, eval_id=self._next_eval_id()), handle


def bigram_fit(
    corpus: Sequence[Sequence[int]],
    smoothing: float = 0.1,
    vocab_size: int | None = None,
    top_k: int = 0,
) -> BigramDenoiser:
    return BigramDenoiser(corpus, smoothing=smoothing, vocab_size=vocab_size, top_k=top_k)


# ---------------------------------------------------------------------------
# scripted trap model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trap:
    position: int
    decoy: int
    confidence: float


@dataclass(frozen=True)
class TrapSpec:
    """Deterministic scenario: a ground-truth sequence with decoy traps.

    truth covers the whole buffer including the prompt. Each trap names a
    position whose first-pass prediction is the decoy token at the stated
    confidence; once a decoy is committed, every masked position to its right
    is capped at c_low until the decoy disappears.
    """

    vocab_size: int
    block_len: int
    prompt: tuple[int, ...]
    truth: tuple[int, ...]
    traps: tuple[Trap, ...]
    c_high: float = 0.98
    c_low: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 < self.c_high <= 1.0 or not 0.0 < self.c_low <= 1.0:
            raise UsageError("confidences must be in (0, 1]")
        if self.c_low >= self.c_high:
            raise UsageError(f"c_low ({self.c_low}) must be below c_high ({self.c_high})")
        if list(self.truth[: len(self.prompt)]) != list(self.prompt):
            raise UsageError("truth must start with the prompt")
        if any(t >= self.vocab_size for t in self.truth):
            raise UsageError("truth token outside the vocabulary")
        seen = set()
        for tr in self.traps:
            if not len(self.prompt) <= tr.position < len(self.truth):
                raise UsageError(f"trap position {tr.position} outside the generated region")
            if tr.position in seen:
                raise UsageError(f"duplicate trap position {tr.position}")
            seen.add(tr.position)
            if tr.decoy == self.truth[tr.position]:
                raise UsageError(f"decoy at {tr.position} equals the true token")
            if tr.decoy >= self.vocab_size:
                raise UsageError("decoy token outside the vocabulary")
            if not self.c_low < tr.confidence < self.c_high:
                raise UsageError(
                    f"trap confidence {tr.confidence} must lie in (c_low, c_high)"
                )

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def total_len(self) -> int:
        return len(self.truth)

    def block_end(self, position: int) -> int:
        off = position - self.prompt_len
        return self.prompt_len + (off // self.block_len + 1) * self.block_len

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "block_len": self.block_len,
            "prompt": list(self.prompt),
            "truth": list(self.truth),
            "traps": [
                {"position": t.position, "decoy": t.decoy, "confidence": t.confidence}
                for t in self.traps
            ],
            "c_high": self.c_high,
            "c_low": self.c_low,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrapSpec":
        return cls(
            vocab_size=d["vocab_size"],
            block_len=d["block_len"],
            prompt=tuple(d["prompt"]),
            truth=tuple(d["truth"]),
            traps=tuple(
                Trap(position=t["position"], decoy=t["decoy"], confidence=t["confidence"])
                for t in d["traps"]
            ),
            c_high=d.get("c_high", 0.98),
            c_low=d.get("c_low", 0.3),
        )


class ScriptedDenoiser(DenoiserContract):
    """Deterministic denoiser driven by a TrapSpec.

    Prediction rules for a masked position i, checked in order:
      1. some committed decoy sits at a trap position left of i
         -> (truth[i], c_low)
      2. i is a trap position and the window does not extend beyond the
         trap's own block -> (decoy, trap confidence)
      3. otherwise -> (truth[i], c_high)
    """

    def __init__(self, spec: TrapSpec) -> None:
        super().__init__()
        self.spec = spec
        self.vocab_size = spec.vocab_size
        self._trap_at = {t.position: t for t in spec.traps}

    def _block_payload(self, buffer: TokenBuffer, start: int, end: int):
        # fingerprint: trap positions in this block currently holding their decoy
        return tuple(
            p
            for p in sorted(self._trap_at)
            if start <= p < end and buffer.tokens[p] == self._trap_at[p].decoy
        )

    def _prefix_decoys(self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle) -> bool:
        if handle.store is None:
            return any(
                buffer.tokens[p] == t.decoy
                for p, t in self._trap_at.items()
                if p < window.start
            )
        try:
            ctx = get_context(handle.store, window)
        except CacheMiss:
            self._warm_prefix(buffer, window, handle.refreshed())
            ctx = get_context(handle.store, window)
        return any(len(payload) > 0 for _, payload in ctx)

    def evaluate(
        self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle
    ) -> tuple[DenoiserOutput, CacheHandle]:
        window.validate_within(buffer)
        spec = self.spec
        handle = self._warm_prefix(buffer, window, handle)
        capped = self._prefix_decoys(buffer, window, handle)

        preds: dict[int, Prediction] = {}
        for i in range(window.start, window.end):
            t = buffer.tokens[i]
            if t != buffer.mask_id:
                trap = self._trap_at.get(i)
                if trap is not None and t == trap.decoy:
                    capped = True
                continue
            if capped:
                preds[i] = Prediction(token=spec.truth[i], confidence=spec.c_low)
                continue
            trap = self._trap_at.get(i)
            if trap is not None and window.end <= spec.block_end(i):
                preds[i] = Prediction(token=trap.decoy, confidence=trap.confidence)
            else:
                preds[i] = Prediction(token=spec.truth[i], confidence=spec.c_high)
        return DenoiserOutput(predictions=preds, eval_id=self._next_eval_id()), handle


def scripted_trap(spec: TrapSpec, rng_seed: int | None = None) -> ScriptedDenoiser:
    """Build the scripted denoiser; rng_seed is accepted for interface
    symmetry and reserved for randomized spec completion."""
    del rng_seed
    return ScriptedDenoiser(spec)


# ---------------------------------------------------------------------------
# file loaders (schemas documented in docs/scenarios.md)
# ---------------------------------------------------------------------------


def load_trap_spec(path: str) -> TrapSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return TrapSpec.from_dict(json.load(fh))
    except OSError as exc:
        raise ScenarioIOError(path, str(exc)) from exc
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ScenarioIOError(path, f"malformed trap spec: {exc}") from exc


def load_corpus(path: str) -> list[list[int]]:
    """Corpus file: JSON list of token lists, or plain text with one
    whitespace-separated sequence per line."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioIOError(path, str(exc)) from exc
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            data = json.loads(text)
            return [[int(t) for t in seq] for seq in data]
        except (ValueError, TypeError) as exc:
            raise ScenarioIOError(path, f"malformed JSON corpus: {exc}") from exc
    out = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append([int(t) for t in line.split()])
        except ValueError as exc:
            raise ScenarioIOError(path, f"line {ln}: {exc}") from exc
    if not out:
        raise ScenarioIOError(path, "corpus file contains no sequences")
    return out
