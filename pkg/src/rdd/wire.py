"""Client side of the external-model wire protocol.

Transport is newline-delimited JSON over the server process's standard
streams, one request and one response object per line, UTF-8. The engine
sends the buffer truncated at window.end (the server can therefore never
peek past the window), the masked positions to predict, and the opaque
cache id minted by the server. Invalidations forward the engine's rollback
range so the server can drop its own cached state for that span.

Schema (documented field by field in docs/wire-protocol.md):

  request: {"request_id": int, "kind": "evaluate" | "invalidate" | "stats",
            "tokens": [int], "mask_positions": [int],
            "window": {"start": int, "end": int}, "prompt_len": int,
            "cache_id": str | null, "invalidate_range": [int, int] | null}
  response: {"request_id": int, "predictions": [{"position": int,
             "token": int, "confidence": float, "top_k": [[int, float]] | null}],
             "cache_id": str | null, "stats": {...} | null}
  error:    {"request_id": int | null, "error": {"code": str, "message": str}}
"""

from __future__ import annotations

import json
import subprocess
from typing import Sequence

from .cache import CacheHandle
from .denoise import DenoiserContract, DenoiserOutput, Prediction
from .types import BlockWindow, TokenBuffer


class WireProtocolError(RuntimeError):
    pass


class WireDenoiser(DenoiserContract):
    """DenoiserContract implementation backed by a served model process."""

    def __init__(self, argv: Sequence[str], vocab_size: int, timeout: float = 30.0) -> None:
        super().__init__()
        self.vocab_size = vocab_size
        self.timeout = timeout
        self._proc = subprocess.Popen(
            list(argv),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self._next_request = 0
        self._cache_id: str | None = None

    def _roundtrip(self, payload: dict) -> dict:
        rid = self._next_request
        self._next_request += 1
        payload["request_id"] = rid
        if self._proc.poll() is not None:
            raise WireProtocolError("model server exited")
        self._proc.stdin.write(json.dumps(payload, separators=(",", ":")) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise WireProtocolError("model server closed its output stream")
        resp = json.loads(line)
        if resp.get("error") is not None:
            err = resp["error"]
            raise WireProtocolError(f"{err.get('code')}: {err.get('message')}")
        if resp.get("request_id") != rid:
            raise WireProtocolError(
                f"response id {resp.get('request_id')} does not match request {rid}"
            )
        return resp

    def evaluate(
        self, buffer: TokenBuffer, window: BlockWindow, handle: CacheHandle
    ) -> tuple[DenoiserOutput, CacheHandle]:
        window.validate_within(buffer)
        masked = buffer.masked_positions(window.start, window.end)
        resp = self._roundtrip(
            {
                "kind": "evaluate",
                "tokens": buffer.tokens[: window.end],
                "mask_positions": masked,
                "window": {"start": window.start, "end": window.end},
                "prompt_len": buffer.prompt_len,
                "cache_id": self._cache_id,
                "invalidate_range": None,
            }
        )
        self._cache_id = resp.get("cache_id")
        preds: dict[int, Prediction] = {}
        for p in resp["predictions"]:
            top = p.get("top_k")
            preds[p["position"]] = Prediction(
                token=p["token"],
                confidence=p["confidence"],
                top_k=tuple((t, q) for t, q in top) if top else None,
            )
        got = sorted(preds)
        if got != masked:
            raise WireProtocolError(f"server predicted {got}, engine asked for {masked}")
        return DenoiserOutput(predictions=preds, eval_id=self._next_eval_id()), handle

    def invalidate(self, handle: CacheHandle, span: tuple[int, int]) -> CacheHandle:
        resp = self._roundtrip(
            {
                "kind": "invalidate",
                "tokens": [],
                "mask_positions": [],
                "window": None,
                "prompt_len": 0,
                "cache_id": self._cache_id,
                "invalidate_range": [span[0], span[1]],
            }
        )
        self._cache_id = resp.get("cache_id")
        return super().invalidate(handle, span)

    def stats(self) -> dict:
        resp = self._roundtrip(
            {
                "kind": "stats",
                "tokens": [],
                "mask_positions": [],
                "window": None,
                "prompt_len": 0,
                "cache_id": self._cache_id,
                "invalidate_range": None,
            }
        )
        return resp.get("stats") or {}

    def send_raw_line(self, line: str) -> dict:
        """Send an arbitrary line (malformed-input testing)."""
        self._proc.stdin.write(line.rstrip("\n") + "\n")
        self._proc.stdin.flush()
        out = self._proc.stdout.readline()
        if not out:
            raise WireProtocolError("model server closed its output stream")
        return json.loads(out)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except Exception:
                self._proc.kill()

    def __enter__(self) -> "WireDenoiser":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
