/**
 * Request handling for the stdio model server.
 *
 * The server keeps a prefix-summary cache per opaque cache id: for each
 * evaluated window it remembers the committed token just left of the window
 * start. Answering from that memo counts as a cache hit; deriving it from
 * the raw tokens counts as a recompute. Invalidations drop every summary
 * that covers any position in the invalidated span and mint a fresh id, so
 * the next evaluation must recompute. One request is answered per line, in
 * order; malformed input produces an error response and the server keeps
 * serving.
 */

import type { Backend, WireError, WireRequest, WireResponse } from './types.js';

interface CacheState {
  /** prefix summaries keyed by the window start they cover */
  summaries: Map<number, number>;
}

export class ModelServer {
  private caches = new Map<string, CacheState>();
  private nextCache = 0;
  readonly counters = { evaluations: 0, prefix_recomputes: 0, cache_hits: 0, invalidations: 0, errors: 0 };

  constructor(private readonly backend: Backend) {}

  private mintId(state: CacheState): string {
    const id = `c${this.nextCache++}`;
    this.caches.set(id, state);
    return id;
  }

  handleLine(line: string): WireResponse | WireError {
    let req: WireRequest;
    try {
      req = JSON.parse(line) as WireRequest;
    } catch (err) {
      this.counters.errors += 1;
      return { request_id: null, error: { code: 'parse_error', message: String(err) } };
    }
    try {
      return this.dispatch(req);
    } catch (err) {
      this.counters.errors += 1;
      return {
        request_id: typeof req.request_id === 'number' ? req.request_id : null,
        error: { code: 'bad_request', message: err instanceof Error ? err.message : String(err) },
      };
    }
  }

  private dispatch(req: WireRequest): WireResponse {
    if (typeof req.request_id !== 'number') throw new Error('request_id must be a number');
    switch (req.kind) {
      case 'evaluate':
        return this.evaluate(req);
      case 'invalidate':
        return this.invalidate(req);
      case 'stats':
        return {
          request_id: req.request_id,
          predictions: [],
          cache_id: req.cache_id ?? null,
          stats: { ...this.counters },
        };
      default:
        throw new Error(`unknown request kind ${String((req as { kind?: unknown }).kind)}`);
    }
  }

  private evaluate(req: WireRequest): WireResponse {
    const w = req.window;
    if (!w || !Array.isArray(req.tokens) || !Array.isArray(req.mask_positions)) {
      throw new Error('evaluate needs window, tokens and mask_positions');
    }
    if (req.tokens.length < w.end) {
      throw new Error(`tokens array shorter than window end ${w.end}`);
    }
    this.counters.evaluations += 1;

    const state: CacheState = req.cache_id
      ? this.caches.get(req.cache_id) ?? { summaries: new Map() }
      : { summaries: new Map() };

    let prefixToken: number | null = null;
    if (w.start > 0) {
      const memo = state.summaries.get(w.start);
      if (memo !== undefined) {
        this.counters.cache_hits += 1;
        prefixToken = memo;
      } else {
        prefixToken = req.tokens[w.start - 1];
        this.counters.prefix_recomputes += 1;
        state.summaries.set(w.start, prefixToken);
      }
    }

    const predictions = this.backend.predictWindow(req.tokens, req.mask_positions, w, prefixToken);
    return {
      request_id: req.request_id,
      predictions,
      cache_id: this.mintId(state),
      stats: null,
    };
  }

  private invalidate(req: WireRequest): WireResponse {
    const range = req.invalidate_range;
    if (!range || range.length !== 2) throw new Error('invalidate needs invalidate_range');
    const [a, b] = range;
    if (b < a) throw new Error(`invalidate range reversed: [${a}, ${b})`);
    this.counters.invalidations += 1;
    const state: CacheState = req.cache_id
      ? this.caches.get(req.cache_id) ?? { summaries: new Map() }
      : { summaries: new Map() };
    const kept = new Map<number, number>();
    for (const [prefixEnd, tok] of state.summaries) {
      // a summary keyed by prefixEnd covers positions < prefixEnd
      if (prefixEnd <= a) kept.set(prefixEnd, tok);
    }
    return {
      request_id: req.request_id,
      predictions: [],
      cache_id: this.mintId({ summaries: kept }),
      stats: null,
    };
  }
}
