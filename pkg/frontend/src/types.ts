/**
 * Wire protocol types. One JSON object per line, UTF-8, over stdio.
 * Field names and framing are fixed; see docs/wire-protocol.md in the
 * repository root for the bit-exact schema.
 */

export interface WindowBounds {
  start: number;
  end: number;
}

export interface WireRequest {
  request_id: number;
  kind: 'evaluate' | 'invalidate' | 'stats';
  tokens: number[];
  mask_positions: number[];
  window: WindowBounds | null;
  prompt_len: number;
  cache_id: string | null;
  invalidate_range: [number, number] | null;
}

export interface WirePrediction {
  position: number;
  token: number;
  confidence: number;
  top_k: Array<[number, number]> | null;
}

export interface WireResponse {
  request_id: number;
  predictions: WirePrediction[];
  cache_id: string | null;
  stats: Record<string, number> | null;
}

export interface WireError {
  request_id: number | null;
  error: { code: string; message: string };
}

export interface Backend {
  /** Predict (token, confidence) for a masked position given the visible
   * tokens, the committed/masked split and the prefix summary. */
  predictWindow(
    tokens: number[],
    maskPositions: number[],
    window: WindowBounds,
    prefixToken: number | null,
  ): WirePrediction[];
}
