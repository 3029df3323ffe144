/** Echo backend: answers every masked position with a configured ground
 * truth at confidence 1.0. Used for wire round-trip testing. */

import type { Backend, WindowBounds, WirePrediction } from './types.js';

export class EchoModel implements Backend {
  constructor(private readonly truth: number[]) {
    if (truth.length === 0) throw new Error('echo truth must be non-empty');
  }

  predictWindow(
    _tokens: number[],
    maskPositions: number[],
    _window: WindowBounds,
    _prefixToken: number | null,
  ): WirePrediction[] {
    return maskPositions.map((i) => {
      if (i >= this.truth.length) throw new Error(`echo truth too short for position ${i}`);
      return { position: i, token: this.truth[i], confidence: 1.0, top_k: null };
    });
  }
}
