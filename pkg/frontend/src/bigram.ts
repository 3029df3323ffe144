/**
 * Additive-smoothed bigram model over integer tokens.
 *
 * A masked position at distance d from its nearest committed left neighbour
 * with token c receives the d-step transition row (P^d)[c]; with no
 * committed neighbour at all, the unigram distribution.
 *
 * Arithmetic discipline: every float operation here (probability
 * normalisation, matrix powers, argmax scans) runs in the exact same order
 * as the engine's in-process implementation of the same model, so both
 * sides produce bit-identical IEEE doubles.
 */

import type { Backend, WindowBounds, WirePrediction } from './types.js';

function matmul(a: number[][], b: number[][], n: number): number[][] {
  // sequential i,k,j accumulation; mirrored by the engine
  const out: number[][] = [];
  for (let i = 0; i < n; i++) out.push(new Array<number>(n).fill(0));
  for (let i = 0; i < n; i++) {
    const ai = a[i];
    const oi = out[i];
    for (let k = 0; k < n; k++) {
      const aik = ai[k];
      const bk = b[k];
      for (let j = 0; j < n; j++) {
        oi[j] += aik * bk[j];
      }
    }
  }
  return out;
}

function rowArgmax(row: number[]): [number, number] {
  // first maximum wins: lowest token id on ties
  let best = row[0];
  let tok = 0;
  for (let j = 1; j < row.length; j++) {
    if (row[j] > best) {
      best = row[j];
      tok = j;
    }
  }
  return [tok, best];
}

export class BigramModel implements Backend {
  readonly vocabSize: number;
  readonly smoothing: number;
  readonly unigram: number[];
  private readonly uniAmax: [number, number];
  private powers: Array<number[][] | null>;
  private amax: Array<Array<[number, number]> | null>;

  constructor(corpus: number[][], smoothing = 0.1, vocabSize?: number) {
    if (corpus.length === 0 || corpus.every((s) => s.length === 0)) {
      throw new Error('bigram corpus must be non-empty');
    }
    let seen = 0;
    for (const seq of corpus) for (const t of seq) if (t > seen) seen = t;
    const v = vocabSize ?? seen + 1;
    if (seen >= v) throw new Error(`corpus token ${seen} exceeds vocab size ${v}`);
    this.vocabSize = v;
    this.smoothing = smoothing;

    const big: number[][] = [];
    for (let a = 0; a < v; a++) big.push(new Array<number>(v).fill(0));
    const uni = new Array<number>(v).fill(0);
    for (const seq of corpus) {
      for (const t of seq) uni[t] += 1;
      for (let k = 0; k + 1 < seq.length; k++) big[seq[k]][seq[k + 1]] += 1;
    }

    const s = smoothing;
    const p: number[][] = [];
    for (let a = 0; a < v; a++) {
      let rowTotal = 0;
      for (let b = 0; b < v; b++) rowTotal += big[a][b];
      const row = new Array<number>(v);
      for (let b = 0; b < v; b++) row[b] = (big[a][b] + s) / (rowTotal + s * v);
      p.push(row);
    }
    let total = 0;
    for (let b = 0; b < v; b++) total += uni[b];
    this.unigram = [];
    for (let b = 0; b < v; b++) this.unigram.push((uni[b] + s) / (total + s * v));
    this.uniAmax = rowArgmax(this.unigram);

    this.powers = [null, p];
    this.amax = [null, p.map(rowArgmax)];
  }

  ensureDistance(d: number): void {
    if (d < 1) throw new Error(`distance must be >= 1, got ${d}`);
    const base = this.powers[1]!;
    while (this.powers.length <= d) {
      const nxt = matmul(this.powers[this.powers.length - 1]!, base, this.vocabSize);
      this.powers.push(nxt);
      this.amax.push(nxt.map(rowArgmax));
    }
  }

  distribution(ctx: number | null, distance = 1): number[] {
    if (ctx === null) return [...this.unigram];
    this.ensureDistance(distance);
    return [...this.powers[distance]![ctx]];
  }

  predictWindow(
    tokens: number[],
    maskPositions: number[],
    window: WindowBounds,
    prefixToken: number | null,
  ): WirePrediction[] {
    const maskSet = new Set(maskPositions);
    let lastTok: number | null = prefixToken;
    let lastIdx = prefixToken === null ? -1 : window.start - 1;
    const out: WirePrediction[] = [];
    for (let i = window.start; i < window.end; i++) {
      if (!maskSet.has(i)) {
        lastTok = tokens[i];
        lastIdx = i;
        continue;
      }
      let tok: number;
      let p: number;
      if (lastTok === null) {
        [tok, p] = this.uniAmax;
      } else {
        const d = i - lastIdx;
        this.ensureDistance(d);
        [tok, p] = this.amax[d]![lastTok];
      }
      out.push({ position: i, token: tok, confidence: p, top_k: null });
    }
    return out;
  }
}
