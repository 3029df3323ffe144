/** Stdio entry point: one JSON request per stdin line, one response per
 * stdout line. Exits on end of input. */

import { createInterface } from 'node:readline';
import { readFileSync } from 'node:fs';
import { BigramModel } from './bigram.js';
import { EchoModel } from './echo.js';
import { ModelServer } from './server.js';
import type { Backend } from './types.js';

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    if (a.startsWith('--')) {
      const key = a.slice(2);
      const val = i + 1 < argv.length && !argv[i + 1].startsWith('--') ? argv[++i] : '';
      out.set(key, val);
    }
  }
  return out;
}

function buildBackend(args: Map<string, string>): Backend {
  const kind = args.get('backend') ?? 'bigram';
  if (kind === 'bigram') {
    const corpusPath = args.get('corpus');
    if (!corpusPath) throw new Error('--corpus FILE is required for the bigram backend');
    const corpus = JSON.parse(readFileSync(corpusPath, 'utf-8')) as number[][];
    const smoothing = args.has('smoothing') ? Number(args.get('smoothing')) : 0.1;
    const vocab = args.has('vocab-size') ? Number(args.get('vocab-size')) : undefined;
    return new BigramModel(corpus, smoothing, vocab);
  }
  if (kind === 'echo') {
    const truthPath = args.get('truth');
    if (!truthPath) throw new Error('--truth FILE is required for the echo backend');
    const truth = JSON.parse(readFileSync(truthPath, 'utf-8')) as number[];
    return new EchoModel(truth);
  }
  throw new Error(`unknown backend ${kind}`);
}

async function run(): Promise<void> {
  const args = parseArgs(process.argv.slice(2));
  const server = new ModelServer(buildBackend(args));
  const rl = createInterface({ input: process.stdin, crlfDelay: Infinity });
  for await (const line of rl) {
    if (!line.trim()) continue;
    const resp = server.handleLine(line);
    process.stdout.write(JSON.stringify(resp) + '\n');
  }
}

run().catch((err) => {
  process.stderr.write(`fatal: ${err}\n`);
  process.exit(1);
});
