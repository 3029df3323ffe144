"""Scenario construction and serialization for decodes and suites.

A scenario bundles a prompt, the expected continuation, a seed and a model
description (either a scripted trap spec or a bigram corpus). Scenario files
are plain JSON, one scenario per file; see docs/scenarios.md.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .denoise import (
    BigramDenoiser,
    DenoiserContract,
    ScriptedDenoiser,
    Trap,
    TrapSpec,
    load_corpus,
)
from .errors import ScenarioIOError, UsageError
from .remask import remask_probability, remask_stream


@dataclass
class Scenario:
    name: str
    prompt: list[int]
    ground_truth: list[int]  # expected continuation, len == total_len - len(prompt)
    seed: int
    model: dict

    @property
    def total_len(self) -> int:
        return len(self.prompt) + len(self.ground_truth)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "prompt": list(self.prompt),
            "ground_truth": list(self.ground_truth),
            "model": self.model,
        }


def save_scenario(scenario: Scenario, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"{scenario.name}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario.to_dict(), fh, indent=1)
        fh.write("\n")
    return path


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return Scenario(
            name=d["name"],
            prompt=[int(t) for t in d["prompt"]],
            ground_truth=[int(t) for t in d["ground_truth"]],
            seed=int(d["seed"]),
            model=d["model"],
        )
    except OSError as exc:
        raise ScenarioIOError(path, str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioIOError(path, f"malformed scenario: {exc}") from exc


def check_geometry(scenario: Scenario, block_len: int) -> None:
    """Trap scenarios are scripted for one block grid; reject mismatches."""
    if scenario.model.get("kind") == "trap":
        spec_bl = scenario.model["spec"]["block_len"]
        if spec_bl != block_len:
            raise UsageError(
                f"scenario {scenario.name} is scripted for block length {spec_bl}, "
                f"not {block_len}"
            )


def build_denoiser(scenario: Scenario, base_dir: str | None = None) -> DenoiserContract:
    model = scenario.model
    kind = model.get("kind")
    if kind == "trap":
        return ScriptedDenoiser(TrapSpec.from_dict(model["spec"]))
    if kind == "bigram":
        corpus = model.get("corpus")
        if isinstance(corpus, str):
            path = corpus if os.path.isabs(corpus) or base_dir is None else os.path.join(base_dir, corpus)
            corpus = load_corpus(path)
        return BigramDenoiser(
            corpus,
            smoothing=model.get("smoothing", 0.1),
            vocab_size=model.get("vocab_size"),
        )
    raise UsageError(f"unknown scenario model kind {kind!r}")


# ---------------------------------------------------------------------------
# trap scenarios
# ---------------------------------------------------------------------------


def _pattern_truth(total_len: int, vocab_size: int) -> list[int]:
    # fixed arithmetic pattern; stable without any RNG
    return [(7 * i + 3) % vocab_size for i in range(total_len)]


def first_remask_hits(spec: TrapSpec, seed: int, lambda_: float) -> list[int]:
    """Positions the first rollback would re-mask, assuming it revives the
    trap's own block right after that block committed in full.

    Replays the session's dedicated re-mask stream without running a decode.
    """
    if len(spec.traps) != 1:
        raise UsageError("recovery-seed search expects a single-trap spec")
    trap = spec.traps[0]
    start = spec.block_end(trap.position) - spec.block_len
    confs = []
    for i in range(start, start + spec.block_len):
        confs.append(trap.confidence if i == trap.position else spec.c_high)
    u = remask_stream(seed).random(len(confs))
    return [start + k for k in range(len(confs)) if u[k] < remask_probability(confs[k], lambda_)]


def find_recovery_seed(spec: TrapSpec, lambda_: float = 1.0, limit: int = 10_000) -> int:
    """Smallest seed whose first re-mask draw flips the trap position and
    nothing else, making the repair trajectory fully deterministic."""
    want = [spec.traps[0].position]
    for seed in range(limit):
        if first_remask_hits(spec, seed, lambda_) == want:
            return seed
    raise UsageError(f"no recovery seed below {limit}")


def canonical_trap(
    block_len: int = 32,
    prompt_len: int = 32,
    gen_blocks: int = 7,
    vocab_size: int = 24,
    trap_block: int = 1,
    c_high: float = 0.98,
    c_trap: float = 0.62,
    c_low: float = 0.3,
) -> Scenario:
    """The single-trap reference scenario.

    The decoy sits mid-block in generated block ``trap_block``; with a zero
    budget the decode is forced through every later block, while one rollback
    plus a re-mask of the decoy restores the exact ground truth.
    """
    total = prompt_len + gen_blocks * block_len
    truth = _pattern_truth(total, vocab_size)
    pos = prompt_len + trap_block * block_len + block_len // 2
    spec = TrapSpec(
        vocab_size=vocab_size,
        block_len=block_len,
        prompt=tuple(truth[:prompt_len]),
        truth=tuple(truth),
        traps=(Trap(position=pos, decoy=(truth[pos] + 1) % vocab_size, confidence=c_trap),),
        c_high=c_high,
        c_low=c_low,
    )
    seed = find_recovery_seed(spec)
    return Scenario(
        name="trap1",
        prompt=list(spec.prompt),
        ground_truth=list(spec.truth[prompt_len:]),
        seed=seed,
        model={"kind": "trap", "spec": spec.to_dict()},
    )


def make_trap_corpus(
    count: int,
    seed: int = 0,
    block_len: int = 32,
    prompt_len: int = 32,
    gen_blocks: int = 7,
    vocab_size: int = 24,
    c_high: float = 0.98,
    c_trap: float = 0.62,
    c_low: float = 0.3,
) -> list[Scenario]:
    """Seeded family of single-trap scenarios with varied truths and trap
    placements. Trap blocks stay off the first and last generated block so a
    second rollback has room and a later block exists to stall."""
    if gen_blocks < 3:
        raise UsageError("trap corpus needs at least three generated blocks")
    out = []
    total = prompt_len + gen_blocks * block_len
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        truth = rng.integers(0, vocab_size, size=total).tolist()
        trap_block = int(rng.integers(1, gen_blocks - 1))
        pos = prompt_len + trap_block * block_len + int(rng.integers(0, block_len))
        decoy = (truth[pos] + 1 + int(rng.integers(0, vocab_size - 1))) % vocab_size
        if decoy == truth[pos]:
            decoy = (decoy + 1) % vocab_size
        spec = TrapSpec(
            vocab_size=vocab_size,
            block_len=block_len,
            prompt=tuple(truth[:prompt_len]),
            truth=tuple(truth),
            traps=(Trap(position=pos, decoy=decoy, confidence=c_trap),),
            c_high=c_high,
            c_low=c_low,
        )
        out.append(
            Scenario(
                name=f"trap{k:03d}",
                prompt=list(spec.prompt),
                ground_truth=list(spec.truth[prompt_len:]),
                seed=k,
                model={"kind": "trap", "spec": spec.to_dict()},
            )
        )
    return out


# ---------------------------------------------------------------------------
# bigram scenarios
# ---------------------------------------------------------------------------


def cycle_corpus(vocab_size: int = 6, length: int = 600) -> list[list[int]]:
    """Deterministic cyclic corpus: every context has a unique continuation."""
    return [[i % vocab_size for i in range(length)]]


def markov_corpus(
    vocab_size: int = 12,
    sequences: int = 40,
    length: int = 160,
    sharpness: float = 0.995,
    fuzzy_states: tuple[int, ...] = (1,),
    successor: str = "affine",
    seed: int = 0,
) -> list[list[int]]:
    """Corpus sampled from a seeded Markov chain.

    Ordinary states move to a fixed successor with probability ``sharpness``,
    giving confident multi-token commit waves; ``fuzzy_states`` jump uniformly,
    so positions conditioned on them stall below any practical threshold and
    exercise the stagnation paths. The ``affine`` successor map funnels into a
    short sharp basin (stalls cluster near the prompt); the ``cycle`` map
    revisits every state, so stalls and rollbacks recur through the whole
    generated region."""
    rng = np.random.default_rng(seed)
    fuzzy = set(fuzzy_states)
    if successor == "affine":
        step = lambda x: (x * 3 + 1) % vocab_size  # noqa: E731
    elif successor == "cycle":
        step = lambda x: (x + 1) % vocab_size  # noqa: E731
    else:
        raise UsageError(f"unknown successor map {successor!r}")
    out = []
    for _ in range(sequences):
        t = int(rng.integers(0, vocab_size))
        seq = [t]
        for _ in range(length - 1):
            if t in fuzzy or rng.random() >= sharpness:
                t = int(rng.integers(0, vocab_size))
            else:
                t = step(t)
            seq.append(t)
        out.append(seq)
    return out


def greedy_continuation(model: BigramDenoiser, prompt: Sequence[int], length: int) -> list[int]:
    """Left-to-right argmax walk of the fitted chain; the reference answer
    for corpora whose transitions are unambiguous."""
    out = []
    ctx = prompt[-1] if len(prompt) > 0 else None
    for _ in range(length):
        if ctx is None:
            row = model.unigram
        else:
            row = model.distribution(ctx, 1)
        tok = max(range(len(row)), key=lambda j: (row[j], -j))
        out.append(tok)
        ctx = tok
    return out


def make_bigram_scenario(
    corpus: list[list[int]],
    seed: int,
    prompt_len: int = 32,
    gen_len: int = 224,
    smoothing: float = 0.1,
    name: str | None = None,
    model: BigramDenoiser | None = None,
) -> Scenario:
    """Scenario over a shared corpus; the prompt is a seeded walk of the
    fitted chain and the reference continuation is the greedy walk. Pass a
    pre-fitted ``model`` to skip refitting when building many scenarios."""
    if model is None:
        model = BigramDenoiser(corpus, smoothing=smoothing)
    rng = np.random.default_rng([seed, 0xB16])
    v = model.vocab_size
    t = int(rng.integers(0, v))
    prompt = [t]
    for _ in range(prompt_len - 1):
        # mostly walk the chain, sometimes jump, so prompt tails land in
        # every part of the state space rather than only its sharp basin
        if rng.random() < 0.25:
            t = int(rng.integers(0, v))
        else:
            row = model.distribution(t, 1)
            t = int(rng.choice(v, p=np.asarray(row) / sum(row)))
        prompt.append(t)
    truth = greedy_continuation(model, prompt, gen_len)
    return Scenario(
        name=name or f"bigram{seed:04d}",
        prompt=prompt,
        ground_truth=truth,
        seed=seed,
        model={"kind": "bigram", "corpus": corpus, "smoothing": smoothing},
    )
