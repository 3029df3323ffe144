from __future__ import annotations

import pytest

from rdd import bigram_fit
from rdd.scenarios import canonical_trap, make_trap_corpus, markov_corpus


@pytest.fixture(scope="session")
def canonical():
    return canonical_trap()


@pytest.fixture(scope="session")
def affine_model():
    """Tame corpus: confident waves, stalls only near adventurous prompts."""
    corpus = markov_corpus(seed=1)
    return corpus, bigram_fit(corpus)


@pytest.fixture(scope="session")
def cycle_model():
    """Stall-heavy corpus: the fuzzy state recurs through the whole sequence."""
    corpus = markov_corpus(successor="cycle", fuzzy_states=(5,), seed=2)
    return corpus, bigram_fit(corpus)


@pytest.fixture(scope="session")
def small_trap_corpus():
    return make_trap_corpus(12, seed=5)
