import numpy as np
import pytest

from doge.policy import PolicyParams, Vocabulary
from doge.tasks import TaskInstance, gen_family_lookup, synth_knowledge

BIG = 100.0


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def small_vocab():
    return Vocabulary.with_payload(["x"])


def distinct_bucket_tasks(vocab, n, seed=0, space=None, generator=gen_family_lookup):
    """``n`` tasks whose prompts fall in distinct context buckets."""
    space = space or PolicyParams.zeros(vocab).space
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    for rec in synth_knowledge(20 * n, rng):
        t = generator(vocab, rec, rng)
        b = space.ctx_feature(t.prompt)
        if b not in seen:
            seen.add(b)
            out.append(t)
        if len(out) == n:
            return out
    raise RuntimeError("not enough distinct buckets")


def oracle_policy(vocab, tasks: list[TaskInstance], wrong: bool = False) -> PolicyParams:
    """Near-deterministic policy emitting ``<think> </think> <ans> gold </ans> <eos>``.

    With ``wrong=True`` it answers (gold + 1) mod 10 instead, still well formed.
    """
    params = PolicyParams.zeros(vocab)
    w, sp = params.weights, params.space
    for prev, nxt in [(None, vocab.think_open), (vocab.think_open, vocab.think_close),
                      (vocab.think_close, vocab.ans_open), (vocab.ans_close, vocab.eos)]:
        w[sp.prev_feature(prev), nxt] += 2 * BIG
    digits = [vocab.id(str(d)) for d in range(10)]
    for d in digits:
        w[sp.prev_feature(vocab.ans_open), d] += 2 * BIG
        w[sp.prev_feature(d), vocab.ans_close] += 2 * BIG
    for t in tasks:
        g = t.gold[0]
        if wrong:
            g = vocab.id(str((int(vocab.symbols[g]) + 1) % 10))
        w[sp.ctx_feature(t.prompt), g] += BIG
    return params


# One line per acceptance criterion, repeated in the terminal summary so the
# verdicts are visible even when pytest captures test output.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
