import itertools

import numpy as np
import pytest

from sera.policy import TabularPolicy, Vocab


def random_policy(rng, vocab, scale=1.0):
    return TabularPolicy(vocab, scale * rng.standard_normal((vocab.n_rows, vocab.n_cols)))


def random_response(rng, vocab, max_len=6, min_len=1):
    """A valid response: regular tokens, optionally terminated by eos."""
    n = int(rng.integers(min_len, max_len + 1))
    toks = [int(t) for t in rng.integers(0, vocab.size, size=n)]
    if rng.random() < 0.5:
        toks[-1] = vocab.eos_id
    return tuple(toks)


def random_prompt(rng, vocab, max_len=3):
    n = int(rng.integers(0, max_len + 1))
    return tuple(int(t) for t in rng.integers(0, vocab.size, size=n))


def all_responses(vocab, length):
    """Every response with exactly ``length`` tokens (eos allowed only last)."""
    regular = range(vocab.size)
    out = [tuple(s) for s in itertools.product(regular, repeat=length)]
    if length >= 1:
        out += [tuple(s) + (vocab.eos_id,) for s in itertools.product(regular, repeat=length - 1)]
    return out


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def v4():
    return Vocab(4)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
