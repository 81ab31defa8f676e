"""Tabular bigram policies: exact log-probabilities, gradients and sampling.

A policy is a ``(V+1) x (V+1)`` logit table. Rows are indexed by the previous
token (the ``V`` regular tokens followed by ``bos``), columns by the next token
(the ``V`` regular tokens followed by ``eos``). A response is scored from the
last prompt token onward, or from ``bos`` when the prompt is empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

TokenSeq = tuple[int, ...]


class InvalidTokenError(ValueError):
    """A token index outside the vocabulary, or a misplaced eos."""


@dataclass(frozen=True)
class Vocab:
    size: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"vocab size must be an integer >= 2, got {self.size!r}")

    @property
    def bos_id(self) -> int:
        return self.size

    @property
    def eos_id(self) -> int:
        return self.size + 1

    @property
    def n_rows(self) -> int:
        return self.size + 1

    @property
    def n_cols(self) -> int:
        return self.size + 1

    def row(self, token: int) -> int:
        """Row index of a context token (regular token or bos)."""
        return token  # bos_id == size == last row

    def col(self, token: int) -> int:
        """Column index of a generated token (regular token or eos)."""
        return self.size if token == self.eos_id else token


def validate_prompt(vocab: Vocab, prompt: Sequence[int]) -> None:
    for i, tok in enumerate(prompt):
        if not (0 <= tok < vocab.size):
            raise InvalidTokenError(f"prompt token at position {i} is {tok!r}; expected 0..{vocab.size - 1}")


def validate_response(vocab: Vocab, response: Sequence[int]) -> None:
    if len(response) == 0:
        raise InvalidTokenError("response is empty")
    last = len(response) - 1
    for i, tok in enumerate(response):
        if tok == vocab.eos_id:
            if i != last:
                raise InvalidTokenError(f"eos at position {i} is not the final token")
        elif not (0 <= tok < vocab.size):
            raise InvalidTokenError(
                f"response token at position {i} is {tok!r}; expected 0..{vocab.size - 1} or eos={vocab.eos_id}"
            )


def transitions(vocab: Vocab, prompt: Sequence[int], response: Sequence[int]) -> list[tuple[int, int]]:
    """(row, col) pairs visited while scoring ``response`` after ``prompt``."""
    validate_prompt(vocab, prompt)
    validate_response(vocab, response)
    ctx = prompt[-1] if len(prompt) else vocab.bos_id
    out = []
    for tok in response:
        out.append((vocab.row(ctx), vocab.col(tok)))
        ctx = tok
    return out


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    vocab: Vocab
    logits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.logits, dtype=np.float64, copy=True)
        shape = (self.vocab.n_rows, self.vocab.n_cols)
        if arr.shape != shape:
            raise ValueError(f"logits shape {arr.shape} does not match vocab (expected {shape})")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    @classmethod
    def uniform(cls, vocab: Vocab) -> "TabularPolicy":
        return cls(vocab, np.zeros((vocab.n_rows, vocab.n_cols)))

    @cached_property
    def log_probs(self) -> np.ndarray:
        """Row-wise log-softmax of the logit table."""
        out = _log_softmax_rows(self.logits)
        out.setflags(write=False)
        return out

    @cached_property
    def probs(self) -> np.ndarray:
        out = np.exp(self.log_probs)
        out.setflags(write=False)
        return out

    def with_logits(self, logits: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(self.vocab, logits)

    def same_as(self, other: "TabularPolicy") -> bool:
        return self.vocab == other.vocab and np.array_equal(self.logits, other.logits)


def check_same_vocab(*policies: TabularPolicy) -> None:
    first = policies[0].vocab
    for p in policies[1:]:
        if p.vocab != first:
            raise ValueError(f"vocab mismatch: {first.size} vs {p.vocab.size}")


def log_prob(policy: TabularPolicy, prompt: Sequence[int], response: Sequence[int]) -> float:
    """Sum of per-token conditional log-probabilities of ``response``."""
    lp = policy.log_probs
    return float(sum(lp[r, c] for r, c in transitions(policy.vocab, prompt, response)))


def log_prob_grad(policy: TabularPolicy, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
    """Exact gradient of :func:`log_prob` with respect to the logit table."""
    p = policy.probs
    grad = np.zeros_like(policy.logits)
    for r, c in transitions(policy.vocab, prompt, response):
        grad[r] -= p[r]
        grad[r, c] += 1.0
    return grad


# -- batched evaluation ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SeqBatch:
    """Flattened transitions of many (prompt, response) sequences.

    ``rows``/``cols`` hold one entry per scored token and ``seg`` the index of
    the sequence it belongs to, so per-sequence sums are a single bincount.
    """

    vocab: Vocab
    rows: np.ndarray
    cols: np.ndarray
    seg: np.ndarray
    lengths: np.ndarray

    @property
    def n(self) -> int:
        return len(self.lengths)

    @classmethod
    def encode(cls, vocab: Vocab, prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]) -> "SeqBatch":
        if len(prompts) != len(responses):
            raise ValueError("prompts and responses differ in length")
        rows: list[int] = []
        cols: list[int] = []
        seg: list[int] = []
        lengths = np.zeros(len(responses), dtype=np.int64)
        for i, (x, y) in enumerate(zip(prompts, responses)):
            tr = transitions(vocab, x, y)
            lengths[i] = len(tr)
            for r, c in tr:
                rows.append(r)
                cols.append(c)
                seg.append(i)
        return cls(
            vocab,
            np.asarray(rows, dtype=np.int64),
            np.asarray(cols, dtype=np.int64),
            np.asarray(seg, dtype=np.int64),
            lengths,
        )

    def log_probs(self, policy: TabularPolicy) -> np.ndarray:
        """Per-sequence log-probabilities under ``policy``."""
        token_lp = policy.log_probs[self.rows, self.cols]
        return np.bincount(self.seg, weights=token_lp, minlength=self.n)

    def grad(self, policy: TabularPolicy, weights: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_i weights[i] * log_prob_i`` with respect to logits."""
        w_tok = np.asarray(weights, dtype=np.float64)[self.seg]
        return self._accumulate(policy, w_tok)

    def count_grad(self, policy: TabularPolicy) -> np.ndarray:
        """Gradient of the unweighted sum of log-probabilities, from exact integer counts."""
        return self._accumulate(policy, None)

    def _accumulate(self, policy: TabularPolicy, w_tok: np.ndarray | None) -> np.ndarray:
        nr, nc = self.vocab.n_rows, self.vocab.n_cols
        flat = self.rows * nc + self.cols
        hits = np.bincount(flat, weights=w_tok, minlength=nr * nc).reshape(nr, nc)
        visits = np.bincount(self.rows, weights=w_tok, minlength=nr)
        return hits - visits[:, None] * policy.probs


# -- sampling ----------------------------------------------------------------


@dataclass(frozen=True)
class SampleControls:
    temperature: float = 0.7
    top_p: float = 0.95
    max_len: int = 6
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (0 < self.top_p <= 1):
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True, eq=False)
class NucleusTable:
    """Per-row truncated sampling distributions for fixed temperature/top_p."""

    orders: tuple[np.ndarray, ...]
    cdfs: tuple[np.ndarray, ...]


def nucleus_table(policy: TabularPolicy, temperature: float, top_p: float) -> NucleusTable:
    scaled = _log_softmax_rows(policy.logits / temperature)
    probs = np.exp(scaled)
    orders, cdfs = [], []
    for row in probs:
        order = np.argsort(-row, kind="stable")
        sorted_p = row[order]
        cum = np.cumsum(sorted_p)
        # inclusive prefix: first position where cumulative mass reaches top_p
        keep = min(int(np.searchsorted(cum, top_p, side="left")) + 1, len(row))
        kept = sorted_p[:keep]
        cdf = np.cumsum(kept / kept.sum())
        cdf[-1] = 1.0
        orders.append(order[:keep].copy())
        cdfs.append(cdf)
    return NucleusTable(tuple(orders), tuple(cdfs))


def _draw(vocab: Vocab, table: NucleusTable, prompt: Sequence[int], max_len: int, seed: int) -> TokenSeq:
    rng = np.random.default_rng(seed)
    ctx = prompt[-1] if len(prompt) else vocab.bos_id
    out: list[int] = []
    for _ in range(max_len):
        cdf = table.cdfs[ctx]
        idx = int(np.searchsorted(cdf, rng.random(), side="right"))
        col = int(table.orders[ctx][min(idx, len(cdf) - 1)])
        if col == vocab.size:
            out.append(vocab.eos_id)
            break
        out.append(col)
        ctx = col
    return tuple(out)


def sample(policy: TabularPolicy, prompt: Sequence[int], controls: SampleControls) -> TokenSeq:
    """Draw one response with temperature scaling and nucleus truncation.

    Generation stops after eos or ``max_len`` tokens. The output is a pure
    function of the arguments; randomness comes only from ``controls.seed``.
    """
    validate_prompt(policy.vocab, prompt)
    table = nucleus_table(policy, controls.temperature, controls.top_p)
    return _draw(policy.vocab, table, prompt, controls.max_len, controls.seed)


def sample_many(
    policy: TabularPolicy,
    prompts: Sequence[Sequence[int]],
    controls: SampleControls,
    seeds: Sequence[int],
) -> list[TokenSeq]:
    """``[sample(policy, x, controls with seed=s) for x, s in zip(prompts, seeds)]``, sharing one table."""
    table = nucleus_table(policy, controls.temperature, controls.top_p)
    out = []
    for x, s in zip(prompts, seeds):
        validate_prompt(policy.vocab, x)
        out.append(_draw(policy.vocab, table, x, controls.max_len, int(s)))
    return out


# -- supervised fitting ------------------------------------------------------


def fit_sft(
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    epochs: int,
    lr: float,
    vocab: Vocab,
) -> TabularPolicy:
    """Maximum-likelihood fit by full-batch gradient ascent from zero logits.

    Each epoch is one step on the mean response log-probability. The gradient
    is built from integer transition counts, so duplicating the corpus gives a
    bit-identical result.
    """
    if len(corpus) == 0:
        raise ValueError("SFT corpus is empty")
    if epochs < 0 or lr <= 0:
        raise ValueError("epochs must be >= 0 and lr > 0")
    batch = SeqBatch.encode(vocab, [x for x, _ in corpus], [y for _, y in corpus])
    n = float(len(corpus))
    policy = TabularPolicy.uniform(vocab)
    for _ in range(epochs):
        grad = batch.count_grad(policy) / n
        policy = policy.with_logits(policy.logits + lr * grad)
    return policy


def mean_log_prob(policy: TabularPolicy, corpus: Sequence[tuple[Sequence[int], Sequence[int]]]) -> float:
    batch = SeqBatch.encode(policy.vocab, [x for x, _ in corpus], [y for _, y in corpus])
    return float(batch.log_probs(policy).mean())


# -- serialization -----------------------------------------------------------


def save_policy(policy: TabularPolicy, path: str | Path) -> None:
    """Write vocab size then the logit table, row-major, one row per line.

    ``repr`` of a float is its shortest round-tripping decimal, so a re-read is
    bit-exact.
    """
    lines = [str(policy.vocab.size)]
    for row in policy.logits:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy(path: str | Path) -> TabularPolicy:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"policy file not found: {path}")
    lines = path.read_text().split("\n")
    vocab = Vocab(int(lines[0]))
    rows = [[float(v) for v in line.split()] for line in lines[1 : 1 + vocab.n_rows]]
    return TabularPolicy(vocab, np.array(rows, dtype=np.float64))
