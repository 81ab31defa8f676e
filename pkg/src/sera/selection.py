"""Iteration-ensembled implicit rewards and top-k selection of offline pairs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .losses import LossKind, PreferencePair, Variant
from .policy import SeqBatch, TabularPolicy, check_same_vocab, log_prob


@dataclass(frozen=True, eq=False)
class PolicyHistory:
    """Snapshots ``[pi_0, pi_1, ...]``; index 0 is the SFT policy."""

    snapshots: tuple[TabularPolicy, ...]

    def __post_init__(self):
        snaps = tuple(self.snapshots)
        if not snaps:
            raise ValueError("a policy history needs at least one snapshot")
        check_same_vocab(*snaps)
        object.__setattr__(self, "snapshots", snaps)

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, i: int) -> TabularPolicy:
        return self.snapshots[i]

    @property
    def vocab(self):
        return self.snapshots[0].vocab

    @property
    def latest(self) -> TabularPolicy:
        return self.snapshots[-1]

    def extended(self, policy: TabularPolicy) -> "PolicyHistory":
        return PolicyHistory(self.snapshots + (policy,))


@dataclass(frozen=True)
class MarginRecord:
    pair_id: int
    margin: float
    reward_chosen: float
    reward_rejected: float


def _check_t(history: PolicyHistory, t: int) -> None:
    if t < 2:
        raise ValueError(f"ensemble rewards start at iteration 2, got t={t}")
    if len(history) < t:
        raise ValueError(f"iteration {t} needs snapshots 0..{t - 1}, history has {len(history)}")


def _weights(t: int, gamma: float) -> list[tuple[float, int]]:
    """(coefficient, snapshot index) of each log-ratio term at iteration t."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if t == 2:
        return [(1.0, t - 1)]
    return [(1.0 - gamma, t - 1), (gamma, t - 2)]


def ensemble_reward(
    history: PolicyHistory,
    t: int,
    gamma: float,
    prompt,
    response,
    kind: LossKind | None = None,
) -> float:
    """Reward used at iteration ``t`` to rank pairs and candidates.

    For ``t >= 3`` this is ``(1-gamma) log(pi_{t-1}/pi_{t-2}) + gamma log(pi_{t-2}/pi_{t-3})``;
    at ``t == 2`` it is ``log(pi_1/pi_0)``. With a SimPO ``kind`` the log-ratios
    are replaced by the length-normalized SimPO rewards of ``pi_{t-1}`` and ``pi_{t-2}``.
    """
    _check_t(history, t)
    terms = _weights(t, gamma)
    if kind is not None and kind.variant is Variant.SIMPO:
        scale = kind.beta / len(response)
        vals = [c * (scale * log_prob(history[i], prompt, response)) for c, i in terms]
    else:
        vals = [c * (log_prob(history[i], prompt, response) - log_prob(history[i - 1], prompt, response)) for c, i in terms]
    return vals[0] if len(vals) == 1 else vals[0] + vals[1]


def ensemble_rewards_batch(
    history: PolicyHistory,
    t: int,
    gamma: float,
    batch: SeqBatch,
    kind: LossKind | None = None,
) -> np.ndarray:
    """Vectorized :func:`ensemble_reward` over every sequence of ``batch``."""
    _check_t(history, t)
    terms = _weights(t, gamma)
    cache: dict[int, np.ndarray] = {}

    def lp(i: int) -> np.ndarray:
        if i not in cache:
            cache[i] = batch.log_probs(history[i])
        return cache[i]

    if kind is not None and kind.variant is Variant.SIMPO:
        scale = kind.beta / batch.lengths
        vals = [c * (scale * lp(i)) for c, i in terms]
    else:
        vals = [c * (lp(i) - lp(i - 1)) for c, i in terms]
    return vals[0] if len(vals) == 1 else vals[0] + vals[1]


def ensemble_margins(
    history: PolicyHistory,
    t: int,
    gamma: float,
    data: Sequence[PreferencePair],
    kind: LossKind | None = None,
) -> list[MarginRecord]:
    """One :class:`MarginRecord` per pair, in input order."""
    if len(data) == 0:
        raise ValueError("no pairs to score")
    prompts = [p.prompt for p in data]
    bw = SeqBatch.encode(history.vocab, prompts, [p.chosen for p in data])
    bl = SeqBatch.encode(history.vocab, prompts, [p.rejected for p in data])
    rw = ensemble_rewards_batch(history, t, gamma, bw, kind)
    rl = ensemble_rewards_batch(history, t, gamma, bl, kind)
    return [
        MarginRecord(p.id, float(w - l), float(w), float(l))
        for p, w, l in zip(data, rw, rl)
    ]


def rank_records(records: Sequence[MarginRecord]) -> list[MarginRecord]:
    """Records by descending margin, ties by ascending pair id."""
    return sorted(records, key=lambda r: (-r.margin, r.pair_id))


def select_top_k(records: Sequence[MarginRecord], k: int) -> set[int]:
    if k < 0 or k > len(records):
        raise ValueError(f"k={k} out of range for {len(records)} records")
    return {r.pair_id for r in rank_records(records)[:k]}


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    """``|a & b| / |a | b|``; two empty sets count as identical."""
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def jaccard_matrix(sets: Sequence[Iterable[int]]) -> np.ndarray:
    sets = [set(s) for s in sets]
    n = len(sets)
    out = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = jaccard(sets[i], sets[j])
    return out


def write_selected(ids: Iterable[int], path: str | Path) -> None:
    """One pair id per line, ascending."""
    Path(path).write_text("".join(f"{i}\n" for i in sorted(ids)))


def read_selected(path: str | Path) -> set[int]:
    return {int(line) for line in Path(path).read_text().split() if line}
