"""On-policy preference bootstrapping from the policy's own implicit rewards."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .losses import LossKind
from .policy import SampleControls, SeqBatch, TokenSeq, nucleus_table, _draw, validate_prompt
from .seeding import derive_seed
from .selection import PolicyHistory, ensemble_rewards_batch

log = logging.getLogger(__name__)


class DegeneratePromptError(RuntimeError):
    """Fewer than two distinct responses could be sampled for a prompt."""


class BootstrapError(RuntimeError):
    """Every prompt was degenerate, so no pair could be produced."""


@dataclass(frozen=True)
class BootstrapConfig:
    r_candidates: int = 4
    k_tilde: int = 0
    controls: SampleControls = field(default_factory=SampleControls)
    dedupe_attempts: int = 16

    def __post_init__(self):
        if self.r_candidates < 2:
            raise ValueError("r_candidates must be >= 2")
        if self.k_tilde < 0:
            raise ValueError("k_tilde must be >= 0")
        if self.dedupe_attempts < 1:
            raise ValueError("dedupe_attempts must be >= 1")


@dataclass(frozen=True)
class BootstrappedPair:
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq
    margin: float
    source_prompt_id: int
    meta: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("bootstrapped pair has identical responses")
        if self.margin < 0:
            raise ValueError("bootstrapped margin must be non-negative")


def generate_candidates(
    history: PolicyHistory,
    prompt: Sequence[int],
    cfg: BootstrapConfig,
    prompt_id: int = 0,
    round_index: int = 0,
    _table=None,
) -> list[TokenSeq]:
    """Sample up to ``cfg.r_candidates`` distinct responses from the latest snapshot.

    Every draw is seeded from (controls.seed, iteration, round, prompt id, slot,
    attempt), so results do not depend on call order.
    """
    policy = history.latest
    validate_prompt(policy.vocab, prompt)
    ctl = cfg.controls
    table = _table if _table is not None else nucleus_table(policy, ctl.temperature, ctl.top_p)
    t = len(history)
    seen: list[TokenSeq] = []
    for slot in range(cfg.r_candidates):
        for attempt in range(cfg.dedupe_attempts):
            seed = derive_seed(ctl.seed, "bootstrap", t, round_index, prompt_id, slot, attempt)
            y = _draw(policy.vocab, table, prompt, ctl.max_len, seed)
            if y not in seen:
                seen.append(y)
                break
    if len(seen) < 2:
        raise DegeneratePromptError(f"prompt {prompt_id}: only {len(seen)} distinct response(s) after resampling")
    return seen


def pick_extremes(rewards: Sequence[float]) -> tuple[int, int]:
    """Indices of the best and worst candidates.

    Ties go to the lowest index; the worst is chosen among indices other than
    the best, so a full tie gives (0, 1).
    """
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 2:
        raise ValueError("need at least two candidates")
    best = int(np.argmax(r))
    rest = [i for i in range(len(r)) if i != best]
    worst = min(rest, key=lambda i: (r[i], i))
    return best, worst


def extract_pair(
    history: PolicyHistory,
    t: int,
    gamma: float,
    prompt: Sequence[int],
    candidates: Sequence[TokenSeq],
    prompt_id: int = 0,
    kind: LossKind | None = None,
) -> BootstrappedPair:
    """Pair the max- and min-reward candidates under the iteration-``t`` ensemble reward."""
    if len(candidates) < 2:
        raise ValueError("extract_pair needs at least two candidates")
    batch = SeqBatch.encode(history.vocab, [prompt] * len(candidates), candidates)
    rewards = ensemble_rewards_batch(history, t, gamma, batch, kind)
    best, worst = pick_extremes(rewards)
    return BootstrappedPair(
        tuple(prompt),
        tuple(candidates[best]),
        tuple(candidates[worst]),
        float(rewards[best] - rewards[worst]),
        prompt_id,
        {"origin": "on-policy", "iteration": t},
    )


def bootstrap_dataset(
    history: PolicyHistory,
    t: int,
    gamma: float,
    prompts: Sequence[Sequence[int]],
    cfg: BootstrapConfig,
    kind: LossKind | None = None,
) -> list[BootstrappedPair]:
    """Build the top-``k_tilde`` on-policy pairs for iteration ``t``.

    When ``k_tilde`` exceeds the number of prompts, ``ceil(k_tilde / n)``
    independently seeded rounds are run per prompt and pooled before the
    top-k cut.
    """
    if cfg.k_tilde == 0:
        return []
    if not prompts:
        raise BootstrapError("no prompts to bootstrap from")
    ctl = cfg.controls
    table = nucleus_table(history.latest, ctl.temperature, ctl.top_p)
    rounds = max(1, math.ceil(cfg.k_tilde / len(prompts)))
    pool: list[tuple[int, int, BootstrappedPair]] = []
    degenerate = 0
    for rnd in range(rounds):
        for pid, x in enumerate(prompts):
            try:
                cands = generate_candidates(history, x, cfg, pid, rnd, _table=table)
            except DegeneratePromptError:
                degenerate += 1
                continue
            pair = extract_pair(history, t, gamma, x, cands, pid, kind)
            pair.meta["round"] = rnd
            pool.append((pid, rnd, pair))
    if not pool:
        raise BootstrapError(f"all {len(prompts)} prompts were degenerate at iteration {t}")
    if degenerate:
        log.info("iteration %d: skipped %d degenerate prompt draws", t, degenerate)
    pool.sort(key=lambda e: (-e[2].margin, e[0], e[1]))
    if len(pool) < cfg.k_tilde:
        log.warning("iteration %d: only %d bootstrapped pairs available for k_tilde=%d", t, len(pool), cfg.k_tilde)
    return [e[2] for e in pool[: cfg.k_tilde]]
