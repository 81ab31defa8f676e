"""A synthetic preference world with a hidden gold model, plus JSONL I/O.

The gold reward of a response is its log-likelihood under the hidden gold
bigram model, and true preferences are Bradley-Terry on gold-reward
differences, ``p*(a > b) = sigmoid(g(a) - g(b))``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .losses import PreferencePair, sigmoid
from .policy import SampleControls, SeqBatch, TabularPolicy, TokenSeq, Vocab, _draw, log_prob, nucleus_table
from .seeding import derive_seed, rng_for


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    gold: TabularPolicy
    prompt_len: int
    response_len_max: int
    seed: int
    sharpness: float

    @property
    def vocab(self) -> Vocab:
        return self.gold.vocab

    def params(self) -> dict[str, Any]:
        return {
            "vocab_size": self.vocab.size,
            "sharpness": self.sharpness,
            "seed": self.seed,
            "prompt_len": self.prompt_len,
            "response_len_max": self.response_len_max,
        }


def make_world(
    vocab_size: int,
    sharpness: float,
    seed: int,
    prompt_len: int = 2,
    response_len_max: int = 6,
) -> SyntheticWorld:
    """Gold logits are i.i.d. standard normal draws scaled by ``sharpness``."""
    vocab = Vocab(vocab_size)
    if sharpness < 0:
        raise ValueError("sharpness must be >= 0")
    if prompt_len < 1 or response_len_max < 1:
        raise ValueError("prompt_len and response_len_max must be >= 1")
    noise = rng_for(seed, "gold").standard_normal((vocab.n_rows, vocab.n_cols))
    return SyntheticWorld(TabularPolicy(vocab, sharpness * noise), prompt_len, response_len_max, seed, sharpness)


def world_from_params(params: dict[str, Any]) -> SyntheticWorld:
    return make_world(
        int(params["vocab_size"]),
        float(params["sharpness"]),
        int(params["seed"]),
        int(params["prompt_len"]),
        int(params["response_len_max"]),
    )


def gold_reward(world: SyntheticWorld, prompt, response) -> float:
    return log_prob(world.gold, prompt, response)


def gold_rewards(world: SyntheticWorld, prompts, responses) -> np.ndarray:
    return SeqBatch.encode(world.vocab, prompts, responses).log_probs(world.gold)


def true_preference(world: SyntheticWorld, prompt, a, b) -> float:
    """p*(a > b | prompt) = sigmoid(g(a) - g(b))."""
    return sigmoid(gold_reward(world, prompt, a) - gold_reward(world, prompt, b))


def sample_prompts(world: SyntheticWorld, n: int, stream: str = "prompts") -> list[TokenSeq]:
    rng = rng_for(world.seed, stream)
    arr = rng.integers(0, world.vocab.size, size=(n, world.prompt_len))
    return [tuple(int(v) for v in row) for row in arr]


# -- labeling ----------------------------------------------------------------


@dataclass(frozen=True)
class LabelPolicy:
    flip_rate: float = 0.0
    length_bias_rate: float = 0.0
    stochastic_labels: bool = False

    def __post_init__(self):
        for name in ("flip_rate", "length_bias_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class AuditFlags:
    """Hidden provenance of one generated pair; kept out of the training data."""

    was_flipped: bool
    was_length_labeled: bool
    gold_chosen: float
    gold_rejected: float


LabelAudit = dict  # pair id -> AuditFlags


def gen_dataset(
    world: SyntheticWorld,
    behavior: TabularPolicy,
    n_pairs: int,
    label: LabelPolicy,
    controls: SampleControls,
    max_attempts: int = 32,
) -> tuple[list[PreferencePair], LabelAudit]:
    """Sample and label ``n_pairs`` preference pairs.

    Two distinct responses to a random prompt are drawn from ``behavior`` and
    ranked by gold reward (or by a Bernoulli draw on the true preference when
    labels are stochastic). With probability ``flip_rate`` the ranking is then
    swapped; otherwise, with probability ``length_bias_rate``, the longer
    response is declared the winner. Returns the pairs and the audit sidecar.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if behavior.vocab != world.vocab:
        raise ValueError("behavior policy vocab does not match the world")
    table = nucleus_table(behavior, controls.temperature, controls.top_p)
    max_len = min(controls.max_len, world.response_len_max)
    base = derive_seed(world.seed, "dataset", controls.seed)
    pairs: list[PreferencePair] = []
    audit: LabelAudit = {}
    draw_index = 0
    budget = 4 * n_pairs + 100
    while len(pairs) < n_pairs:
        if draw_index >= budget:
            raise RuntimeError(f"only {len(pairs)} of {n_pairs} pairs with distinct responses were obtainable")
        i = draw_index
        draw_index += 1
        rng = np.random.default_rng(derive_seed(base, "pair", i))
        prompt = tuple(int(v) for v in rng.integers(0, world.vocab.size, size=world.prompt_len))
        y1 = _draw(world.vocab, table, prompt, max_len, derive_seed(base, "resp", i, 0))
        y2 = y1
        for attempt in range(1, max_attempts + 1):
            y2 = _draw(world.vocab, table, prompt, max_len, derive_seed(base, "resp", i, attempt))
            if y2 != y1:
                break
        if y2 == y1:
            continue
        g1, g2 = gold_reward(world, prompt, y1), gold_reward(world, prompt, y2)
        u_pref, u_flip, u_len = rng.random(3)
        if label.stochastic_labels:
            first_wins = u_pref < sigmoid(g1 - g2)
        else:
            first_wins = g1 >= g2
        chosen, rejected = (y1, y2) if first_wins else (y2, y1)
        flipped = length_labeled = False
        if u_flip < label.flip_rate:
            chosen, rejected = rejected, chosen
            flipped = True
        elif u_len < label.length_bias_rate:
            length_labeled = True
            if len(rejected) > len(chosen):
                chosen, rejected = rejected, chosen
        pid = len(pairs)
        pairs.append(PreferencePair(prompt, chosen, rejected, pid))
        audit[pid] = AuditFlags(
            flipped,
            length_labeled,
            g1 if chosen == y1 else g2,
            g2 if chosen == y1 else g1,
        )
    return pairs, audit


def flip_pairs(pairs: Sequence[PreferencePair], rate: float, seed: int) -> list[PreferencePair]:
    """Swap chosen/rejected of each pair independently with probability ``rate``."""
    rng = rng_for(seed, "flip")
    u = rng.random(len(pairs))
    return [p.swapped() if ui < rate else p for p, ui in zip(pairs, u)]


def gen_sft_corpus(
    world: SyntheticWorld,
    behavior: TabularPolicy,
    n: int,
    controls: SampleControls,
) -> list[tuple[TokenSeq, TokenSeq]]:
    """Demonstrations drawn from ``behavior`` on fresh prompts."""
    prompts = sample_prompts(world, n, stream=f"sft-prompts-{controls.seed}")
    table = nucleus_table(behavior, controls.temperature, controls.top_p)
    max_len = min(controls.max_len, world.response_len_max)
    return [
        (x, _draw(world.vocab, table, x, max_len, derive_seed(world.seed, "sft", controls.seed, i)))
        for i, x in enumerate(prompts)
    ]


# -- JSONL -------------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def pair_to_json(pair: Any, index: int) -> dict[str, Any]:
    meta = dict(getattr(pair, "meta", {}) or {})
    if hasattr(pair, "source_prompt_id"):
        meta.setdefault("origin", "on-policy")
        meta["source_prompt_id"] = pair.source_prompt_id
        meta["margin"] = pair.margin
        pid = index
    else:
        pid = pair.id
    out = {"id": pid, "prompt": list(pair.prompt), "chosen": list(pair.chosen), "rejected": list(pair.rejected)}
    if meta:
        out["meta"] = meta
    return out


def write_jsonl(pairs: Iterable[Any], path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(pairs):
            fh.write(json.dumps(pair_to_json(p, i), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[PreferencePair]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    pairs: list[PreferencePair] = []
    seen: set[int] = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid = int(obj["id"])
                fields = [obj[k] for k in ("prompt", "chosen", "rejected")]
                if not all(isinstance(f, list) and all(isinstance(t, int) for t in f) for f in fields):
                    raise TypeError("prompt/chosen/rejected must be integer arrays")
                meta = obj.get("meta", {})
                if not isinstance(meta, dict):
                    raise TypeError("meta must be an object")
                pair = PreferencePair(*fields, id=pid, meta=meta)
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
            if pid in seen:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate id {pid}")
            seen.add(pid)
            pairs.append(pair)
    return pairs


def write_audit(audit: LabelAudit, path: str | Path) -> None:
    with open(path, "w") as fh:
        for pid in sorted(audit):
            fh.write(json.dumps({"id": pid, **asdict(audit[pid])}, sort_keys=True) + "\n")


def read_audit(path: str | Path) -> LabelAudit:
    out: LabelAudit = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                pid = obj.pop("id")
                out[int(pid)] = AuditFlags(**obj)
    return out


def write_corpus(corpus: Sequence[tuple[TokenSeq, TokenSeq]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for x, y in corpus:
            fh.write(json.dumps({"prompt": list(x), "response": list(y)}) + "\n")


def read_corpus(path: str | Path) -> list[tuple[TokenSeq, TokenSeq]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append((tuple(obj["prompt"]), tuple(obj["response"])))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return out
