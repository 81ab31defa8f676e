"""Implicit rewards, margins and the DPO / IPO / SLiC-HF / SimPO losses.

Rewards are unscaled log-ratios ``log pi(y|x) - log ref(y|x)``; beta only enters
inside the losses, as ``beta * margin``. SimPO is the exception: its reward is
``beta/|y| * log pi(y|x)`` and its loss is ``-log sigmoid(margin)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .policy import SeqBatch, TabularPolicy, TokenSeq, check_same_vocab, log_prob, log_prob_grad


class Variant(str, enum.Enum):
    DPO = "dpo"
    IPO = "ipo"
    SLIC = "slic"
    SIMPO = "simpo"


DEFAULT_BETA = {Variant.DPO: 0.2, Variant.SLIC: 0.2, Variant.IPO: 1.0, Variant.SIMPO: 0.2}


@dataclass(frozen=True)
class LossKind:
    variant: Variant
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    @classmethod
    def default(cls, variant: str | Variant) -> "LossKind":
        v = Variant(variant)
        return cls(v, DEFAULT_BETA[v])


@dataclass(frozen=True)
class PreferencePair:
    prompt: TokenSeq
    chosen: TokenSeq
    rejected: TokenSeq
    id: int = 0
    meta: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if self.chosen == self.rejected:
            raise ValueError(f"pair {self.id}: chosen and rejected responses are identical")

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.prompt, self.rejected, self.chosen, self.id, dict(self.meta))


# -- scalar operations -------------------------------------------------------


def implicit_reward(policy: TabularPolicy, reference: TabularPolicy, prompt, response) -> float:
    check_same_vocab(policy, reference)
    return log_prob(policy, prompt, response) - log_prob(reference, prompt, response)


def simpo_reward(policy: TabularPolicy, prompt, response, beta: float) -> float:
    if len(response) == 0:
        raise ValueError("SimPO reward needs a non-empty response")
    return beta / len(response) * log_prob(policy, prompt, response)


def irm(policy: TabularPolicy, reference: TabularPolicy | None, pair: PreferencePair, kind: LossKind | None = None) -> float:
    """Implicit reward margin of ``pair``; for SimPO the reference is ignored."""
    if kind is not None and kind.variant is Variant.SIMPO:
        return simpo_reward(policy, pair.prompt, pair.chosen, kind.beta) - simpo_reward(
            policy, pair.prompt, pair.rejected, kind.beta
        )
    return implicit_reward(policy, reference, pair.prompt, pair.chosen) - implicit_reward(
        policy, reference, pair.prompt, pair.rejected
    )


def sigmoid(z):
    """Numerically stable logistic function (scalar or array)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def preference_prob(margin: float, beta: float) -> float:
    """Bradley-Terry probability ``sigmoid(beta * margin)``."""
    return sigmoid(beta * margin)


def loss_values(kind: LossKind, margins):
    """Per-pair loss for an array of margins."""
    m = np.asarray(margins, dtype=np.float64)
    b = kind.beta
    v = kind.variant
    if v is Variant.DPO:
        return softplus(-b * m)
    if v is Variant.IPO:
        return (m - 1.0 / (2.0 * b)) ** 2
    if v is Variant.SLIC:
        return np.maximum(0.0, 1.0 - b * m)
    return softplus(-m)  # SIMPO: beta already inside the margin


def loss_slopes(kind: LossKind, margins) -> np.ndarray:
    """d loss / d margin; the SLiC hinge kink gets subgradient 0."""
    m = np.asarray(margins, dtype=np.float64)
    b = kind.beta
    v = kind.variant
    if v is Variant.DPO:
        return -b * sigmoid(-b * m)
    if v is Variant.IPO:
        return 2.0 * (m - 1.0 / (2.0 * b))
    if v is Variant.SLIC:
        return np.where(b * m < 1.0, -b, 0.0)
    return -sigmoid(-m)


def loss(kind: LossKind, margin: float) -> float:
    return float(loss_values(kind, margin))


def loss_grad(kind: LossKind, policy: TabularPolicy, reference: TabularPolicy | None, pair: PreferencePair) -> np.ndarray:
    """Exact gradient of the pair loss with respect to ``policy.logits``."""
    m = irm(policy, reference, pair, kind)
    slope = float(loss_slopes(kind, m))
    g_w = log_prob_grad(policy, pair.prompt, pair.chosen)
    g_l = log_prob_grad(policy, pair.prompt, pair.rejected)
    if kind.variant is Variant.SIMPO:
        g_w *= kind.beta / len(pair.chosen)
        g_l *= kind.beta / len(pair.rejected)
    return slope * (g_w - g_l)


# -- batched operations ------------------------------------------------------


def pair_label(pair: Any) -> str:
    """Identifier used in diagnostics for offline and bootstrapped pairs."""
    if hasattr(pair, "source_prompt_id"):
        return f"bootstrapped(prompt {pair.source_prompt_id})"
    return str(getattr(pair, "id", "?"))


class NonFiniteLossError(FloatingPointError):
    pass


class PairBatch:
    """A dataset of pairs encoded for vectorized margin, loss and gradient evaluation.

    Reference log-probabilities are computed once at construction and never
    recomputed, so the reference is frozen for the lifetime of the batch.
    """

    def __init__(self, pairs: Sequence[Any], kind: LossKind, reference: TabularPolicy | None, vocab=None):
        if len(pairs) == 0:
            raise ValueError("empty pair dataset")
        self.pairs = list(pairs)
        self.kind = kind
        if vocab is None:
            if reference is None:
                raise ValueError("pass a reference policy or a vocab")
            vocab = reference.vocab
        prompts = [p.prompt for p in self.pairs]
        self.chosen = SeqBatch.encode(vocab, prompts, [p.chosen for p in self.pairs])
        self.rejected = SeqBatch.encode(vocab, prompts, [p.rejected for p in self.pairs])
        if kind.variant is Variant.SIMPO:
            self.scale_w = kind.beta / self.chosen.lengths
            self.scale_l = kind.beta / self.rejected.lengths
            self.ref_w = np.zeros(len(self.pairs))
            self.ref_l = np.zeros(len(self.pairs))
        else:
            if reference is None:
                raise ValueError(f"{kind.variant.value} needs a reference policy")
            self.scale_w = np.ones(len(self.pairs))
            self.scale_l = np.ones(len(self.pairs))
            self.ref_w = self.chosen.log_probs(reference)
            self.ref_l = self.rejected.log_probs(reference)
        self.ref_w.setflags(write=False)
        self.ref_l.setflags(write=False)

    def __len__(self) -> int:
        return len(self.pairs)

    def margins(self, policy: TabularPolicy) -> np.ndarray:
        rw = self.scale_w * (self.chosen.log_probs(policy) - self.ref_w)
        rl = self.scale_l * (self.rejected.log_probs(policy) - self.ref_l)
        return rw - rl

    def mean_loss(self, policy: TabularPolicy) -> float:
        return float(loss_values(self.kind, self.margins(policy)).mean())

    def loss_and_grad(self, policy: TabularPolicy, idx: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        """Mean loss over the pairs selected by ``idx`` (all when None) and its gradient."""
        m = self.margins(policy)
        weights = np.zeros(len(self.pairs))
        sel = np.arange(len(self.pairs)) if idx is None else np.asarray(idx)
        losses = loss_values(self.kind, m[sel])
        slopes = loss_slopes(self.kind, m[sel])
        bad = ~(np.isfinite(losses) & np.isfinite(slopes))
        if bad.any():
            culprit = self.pairs[int(sel[np.argmax(bad)])]
            raise NonFiniteLossError(f"non-finite loss or gradient at pair {pair_label(culprit)}")
        np.add.at(weights, sel, slopes / len(sel))
        grad = self.chosen.grad(policy, weights * self.scale_w) - self.rejected.grad(policy, weights * self.scale_l)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLossError("non-finite gradient")
        return float(losses.mean()), grad
