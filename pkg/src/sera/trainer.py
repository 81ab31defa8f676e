"""The iterative self-reviewing alignment loop.

Iteration 1 trains on the whole offline dataset against the SFT policy. Each
later iteration re-scores the offline pairs with the ensembled implicit reward,
keeps the top ``k``, adds the top ``k_tilde`` pairs bootstrapped from the
previous policy's own samples, and trains on that union with the previous
policy as the new reference.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

import numpy as np

from .bootstrap import BootstrapConfig, BootstrappedPair, bootstrap_dataset
from .losses import LossKind, PairBatch, PreferencePair, Variant
from .policy import TabularPolicy, check_same_vocab
from .seeding import rng_for
from .selection import PolicyHistory, ensemble_margins, select_top_k

log = logging.getLogger(__name__)

FULL = "full"
Batch = Union[str, int]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdamParams:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    """Adaptive-moment accumulators for one logit table."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, logits: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(logits), np.zeros_like(logits), 0)

    def update(self, theta: np.ndarray, grad: np.ndarray, hp: AdamParams) -> np.ndarray:
        """One descent step; returns new parameters."""
        if grad.shape != self.m.shape:
            raise ValueError("gradient shape does not match optimizer state")
        self.step += 1
        self.m = hp.beta1 * self.m + (1.0 - hp.beta1) * grad
        self.v = hp.beta2 * self.v + (1.0 - hp.beta2) * grad * grad
        m_hat = self.m / (1.0 - hp.beta1**self.step)
        v_hat = self.v / (1.0 - hp.beta2**self.step)
        return theta - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)


@dataclass(frozen=True)
class SeraConfig:
    loss: LossKind = field(default_factory=lambda: LossKind.default("dpo"))
    iterations: int = 3
    gamma: float = 0.3
    k: int = 0
    k_tilde: int = 0
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    epochs_per_iter: int = 1
    lr: float = 0.05
    batch: Batch = 64
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.k < 0 or self.k_tilde < 0:
            raise ConfigError("k and k_tilde must be non-negative")
        if self.epochs_per_iter < 1:
            raise ConfigError("epochs_per_iter must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch != FULL and not (isinstance(self.batch, int) and self.batch >= 1):
            raise ConfigError(f"batch must be 'full' or a positive integer, got {self.batch!r}")

    @classmethod
    def from_proportions(cls, n: int, select_prop: float = 0.7, ktilde_prop: float = 0.3, **kw) -> "SeraConfig":
        """Floor proportions of the offline dataset size into counts."""
        if not 0.0 <= select_prop <= 1.0:
            raise ConfigError(f"select proportion must lie in [0, 1], got {select_prop}")
        if ktilde_prop < 0:
            raise ConfigError(f"k_tilde proportion must be >= 0, got {ktilde_prop}")
        return cls(k=int(np.floor(select_prop * n + 1e-9)), k_tilde=int(np.floor(ktilde_prop * n + 1e-9)), **kw)

    def as_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["loss"] = {"variant": self.loss.variant.value, "beta": self.loss.beta}
        return d


@dataclass
class IterationReport:
    t: int
    dataset_size: int
    offline_kept: int
    bootstrapped_kept: int
    mean_loss_start: float
    mean_loss_end: float
    n_steps: int
    flagged: bool = False
    selected_ids: frozenset[int] = frozenset()
    bootstrapped: list[BootstrappedPair] = field(default_factory=list, repr=False)

    def row(self) -> dict[str, Any]:
        """Delimited-report columns."""
        return {
            "t": self.t,
            "dataset_size": self.dataset_size,
            "offline_kept": self.offline_kept,
            "bootstrapped_kept": self.bootstrapped_kept,
            "mean_loss_start": self.mean_loss_start,
            "mean_loss_end": self.mean_loss_end,
            "n_steps": self.n_steps,
            "flagged": int(self.flagged),
        }


def _batches(n: int, cfg: SeraConfig, t: int, epoch: int) -> list[np.ndarray | None]:
    if cfg.batch == FULL:
        return [None]
    order = rng_for(cfg.seed, "shuffle", t, epoch).permutation(n)
    size = int(cfg.batch)
    return [order[i : i + size] for i in range(0, n, size)]


def train_iteration(
    policy: TabularPolicy,
    reference: TabularPolicy,
    data: Sequence[PreferencePair | BootstrappedPair],
    cfg: SeraConfig,
    t: int = 1,
) -> tuple[TabularPolicy, IterationReport]:
    """Run ``cfg.epochs_per_iter`` epochs of Adam on the mean DAA loss over ``data``."""
    if len(data) == 0:
        raise ValueError(f"iteration {t}: empty training set")
    check_same_vocab(policy, reference)
    batch = PairBatch(data, cfg.loss, reference)
    hp = AdamParams(lr=cfg.lr)
    state = OptimizerState.zeros_like(policy.logits)
    start = batch.mean_loss(policy)
    theta = policy.logits
    current = policy
    for epoch in range(cfg.epochs_per_iter):
        for idx in _batches(len(batch), cfg, t, epoch):
            _, grad = batch.loss_and_grad(current, idx)
            theta = state.update(theta, grad, hp)
            current = policy.with_logits(theta)
    end = batch.mean_loss(current)
    n_boot = sum(isinstance(p, BootstrappedPair) for p in data)
    report = IterationReport(
        t=t,
        dataset_size=len(data),
        offline_kept=len(data) - n_boot,
        bootstrapped_kept=n_boot,
        mean_loss_start=start,
        mean_loss_end=end,
        n_steps=state.step,
    )
    if end > start:
        report.flagged = True
        log.warning("iteration %d: mean loss rose from %.6g to %.6g", t, start, end)
    return current, report


def run_sera(
    sft: TabularPolicy,
    offline: Sequence[PreferencePair],
    prompts: Sequence[Sequence[int]],
    cfg: SeraConfig,
    on_iteration: Callable[[PolicyHistory, IterationReport], None] | None = None,
) -> tuple[PolicyHistory, list[IterationReport]]:
    """Run all ``cfg.iterations`` rounds and return every snapshot plus per-round reports.

    With ``k = N`` and ``k_tilde = 0`` this is iterative DAA training; with
    ``iterations = 1`` it is a single round of plain DAA training.
    """
    n = len(offline)
    if n == 0:
        raise ValueError("offline dataset is empty")
    if cfg.k > n:
        raise ConfigError(f"k={cfg.k} exceeds the offline dataset size {n}")
    if cfg.iterations >= 2 and cfg.k == 0 and cfg.k_tilde == 0:
        raise ConfigError("k = k_tilde = 0 leaves later iterations with no training data")
    boot_cfg = dataclasses.replace(cfg.bootstrap, k_tilde=cfg.k_tilde)
    by_id = {p.id: p for p in offline}
    if len(by_id) != n:
        raise ValueError("offline pair ids are not unique")

    history = PolicyHistory((sft,))
    policy, report = train_iteration(sft, sft, offline, cfg, t=1)
    report.selected_ids = frozenset(by_id)
    history = history.extended(policy)
    reports = [report]
    if on_iteration:
        on_iteration(history, report)

    kind = cfg.loss if cfg.loss.variant is Variant.SIMPO else None
    for t in range(2, cfg.iterations + 1):
        if cfg.k == n:
            selected = set(by_id)
        else:
            records = ensemble_margins(history, t, cfg.gamma, offline, kind)
            selected = select_top_k(records, cfg.k)
        kept = [p for p in offline if p.id in selected]
        boot = bootstrap_dataset(history, t, cfg.gamma, prompts, boot_cfg, kind)
        data: list[Any] = kept + boot
        if not data:
            raise ConfigError(f"iteration {t}: no training pairs")
        reference = history.latest
        policy, report = train_iteration(reference, reference, data, cfg, t=t)
        report.selected_ids = frozenset(selected)
        report.bootstrapped = boot
        history = history.extended(policy)
        reports.append(report)
        if on_iteration:
            on_iteration(history, report)
    return history, reports
