"""Gold-oracle evaluation: win rates, reward correlations, selection audits,
the Bayes-distilled-risk variance check, and delimited report tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .losses import PreferencePair, softplus, sigmoid
from .policy import SampleControls, SeqBatch, TabularPolicy, TokenSeq, nucleus_table, _draw
from .seeding import derive_seed, rng_for
from .selection import MarginRecord, PolicyHistory
from .synthdata import LabelAudit, LabelPolicy, SyntheticWorld, gen_dataset, gold_rewards

TIE_TOL = 1e-9


@dataclass(frozen=True)
class WinRateResult:
    wins: int
    ties: int
    losses: int

    @property
    def n(self) -> int:
        return self.wins + self.ties + self.losses

    @property
    def score(self) -> float:
        return (self.wins + 0.5 * self.ties) / self.n


def win_rate(
    world: SyntheticWorld,
    a: TabularPolicy,
    b: TabularPolicy,
    prompts: Sequence[Sequence[int]],
    controls: SampleControls,
) -> WinRateResult:
    """Score ``a`` against ``b``: 1 per gold-reward win, 0.5 per tie.

    Both policies answer prompt ``i`` with the same derived seed.
    """
    if not prompts:
        raise ValueError("no evaluation prompts")
    max_len = min(controls.max_len, world.response_len_max)
    ta = nucleus_table(a, controls.temperature, controls.top_p)
    tb = ta if a.same_as(b) else nucleus_table(b, controls.temperature, controls.top_p)
    seeds = [derive_seed(controls.seed, "winrate", i) for i in range(len(prompts))]
    ya = [_draw(world.vocab, ta, x, max_len, s) for x, s in zip(prompts, seeds)]
    yb = [_draw(world.vocab, tb, x, max_len, s) for x, s in zip(prompts, seeds)]
    ga = gold_rewards(world, prompts, ya)
    gb = gold_rewards(world, prompts, yb)
    diff = ga - gb
    ties = np.abs(diff) < TIE_TOL
    wins = int(np.sum((diff > 0) & ~ties))
    n_ties = int(np.sum(ties))
    return WinRateResult(wins, n_ties, len(prompts) - wins - n_ties)


# -- correlations ------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationReport:
    r_squared: float
    slope: float
    intercept: float
    n: int


def linear_fit(x: Sequence[float], y: Sequence[float]) -> CorrelationReport:
    """Least-squares ``y ~ slope * x + intercept``; R^2 is 0 for a constant regressor."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0:
        return CorrelationReport(0.0, 0.0, float(y.mean()), len(x))
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    if syy == 0.0:
        return CorrelationReport(0.0, slope, intercept, len(x))
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / syy
    return CorrelationReport(min(max(r2, 0.0), 1.0), slope, intercept, len(x))


@dataclass(frozen=True)
class RewardCorrelations:
    gold: CorrelationReport  # implicit reward of chosen vs its gold reward
    length: CorrelationReport  # implicit reward of chosen vs its token length
    margin: CorrelationReport  # implicit reward margin vs gold-reward margin


def reward_correlations(
    history: PolicyHistory,
    reference_index: int,
    pairs: Sequence[PreferencePair],
    world: SyntheticWorld,
    policy_index: int = -1,
) -> RewardCorrelations:
    if len(pairs) < 3:
        raise ValueError("need at least 3 pairs for a correlation")
    policy, reference = history[policy_index], history[reference_index]
    prompts = [p.prompt for p in pairs]
    bw = SeqBatch.encode(world.vocab, prompts, [p.chosen for p in pairs])
    bl = SeqBatch.encode(world.vocab, prompts, [p.rejected for p in pairs])
    rw = bw.log_probs(policy) - bw.log_probs(reference)
    rl = bl.log_probs(policy) - bl.log_probs(reference)
    gw = gold_rewards(world, prompts, [p.chosen for p in pairs])
    gl = gold_rewards(world, prompts, [p.rejected for p in pairs])
    return RewardCorrelations(
        gold=linear_fit(gw, rw),
        length=linear_fit(bw.lengths.astype(float), rw),
        margin=linear_fit(gw - gl, rw - rl),
    )


# -- selection audit ---------------------------------------------------------


@dataclass(frozen=True)
class SelectionAudit:
    n_inside: int
    n_outside: int
    flipped_inside: float
    flipped_outside: float
    length_inside: float
    length_outside: float
    flipped_global: float


def selection_audit(records: Sequence[MarginRecord], selected: Iterable[int], audit_flags: LabelAudit) -> SelectionAudit:
    """Fractions of flipped and length-labeled pairs inside vs outside a selection."""
    ids = [r.pair_id for r in records]
    missing = [i for i in ids if i not in audit_flags]
    if missing:
        raise KeyError(f"audit flags missing for pair ids {missing[:5]}")
    selected = set(selected)
    unknown = selected - set(ids)
    if unknown:
        raise KeyError(f"selected ids not among records: {sorted(unknown)[:5]}")
    inside = [audit_flags[i] for i in ids if i in selected]
    outside = [audit_flags[i] for i in ids if i not in selected]

    def frac(flags, attr):
        return float(np.mean([getattr(f, attr) for f in flags])) if flags else float("nan")

    return SelectionAudit(
        len(inside),
        len(outside),
        frac(inside, "was_flipped"),
        frac(outside, "was_flipped"),
        frac(inside, "was_length_labeled"),
        frac(outside, "was_length_labeled"),
        frac(inside + outside, "was_flipped"),
    )


# -- variance of the Bayes-distilled risk ------------------------------------


@dataclass(frozen=True)
class VarianceCheck:
    var_bayes: float
    var_empirical: float
    se_diff: float  # Monte-Carlo standard error of var_empirical - var_bayes

    @property
    def mc_standard_error(self) -> float:
        """``se_diff`` relative to ``var_empirical``."""
        return self.se_diff / self.var_empirical if self.var_empirical > 0 else 0.0

    @property
    def consistent(self) -> bool:
        """Bayes-distilled variance does not exceed the empirical one beyond MC error."""
        return self.var_bayes <= self.var_empirical * (1.0 + 3.0 * self.mc_standard_error)

    @property
    def strictly_lower(self) -> bool:
        return self.var_empirical - self.var_bayes > 3.0 * self.se_diff


def logistic_loss(f):
    return softplus(-np.asarray(f, dtype=np.float64))


def variance_lemma_check(
    world: SyntheticWorld,
    f_margin_fn: Callable[[TokenSeq, TokenSeq, TokenSeq], float],
    n_samples: int,
    n_resamples: int,
    loss_fn: Callable[[np.ndarray], np.ndarray] = logistic_loss,
    pool_size: int = 1000,
    seed: int = 0,
) -> VarianceCheck:
    """Monte-Carlo variance of the empirical vs Bayes-distilled risk of ``f``.

    The sample distribution is uniform over a pool of response pairs from the
    world (uniform behavior) with labels drawn from the true preference
    ``p* = sigmoid(g_a - g_b)``. The empirical risk averages the loss at the
    observed label; the Bayes-distilled risk averages
    ``p* loss(f) + (1 - p*) loss(-f)``. Both are computed on the same resamples.
    """
    if n_samples < 10 or n_resamples < 100:
        raise ValueError("need n_samples >= 10 and n_resamples >= 100")
    behavior = TabularPolicy.uniform(world.vocab)
    controls = SampleControls(1.0, 1.0, world.response_len_max, derive_seed(seed, "lemma-pool"))
    pool, _ = gen_dataset(world, behavior, pool_size, LabelPolicy(), controls)
    prompts = [p.prompt for p in pool]
    ga = gold_rewards(world, prompts, [p.chosen for p in pool])
    gb = gold_rewards(world, prompts, [p.rejected for p in pool])
    p_star = sigmoid(ga - gb)
    f = np.array([f_margin_fn(p.prompt, p.chosen, p.rejected) for p in pool], dtype=np.float64)
    loss_a = np.asarray(loss_fn(f), dtype=np.float64) * np.ones_like(f)
    loss_b = np.asarray(loss_fn(-f), dtype=np.float64) * np.ones_like(f)
    bayes_terms = p_star * loss_a + (1.0 - p_star) * loss_b

    rng = rng_for(seed, "lemma-resample")
    idx = rng.integers(0, len(pool), size=(n_resamples, n_samples))
    a_wins = rng.random((n_resamples, n_samples)) < p_star[idx]
    emp = np.where(a_wins, loss_a[idx], loss_b[idx]).mean(axis=1)
    bay = bayes_terms[idx].mean(axis=1)
    de = (emp - emp.mean()) ** 2
    db = (bay - bay.mean()) ** 2
    scale = n_resamples / (n_resamples - 1)
    var_e, var_b = float(de.mean() * scale), float(db.mean() * scale)
    d = de - db
    se = float(d.std(ddof=1) / np.sqrt(n_resamples) * scale)
    return VarianceCheck(var_b, var_e, se)


# -- delimited reports -------------------------------------------------------


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def emit_report(rows: Sequence[Mapping[str, Any]], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    """Write ``rows`` as a tab-separated table; floats keep full precision."""
    path = Path(path)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
    return path


def read_table(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def emit_matrix(labels: Sequence[str], matrix: np.ndarray, path: str | Path) -> Path:
    """Square labeled matrix (e.g. Jaccard similarities) as a table."""
    rows = [{"label": lab, **{l2: matrix[i, j] for j, l2 in enumerate(labels)}} for i, lab in enumerate(labels)]
    return emit_report(rows, path, ["label", *labels])
