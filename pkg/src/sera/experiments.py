"""Experiment protocol on the synthetic world: shared setup, baselines and sweeps.

Used both by the CLI ``sweep`` command and the acceptance suite.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .bootstrap import BootstrapConfig
from .evaluation import reward_correlations, selection_audit, win_rate
from .losses import LossKind, PreferencePair
from .policy import SampleControls, TabularPolicy, TokenSeq, fit_sft
from .seeding import derive_seed
from .selection import PolicyHistory, ensemble_margins, jaccard_matrix, select_top_k
from .synthdata import LabelAudit, LabelPolicy, SyntheticWorld, gen_dataset, gen_sft_corpus, make_world, sample_prompts
from .trainer import SeraConfig, run_sera


@dataclass(frozen=True)
class WorldSpec:
    vocab_size: int = 8
    sharpness: float = 1.0
    prompt_len: int = 2
    response_len_max: int = 6
    n_pairs: int = 2000
    flip_rate: float = 0.0
    length_bias_rate: float = 0.0
    stochastic_labels: bool = False
    n_sft: int = 2000
    sft_epochs: int = 200
    sft_lr: float = 0.3
    n_eval_prompts: int = 2000
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Lab:
    spec: WorldSpec
    world: SyntheticWorld
    sft: TabularPolicy
    offline: list[PreferencePair]
    audit: LabelAudit
    eval_prompts: list[TokenSeq]

    @property
    def n(self) -> int:
        return len(self.offline)

    @property
    def prompts(self) -> list[TokenSeq]:
        return [p.prompt for p in self.offline]

    def eval_controls(self) -> SampleControls:
        return eval_setup(self.world, 0, self.spec.seed)[1]

    def score_vs_sft(self, policy: TabularPolicy) -> float:
        return win_rate(self.world, policy, self.sft, self.eval_prompts, self.eval_controls()).score


def generate(spec: WorldSpec):
    """World, labeled offline pairs with their audit, and the SFT demonstration corpus."""
    world = make_world(spec.vocab_size, spec.sharpness, spec.seed, spec.prompt_len, spec.response_len_max)
    behavior = TabularPolicy.uniform(world.vocab)
    gen_ctl = SampleControls(1.0, 1.0, spec.response_len_max, derive_seed(spec.seed, "offline"))
    label = LabelPolicy(spec.flip_rate, spec.length_bias_rate, spec.stochastic_labels)
    offline, audit = gen_dataset(world, behavior, spec.n_pairs, label, gen_ctl)
    sft_ctl = SampleControls(1.0, 1.0, spec.response_len_max, derive_seed(spec.seed, "sft"))
    corpus = gen_sft_corpus(world, behavior, spec.n_sft, sft_ctl)
    return world, offline, audit, corpus


def eval_setup(world: SyntheticWorld, n_prompts: int, seed: int) -> tuple[list[TokenSeq], SampleControls]:
    """Evaluation prompts and decoding controls (temperature 1.0, no truncation)."""
    prompts = sample_prompts(world, n_prompts, stream="eval-prompts")
    return prompts, SampleControls(1.0, 1.0, world.response_len_max, derive_seed(seed, "eval"))


def build_lab(spec: WorldSpec) -> Lab:
    """World, behavior-policy data, SFT policy and evaluation prompts for one seed."""
    world, offline, audit, corpus = generate(spec)
    sft = fit_sft(corpus, spec.sft_epochs, spec.sft_lr, world.vocab)
    eval_prompts, _ = eval_setup(world, spec.n_eval_prompts, spec.seed)
    return Lab(spec, world, sft, offline, audit, eval_prompts)


def sera_config(
    lab: Lab,
    variant: str = "dpo",
    select_prop: float = 0.7,
    ktilde_prop: float = 0.3,
    iterations: int = 3,
    gamma: float = 0.3,
    beta: float | None = None,
    **kw: Any,
) -> SeraConfig:
    """Default configuration: T=3, gamma=0.3, k=0.7N, k_tilde=0.3N, R=4, sampling at temp 0.7 / top-p 0.95."""
    loss = LossKind.default(variant) if beta is None else LossKind(variant, beta)
    controls = SampleControls(0.7, 0.95, lab.spec.response_len_max, derive_seed(lab.spec.seed, "bootstrap"))
    kw.setdefault("seed", lab.spec.seed)
    return SeraConfig.from_proportions(
        lab.n,
        select_prop,
        ktilde_prop,
        loss=loss,
        iterations=iterations,
        gamma=gamma,
        bootstrap=BootstrapConfig(r_candidates=4, controls=controls),
        **kw,
    )


def run(lab: Lab, cfg: SeraConfig):
    return run_sera(lab.sft, lab.offline, lab.prompts, cfg)


def plain_config(lab: Lab, variant: str = "dpo", **kw) -> SeraConfig:
    """Single-round DAA training on the full offline set."""
    return sera_config(lab, variant, select_prop=1.0, ktilde_prop=0.0, iterations=1, **kw)


def iterative_config(lab: Lab, variant: str = "dpo", iterations: int = 3, **kw) -> SeraConfig:
    """Iterative DAA: every offline pair, no bootstrapping, reference refreshed each round."""
    return sera_config(lab, variant, select_prop=1.0, ktilde_prop=0.0, iterations=iterations, **kw)


def selection_only_config(lab: Lab, variant: str = "dpo", **kw) -> SeraConfig:
    return sera_config(lab, variant, select_prop=0.7, ktilde_prop=0.0, **kw)


# -- individual studies ------------------------------------------------------


def noise_filtering(lab: Lab, variant: str = "dpo", keep: float = 0.7) -> dict[str, float]:
    """Train one round on the (noisy) offline set, then audit the top-``keep`` IRM selection."""
    history, _ = run(lab, plain_config(lab, variant))
    records = ensemble_margins(history, 2, 0.3, lab.offline)
    selected = select_top_k(records, int(np.floor(keep * lab.n + 1e-9)))
    a = selection_audit(records, selected, lab.audit)
    return {
        "flipped_inside": a.flipped_inside,
        "flipped_outside": a.flipped_outside,
        "flipped_global": a.flipped_global,
    }


def alignment_gain(lab: Lab, variant: str = "dpo") -> dict[str, float]:
    sera_hist, _ = run(lab, sera_config(lab, variant))
    dpo_hist, _ = run(lab, plain_config(lab, variant))
    return {"sera": lab.score_vs_sft(sera_hist.latest), "plain": lab.score_vs_sft(dpo_hist.latest)}


def spurious_correlation(lab: Lab, variant: str = "dpo") -> dict[str, float]:
    """Length and gold R^2 of the final implicit reward, with and without IRM selection."""
    out: dict[str, float] = {}
    for name, cfg in (("none", iterative_config(lab, variant)), ("irm", selection_only_config(lab, variant))):
        history, _ = run(lab, cfg)
        corr = reward_correlations(history, 0, lab.offline, lab.world)
        out[f"{name}_length_r2"] = corr.length.r_squared
        out[f"{name}_gold_r2"] = corr.gold.r_squared
        out[f"{name}_margin_r2"] = corr.margin.r_squared
    return out


MIX_FRACTIONS = (0.0, 0.3, 0.5, 0.7, 1.0)
GAMMAS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
KTILDE_MULTIPLES = (0.0, 0.3, 1.0, 2.0)


def mix_sweep(lab: Lab, fractions: Sequence[float] = MIX_FRACTIONS, variant: str = "dpo") -> list[dict[str, Any]]:
    """Fixed budget ``k + k_tilde = N``, varying the generated share ``k_tilde / N``."""
    rows = []
    for frac in fractions:
        cfg = sera_config(lab, variant, select_prop=1.0 - frac, ktilde_prop=frac)
        history, reports = run(lab, cfg)
        rows.append(
            {
                "seed": lab.spec.seed,
                "generated_fraction": frac,
                "k": cfg.k,
                "k_tilde": cfg.k_tilde,
                "win_rate_vs_sft": lab.score_vs_sft(history.latest),
            }
        )
    return rows


def ktilde_sweep(lab: Lab, multiples: Sequence[float] = KTILDE_MULTIPLES, variant: str = "dpo") -> list[dict[str, Any]]:
    """Fixed ``k = 0.7N`` with ``k_tilde`` from 0 up to several times N."""
    rows = []
    for mult in multiples:
        cfg = sera_config(lab, variant, select_prop=0.7, ktilde_prop=mult)
        history, _ = run(lab, cfg)
        rows.append(
            {
                "seed": lab.spec.seed,
                "ktilde_multiple": mult,
                "k": cfg.k,
                "k_tilde": cfg.k_tilde,
                "win_rate_vs_sft": lab.score_vs_sft(history.latest),
            }
        )
    return rows


def gamma_sweep(lab: Lab, gammas: Sequence[float] = GAMMAS, variant: str = "dpo") -> list[dict[str, Any]]:
    """Ensemble coefficient sweep; also reports Jaccard similarity of each final selection to gamma=0's."""
    rows = []
    selections = []
    for g in gammas:
        history, reports = run(lab, sera_config(lab, variant, gamma=g))
        selections.append(reports[-1].selected_ids)
        rows.append({"seed": lab.spec.seed, "gamma": g, "win_rate_vs_sft": lab.score_vs_sft(history.latest)})
    sim = jaccard_matrix(selections)
    for i, row in enumerate(rows):
        row["jaccard_vs_first"] = float(sim[0, i])
    return rows


def cross_daa_selections(lab: Lab, variants: Sequence[str] = ("dpo", "ipo", "slic")) -> tuple[list[str], np.ndarray]:
    """Final-iteration selected sets of SeRA runs under several losses, and their Jaccard matrix."""
    sets = []
    for v in variants:
        _, reports = run(lab, sera_config(lab, v))
        sets.append(reports[-1].selected_ids)
    return list(variants), jaccard_matrix(sets)


def with_seed(spec: WorldSpec, seed: int, **changes: Any) -> WorldSpec:
    return dataclasses.replace(spec, seed=seed, **changes)
