"""Command-line front end.

Subcommands::

    gen-data   synthetic world, labeled pairs, audit sidecar, SFT corpus
    sft        fit the SFT policy on a demonstration corpus
    train      one SeRA run (snapshots, selected sets, bootstrapped pairs, reports)
    eval       gold win rates (and optional R^2 tables) for a run
    analyze    Jaccard matrix across runs, or one curve row per sub-run of a sweep
    sweep      run a mix / k_tilde / gamma sweep as sub-runs plus a curve table

Every command writes ``manifest.json`` last; a directory with a manifest holds a
completed run. Relative ``--out`` paths are resolved against ``$SERA_OUTPUT_ROOT``
when it is set. Existing outputs are never overwritten without ``--force``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .bootstrap import BootstrapConfig
from .evaluation import emit_matrix, emit_report, reward_correlations, win_rate
from .experiments import WorldSpec, eval_setup, generate
from .losses import DEFAULT_BETA, LossKind, Variant
from .policy import SampleControls, Vocab, fit_sft, load_policy, save_policy
from .seeding import derive_seed
from .selection import PolicyHistory, jaccard_matrix, read_selected, write_selected
from .synthdata import (
    read_audit,
    read_corpus,
    read_jsonl,
    world_from_params,
    write_audit,
    write_corpus,
    write_jsonl,
)
from .trainer import FULL, ConfigError, SeraConfig, run_sera

log = logging.getLogger("sera")

OUTPUT_ROOT_ENV = "SERA_OUTPUT_ROOT"
MANIFEST = "manifest.json"
SWEEP_KINDS = ("mix", "ktilde", "gamma")
MIX_FRACTIONS = (0.0, 0.3, 0.5, 0.7, 1.0)
KTILDE_PROPS = (0.0, 0.3, 1.0, 2.0)
GAMMAS = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


class CliError(RuntimeError):
    """A runtime failure reported as ``error: ...`` with exit code 1."""


# -- output directories and manifests ----------------------------------------


def resolve_out(out: str) -> Path:
    p = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def prepare_out(out: Path, force: bool, subdirs: Sequence[str] = ()) -> Path:
    """Create ``out``; refuse a non-empty directory unless ``force``.

    With ``force`` only the previous manifest and our own subdirectories are
    removed, so a half-written rerun never looks complete.
    """
    if out.exists() and not out.is_dir():
        raise CliError(f"output path exists and is not a directory: {out}")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise CliError(f"output directory {out} is not empty; pass --force to overwrite")
        (out / MANIFEST).unlink(missing_ok=True)
        for sub in subdirs:
            if (out / sub).is_dir():
                shutil.rmtree(out / sub)
    out.mkdir(parents=True, exist_ok=True)
    for sub in subdirs:
        (out / sub).mkdir(exist_ok=True)
    return out


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _flag_snapshot(args: argparse.Namespace) -> dict[str, Any]:
    skip = {"func", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def write_manifest(out: Path, args: argparse.Namespace, started: str, artifacts: Sequence[Path], **extra: Any) -> Path:
    """Record command, flags as parsed, seed, timestamps and artifact paths. Written last."""
    manifest = {
        "command": args.command,
        "flags": _flag_snapshot(args),
        "seed": getattr(args, "seed", None),
        "started": started,
        "finished": _now(),
        "artifacts": sorted(str(Path(a).relative_to(out)) for a in artifacts),
        "version": __version__,
        **extra,
    }
    path = out / MANIFEST
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def read_manifest(run: Path) -> dict[str, Any]:
    path = run / MANIFEST
    if not path.is_file():
        raise CliError(f"no {MANIFEST} in {run} (missing or incomplete run)")
    return json.loads(path.read_text())


def _load_world(path: Path):
    if not path.is_file():
        raise CliError(f"world file not found: {path}")
    return world_from_params(json.loads(path.read_text()))


# -- gen-data ----------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    started = _now()
    out = prepare_out(resolve_out(args.out), args.force)
    spec = WorldSpec(
        vocab_size=args.vocab,
        sharpness=args.sharpness,
        prompt_len=args.prompt_len,
        response_len_max=args.max_len,
        n_pairs=args.n_pairs,
        flip_rate=args.flip_rate,
        length_bias_rate=args.length_bias_rate,
        stochastic_labels=args.stochastic_labels,
        n_sft=args.n_sft,
        seed=args.seed,
    )
    world, pairs, audit, corpus = generate(spec)
    files = [out / "world.json", out / "pairs.jsonl", out / "audit.jsonl", out / "sft_corpus.jsonl"]
    files[0].write_text(json.dumps(world.params(), indent=2, sort_keys=True) + "\n")
    write_jsonl(pairs, files[1])
    write_audit(audit, files[2])
    write_corpus(corpus, files[3])
    n_flipped = sum(a.was_flipped for a in audit.values())
    write_manifest(out, args, started, files, n_pairs=len(pairs), n_flipped=n_flipped)
    print(f"wrote {len(pairs)} pairs ({n_flipped} flipped) to {out}")
    return 0


# -- sft -----------------------------------------------------------------------


def cmd_sft(args: argparse.Namespace) -> int:
    started = _now()
    corpus = read_corpus(args.corpus)
    vocab = Vocab(args.vocab) if args.vocab else _load_world(args.world).vocab
    policy = fit_sft(corpus, args.epochs, args.lr, vocab)
    out = prepare_out(resolve_out(args.out), args.force)
    path = out / "policy_sft.txt"
    save_policy(policy, path)
    write_manifest(out, args, started, [path], n_examples=len(corpus))
    print(f"wrote {path}")
    return 0


# -- train ---------------------------------------------------------------------


def build_config(args: argparse.Namespace, n: int, max_len: int) -> SeraConfig:
    variant = Variant(args.loss)
    beta = DEFAULT_BETA[variant] if args.beta is None else args.beta
    controls = SampleControls(args.temp, args.top_p, max_len, derive_seed(args.seed, "bootstrap"))
    return SeraConfig.from_proportions(
        n,
        args.select_prop,
        args.ktilde_prop,
        loss=LossKind(variant, beta),
        iterations=args.iters,
        gamma=args.gamma,
        bootstrap=BootstrapConfig(r_candidates=args.r_candidates, controls=controls),
        epochs_per_iter=args.epochs_per_iter,
        lr=args.lr,
        batch=args.batch,
        seed=args.seed,
    )


def _run_dir_layout(out: Path, n_iters: int) -> dict[str, list[Path]]:
    return {
        "snapshots": [out / "snapshots" / f"policy_t{t}.txt" for t in range(n_iters + 1)],
        "selected": [out / "selected" / f"selected_t{t}.txt" for t in range(1, n_iters + 1)],
    }


def train_run(args: argparse.Namespace, out: Path) -> list[Path]:
    """Run one SeRA training and write its directory; returns the artifact paths."""
    pairs = read_jsonl(args.pairs)
    sft = load_policy(args.sft)
    max_len = args.max_len
    if args.world is not None:
        max_len = _load_world(args.world).response_len_max
    try:
        cfg = build_config(args, len(pairs), max_len)
    except (ConfigError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    prepare_out(out, args.force, subdirs=("snapshots", "selected", "bootstrapped"))
    artifacts: list[Path] = []

    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps({**cfg.as_dict(), "n_offline": len(pairs)}, indent=2, sort_keys=True) + "\n")
    artifacts.append(cfg_path)
    save_policy(sft, out / "snapshots" / "policy_t0.txt")
    artifacts.append(out / "snapshots" / "policy_t0.txt")

    def on_iteration(history: PolicyHistory, report) -> None:
        t = report.t
        snap = out / "snapshots" / f"policy_t{t}.txt"
        save_policy(history.latest, snap)
        sel = out / "selected" / f"selected_t{t}.txt"
        write_selected(report.selected_ids, sel)
        artifacts.extend([snap, sel])
        if report.bootstrapped:
            bpath = out / "bootstrapped" / f"bootstrapped_t{t}.jsonl"
            write_jsonl(report.bootstrapped, bpath)
            artifacts.append(bpath)
        log.info("iteration %d: %d pairs, loss %.4f -> %.4f", t, report.dataset_size,
                 report.mean_loss_start, report.mean_loss_end)

    try:
        _, reports = run_sera(sft, pairs, [p.prompt for p in pairs], cfg, on_iteration)
    except ConfigError as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    rep = emit_report([r.row() for r in reports], out / "reports.tsv")
    artifacts.append(rep)
    return artifacts


def cmd_train(args: argparse.Namespace) -> int:
    started = _now()
    out = resolve_out(args.out)
    artifacts = train_run(args, out)
    cfg = json.loads((out / "config.json").read_text())
    write_manifest(out, args, started, artifacts, k=cfg["k"], k_tilde=cfg["k_tilde"], n_offline=cfg["n_offline"])
    print(f"run complete: {out}")
    return 0


# -- eval / analyze ----------------------------------------------------------


def load_history(run: Path) -> PolicyHistory:
    cfg_path = run / "config.json"
    if not cfg_path.is_file():
        raise CliError(f"not a run directory (missing {cfg_path})")
    n_iters = int(json.loads(cfg_path.read_text())["iterations"])
    expected = _run_dir_layout(run, n_iters)["snapshots"]
    missing = [str(p) for p in expected if not p.is_file()]
    if missing:
        raise CliError("missing snapshots: " + ", ".join(missing))
    return PolicyHistory(tuple(load_policy(p) for p in expected))


def final_selected(run: Path) -> set[int]:
    n_iters = int(json.loads((run / "config.json").read_text())["iterations"])
    path = _run_dir_layout(run, n_iters)["selected"][-1]
    if not path.is_file():
        raise CliError(f"missing selected set: {path}")
    return read_selected(path)


def cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    world = _load_world(args.world)
    history = load_history(args.run)
    prompts, controls = eval_setup(world, args.n_prompts, args.seed)
    baseline = load_history(args.baseline).latest if args.baseline else None
    rows = []
    for t in range(1, len(history)):
        opponents = [("sft", history[0])]
        if baseline is not None:
            opponents.append(("baseline", baseline))
        for name, opp in opponents:
            r = win_rate(world, history[t], opp, prompts, controls)
            rows.append({"t": t, "against": name, "wins": r.wins, "ties": r.ties, "losses": r.losses, "score": r.score})
    out = prepare_out(resolve_out(args.out), args.force)
    artifacts = [emit_report(rows, out / "winrate.tsv", ["t", "against", "wins", "ties", "losses", "score"])]
    if args.pairs is not None:
        pairs = read_jsonl(args.pairs)
        corr_rows = []
        for t in range(1, len(history)):
            for ref_name, ref in (("sft", 0), ("previous", t - 1)):
                c = reward_correlations(history, ref, pairs, world, policy_index=t)
                corr_rows.append(
                    {
                        "t": t,
                        "reference": ref_name,
                        "r2_gold": c.gold.r_squared,
                        "r2_length": c.length.r_squared,
                        "r2_margin": c.margin.r_squared,
                    }
                )
        artifacts.append(emit_report(corr_rows, out / "correlations.tsv"))
    write_manifest(out, args, started, artifacts)
    for row in rows:
        print(f"t={row['t']} vs {row['against']}: {row['score']:.4f}")
    return 0


def _sweep_subruns(root: Path) -> list[Path]:
    runs = sorted(p for p in root.iterdir() if p.is_dir() and (p / MANIFEST).is_file() and (p / "config.json").is_file())
    if not runs:
        raise CliError(f"no completed sub-runs under {root}")
    return runs


def curve_rows(runs: Sequence[Path], world, n_prompts: int, seed: int) -> list[dict[str, Any]]:
    """One row per run: its configuration and final gold win rate against its own SFT snapshot."""
    prompts, controls = eval_setup(world, n_prompts, seed)
    rows = []
    for run in runs:
        cfg = json.loads((run / "config.json").read_text())
        history = load_history(run)
        n = cfg["n_offline"]
        total = cfg["k"] + cfg["k_tilde"]
        rows.append(
            {
                "run": run.name,
                "k": cfg["k"],
                "k_tilde": cfg["k_tilde"],
                "generated_fraction": cfg["k_tilde"] / total if total else 0.0,
                "ktilde_over_n": cfg["k_tilde"] / n,
                "gamma": cfg["gamma"],
                "win_rate_vs_sft": win_rate(world, history.latest, history[0], prompts, controls).score,
            }
        )
    return rows


def cmd_analyze(args: argparse.Namespace) -> int:
    started = _now()
    runs = [Path(r) for r in args.runs]
    if args.sweep is not None:
        runs = runs + _sweep_subruns(args.sweep)
    if not runs:
        raise CliError("nothing to analyze: give run directories or --sweep DIR")
    labels = [r.name for r in runs]
    if len(set(labels)) != len(labels):
        labels = [str(r) for r in runs]
    sets = [final_selected(r) for r in runs]
    out = prepare_out(resolve_out(args.out), args.force)
    artifacts = [emit_matrix(labels, jaccard_matrix(sets), out / "jaccard.tsv")]
    if args.world is not None:
        rows = curve_rows(runs, _load_world(args.world), args.n_prompts, args.seed)
        artifacts.append(emit_report(rows, out / "curve.tsv"))
    write_manifest(out, args, started, artifacts, runs=[str(r) for r in runs])
    print(f"analyzed {len(runs)} run(s) into {out}")
    return 0


# -- sweep ---------------------------------------------------------------------


def sweep_settings(kind: str) -> list[tuple[str, dict[str, float]]]:
    if kind == "mix":
        return [(f"mix_{f:.2f}", {"select_prop": 1.0 - f, "ktilde_prop": f}) for f in MIX_FRACTIONS]
    if kind == "ktilde":
        return [(f"ktilde_{m:.2f}", {"ktilde_prop": m}) for m in KTILDE_PROPS]
    if kind == "gamma":
        return [(f"gamma_{g:.2f}", {"gamma": g}) for g in GAMMAS]
    raise CliError(f"unknown sweep kind {kind!r}")


def cmd_sweep(args: argparse.Namespace) -> int:
    started = _now()
    out = prepare_out(resolve_out(args.out), args.force)
    world = _load_world(args.world)
    runs = []
    for name, overrides in sweep_settings(args.kind):
        sub_args = argparse.Namespace(**{**vars(args), **overrides, "command": "train"})
        sub = out / name
        sub_started = _now()
        artifacts = train_run(sub_args, sub)
        write_manifest(sub, sub_args, sub_started, artifacts)
        runs.append(sub)
        log.info("sweep: finished %s", name)
    rows = curve_rows(runs, world, args.n_prompts, args.seed)
    curve = emit_report(rows, out / "curve.tsv")
    write_manifest(out, args, started, [curve, *(r / MANIFEST for r in runs)])
    for row in rows:
        print(f"{row['run']}: {row['win_rate_vs_sft']:.4f}")
    return 0


# -- argument parsing ----------------------------------------------------------


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _unit(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {s}")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0.0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {s}")
    return v


def _batch(s: str):
    if s.lower() == FULL:
        return FULL
    return _positive_int(s)


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    p.add_argument("--seed", type=_nonneg_int, default=0)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pairs", type=Path, required=True, help="preference pairs (JSONL)")
    p.add_argument("--sft", type=Path, required=True, help="SFT policy snapshot")
    p.add_argument("--world", type=Path, help="world.json; supplies the response length cap")
    p.add_argument("--max-len", type=_positive_int, default=6, help="response length cap when --world is absent")
    p.add_argument("--loss", choices=[v.value for v in Variant], default="dpo")
    p.add_argument("--beta", type=_positive_float, default=None, help="default: 0.2 dpo/slic/simpo, 1.0 ipo")
    p.add_argument("--iters", type=_positive_int, default=3)
    p.add_argument("--gamma", type=_unit, default=0.3)
    p.add_argument("--select-prop", type=_unit, default=0.7)
    p.add_argument("--ktilde-prop", type=_nonneg_float, default=0.3)
    p.add_argument("--r-candidates", type=int, default=4)
    p.add_argument("--temp", type=_positive_float, default=0.7)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--lr", type=_nonneg_float, default=0.05)
    p.add_argument("--epochs-per-iter", type=_positive_int, default=1)
    p.add_argument("--batch", type=_batch, default=64, help="mini-batch size or 'full'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sera", description="Self-reviewing preference alignment on tabular policies.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic world and preference data")
    _add_common(p)
    p.add_argument("--vocab", type=_positive_int, default=8)
    p.add_argument("--sharpness", type=_nonneg_float, default=1.0)
    p.add_argument("--prompt-len", type=_positive_int, default=2)
    p.add_argument("--max-len", type=_positive_int, default=6)
    p.add_argument("--n-pairs", type=_positive_int, default=2000)
    p.add_argument("--flip-rate", type=_unit, default=0.0)
    p.add_argument("--length-bias-rate", type=_unit, default=0.0)
    p.add_argument("--stochastic-labels", action="store_true")
    p.add_argument("--n-sft", type=_positive_int, default=2000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("sft", help="fit the SFT policy")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--vocab", type=_positive_int)
    g.add_argument("--world", type=Path)
    p.add_argument("--epochs", type=_nonneg_int, default=200)
    p.add_argument("--lr", type=_positive_float, default=0.3)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("train", help="run SeRA training")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="gold win rates for a run")
    _add_common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--baseline", type=Path, help="another run; its final policy is compared against")
    p.add_argument("--pairs", type=Path, help="pairs for the implicit-reward R^2 tables")
    p.add_argument("--n-prompts", type=_positive_int, default=2000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="Jaccard matrices and sweep curves")
    _add_common(p)
    p.add_argument("runs", nargs="*", help="run directories")
    p.add_argument("--sweep", type=Path, help="directory whose sub-runs form one curve")
    p.add_argument("--world", type=Path, help="world.json; adds a win-rate curve table")
    p.add_argument("--n-prompts", type=_positive_int, default=2000)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="k/k_tilde mix, k_tilde or gamma sweep")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    p.add_argument("--n-prompts", type=_positive_int, default=2000)
    p.set_defaults(func=cmd_sweep)
    return parser


def _check_contradictions(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if getattr(args, "r_candidates", 2) < 2:
        parser.error("--r-candidates must be >= 2")
    top_p = getattr(args, "top_p", 1.0)
    if not 0.0 < top_p <= 1.0:
        parser.error(f"--top-p must lie in (0, 1], got {top_p}")
    if getattr(args, "command", None) == "train":
        if args.iters >= 2 and args.select_prop == 0 and args.ktilde_prop == 0:
            parser.error("--select-prop 0 with --ktilde-prop 0 leaves later iterations without data")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_contradictions(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
