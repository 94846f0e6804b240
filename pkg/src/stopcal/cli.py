"""Command-line entry point: ``stopcal <subcommand> ...``.

Every subcommand accepts ``--config FILE.json`` (keys are option names with
dashes or underscores; for ``simulate`` and ``coverage`` any remaining keys
are simulator settings) and ``--seed`` (unsigned 64-bit).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

from .evaluate import calibration_report, coverage_rows, crop_baseline, efficiency_curve, write_csv
from .features import DEFAULT_PCA_DIM, DEFAULT_WINDOW, SmoothingSpec, fit_pca_clamped, load_pca, save_pca
from .monitor import MonitorTerminated, serve
from .probes import (
    PROBE_KINDS,
    SCORER_MODES,
    CombinedScorer,
    ProbeHyper,
    load_probe,
    resolve_pca_path,
    save_probe,
    train_probe,
)
from .risk import (
    LOSS_FORMS,
    LambdaGrid,
    RiskSpec,
    calibrate_fixed_sequence,
    git_blob_hash,
    load_calibration,
    save_calibration,
)
from .sim import PROBES_FOR_MODE, SimConfig, coverage_experiment, generate, save_simulation
from .traces import SPLITS, load_traceset, segment_thoughts

_SIM_FIELDS = {f.name for f in fields(SimConfig)}


class CliError(Exception):
    """Bad input detected after argument parsing; exit code 2."""


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _rel(path: Path, base: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(base).resolve().parent)


# ---------------------------------------------------------------------------
# subcommands


def cmd_segment(args) -> int:
    text = Path(args.input).read_text(encoding="utf-8") if args.input != "-" else sys.stdin.read()
    steps = segment_thoughts(text)
    payload = json.dumps(steps, ensure_ascii=False, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    return 0


def cmd_featurize(args) -> int:
    train = load_traceset(args.traces, "train")
    if not len(train):
        raise CliError("featurize: training trace file is empty")
    model = fit_pca_clamped(train.stacked_embeddings(), args.dim)
    save_pca(model, args.out)
    print(f"PCA {model.input_dim} -> {model.output_dim} written to {args.out}")
    return 0


def cmd_train_probe(args) -> int:
    train = load_traceset(args.traces, "train")
    pca = load_pca(args.pca)
    hyper = ProbeHyper(args.lr, args.epochs, args.l2, not args.no_class_balance)
    probe = train_probe(args.kind, train, pca, hyper, pca_ref=_rel(args.pca, args.out))
    save_probe(probe, args.out)
    print(f"{args.kind} probe: train AUROC {probe.train_meta['train_auroc']:.4f}, "
          f"loss {probe.train_meta['initial_loss']:.4f} -> {probe.train_meta['final_loss']:.4f}")
    return 0


def _load_scorer(mode: str, probe_paths: Sequence[str], window: int):
    """Build a scorer from probe files; returns ``(scorer, pca, pca_path, probe_paths)``."""
    probes, pca_path = {}, None
    for path in probe_paths:
        probe = load_probe(path)
        if probe.kind in probes:
            raise CliError(f"two probes of kind {probe.kind!r}")
        probes[probe.kind] = (probe, path)
        ref = resolve_pca_path(path, probe)
        if ref is None:
            raise CliError(f"probe {path} does not reference a PCA file")
        if pca_path is not None and ref.resolve() != pca_path.resolve():
            raise CliError("probes reference different PCA files")
        pca_path = ref
    needed = set(PROBES_FOR_MODE[mode])
    if needed - set(probes):
        raise CliError(f"mode {mode!r} needs probe kind(s) {sorted(needed - set(probes))}")
    scorer = CombinedScorer(mode, {k: probes[k][0] for k in needed}, SmoothingSpec(window))
    return scorer, load_pca(pca_path), pca_path, {k: probes[k][1] for k in needed}


def cmd_calibrate(args) -> int:
    cal = load_traceset(args.traces, "calibration")
    scorer, pca, pca_path, probe_paths = _load_scorer(args.mode, args.probe, args.window)
    grid = LambdaGrid(tuple(args.grid)) if args.grid else LambdaGrid.default()
    spec = RiskSpec(args.mode, args.delta, args.epsilon, args.loss_form, args.pvalue_rate)
    out = Path(args.out)
    meta = {
        "window": args.window,
        "probes": {k: _rel(p, out) for k, p in sorted(probe_paths.items())},
        "probe_hashes": {k: git_blob_hash(Path(p).read_bytes()) for k, p in sorted(probe_paths.items())},
        "pca": _rel(pca_path, out),
        "pca_hash": git_blob_hash(Path(pca_path).read_bytes()),
    }
    result = calibrate_fixed_sequence(cal, scorer, pca, grid, spec, meta)
    save_calibration(result, out)
    lam = "NONE" if result.selected_lambda is None else f"{result.selected_lambda:g}"
    print(f"selected lambda {lam} after testing {len(result.p_values)} of {len(grid)} thresholds")
    return 0


def _scorer_from_calibration(path):
    result = load_calibration(path)
    base = Path(path).parent
    for key in ("probes", "window"):
        if key not in result.meta:
            raise CliError(f"calibration {path} lacks {key!r}; rerun calibrate")
    probe_paths = [base / p for p in result.meta["probes"].values()]
    for kind, p in result.meta["probes"].items():
        expected = result.meta.get("probe_hashes", {}).get(kind)
        if expected is not None and git_blob_hash((base / p).read_bytes()) != expected:
            raise CliError(f"probe {base / p} changed since calibration (hash mismatch)")
    scorer, pca, _, _ = _load_scorer(result.spec.mode, probe_paths, int(result.meta["window"]))
    return result, scorer, pca


def cmd_monitor(args) -> int:
    result, scorer, pca = _scorer_from_calibration(args.calibration)
    serve(scorer, pca, result.selected_lambda, args.budget, sys.stdin, sys.stdout, args.token_ceiling)
    return 0


def _sim_config(args) -> SimConfig:
    doc = dict(args.sim_overrides)
    if args.seed is not None:
        doc["seed"] = args.seed
    return SimConfig.from_dict(doc)


def cmd_simulate(args) -> int:
    config = _sim_config(args)
    if args.n_traces is not None:
        config = replace(config, n_traces=args.n_traces)
    traces = generate(config, args.split, start=args.start)
    truth = save_simulation(traces, args.out)
    print(f"{len(traces)} traces written to {args.out} (ground truth in {truth})")
    return 0


def cmd_evaluate(args) -> int:
    test = load_traceset(args.traces, "test")
    loaded = [_scorer_from_calibration(p) for p in args.calibration]
    rows = []
    if args.crop_budgets:
        rows.extend(crop_baseline(test, args.crop_budgets, args.outcome))
    by_mode = {}
    for result, scorer, pca in loaded:
        by_mode.setdefault(result.spec.mode, (scorer, pca, []))[2].append(result)
    for scorer, pca, results in by_mode.values():
        rows.extend(efficiency_curve(test, scorer, pca, results, args.outcome))
    write_csv(rows, args.out)
    print(f"{len(rows)} curve points written to {args.out}")
    if args.report:
        report = []
        for scorer, pca, results in by_mode.values():
            report.extend(calibration_report(test, scorer, pca, results))
        write_csv(sorted(report, key=lambda r: r.epsilon), args.report)
        print(f"{len(report)} calibration rows written to {args.report}")
    return 0


def cmd_coverage(args) -> int:
    config = _sim_config(args)
    spec = RiskSpec(args.mode, args.delta, args.epsilons[0], args.loss_form, args.pvalue_rate)

    def progress(done, total):
        if args.verbose:
            print(f"repeat {done}/{total}", file=sys.stderr)

    report = coverage_experiment(
        config, spec, args.repeats, args.epsilons,
        n_train=args.n_train, n_cal=args.n_cal, n_test=args.n_test,
        hyper=ProbeHyper(args.lr, args.epochs, args.l2, True),
        pca_dim=args.dim, window=args.window, progress=progress,
    )
    write_csv(list(report.rows), args.out)
    if args.report:
        write_csv(coverage_rows(report), args.report)
    for row in report.rows:
        status = "ok" if row.passes else "VIOLATED"
        print(f"eps={row.epsilon:g}: violations {row.violations}/{row.repeats} "
              f"(bound {row.bound:.4f}) {status}")
    return 0 if all(r.passes for r in report.rows) else 1


# ---------------------------------------------------------------------------
# parser


def _add_risk_options(p, with_epsilon: bool = True) -> None:
    p.add_argument("--mode", choices=SCORER_MODES, default="consistent")
    p.add_argument("--delta", type=float, default=0.1, help="risk level")
    if with_epsilon:
        p.add_argument("--epsilon", type=float, default=0.1, help="error level of the test")
    p.add_argument("--loss-form", choices=LOSS_FORMS, default="hard_indicator")
    p.add_argument("--pvalue-rate", choices=("delta", "epsilon"), default="delta")


def _add_probe_options(p) -> None:
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--l2", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults")
    common.add_argument("--seed", type=_seed, default=None, help="unsigned 64-bit seed")

    parser = argparse.ArgumentParser(prog="stopcal", description="Risk-controlled early stopping for reasoning traces.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("segment", parents=[common], help="split raw thought text into steps")
    p.add_argument("input", help="UTF-8 text file, or - for stdin")
    p.add_argument("-o", "--out", help="JSON output (default stdout)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("featurize", parents=[common], help="fit PCA on training embeddings")
    p.add_argument("--traces", required=True)
    p.add_argument("--dim", type=int, default=DEFAULT_PCA_DIM)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train-probe", parents=[common], help="train one linear probe")
    p.add_argument("--traces", required=True)
    p.add_argument("--pca", required=True)
    p.add_argument("--kind", choices=PROBE_KINDS, required=True)
    _add_probe_options(p)
    p.add_argument("--no-class-balance", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_probe)

    p = sub.add_parser("calibrate", parents=[common], help="select a stopping threshold")
    p.add_argument("--traces", required=True, help="calibration split")
    p.add_argument("--probe", action="append", required=True, help="probe file (repeat for novel_leaf)")
    _add_risk_options(p)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--grid", type=_floats, help="comma-separated descending thresholds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("monitor", parents=[common], help="serve stop decisions over stdin/stdout")
    p.add_argument("--calibration", required=True)
    p.add_argument("--budget", type=int, required=True, help="maximum steps per stream")
    p.add_argument("--token-ceiling", type=int)
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("simulate", parents=[common], help="generate synthetic traces")
    p.add_argument("--n-traces", type=int)
    p.add_argument("--start", type=int, default=0, help="index of the first trace")
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="budget curves and calibration reports")
    p.add_argument("--traces", required=True, help="test split")
    p.add_argument("--calibration", action="append", required=True)
    p.add_argument("--crop-budgets", type=_ints, default=[])
    p.add_argument("--outcome", choices=("correct", "consistent"), default="consistent")
    p.add_argument("--out", required=True, help="budget curve CSV")
    p.add_argument("--report", help="calibration report CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("coverage", parents=[common], help="repeated-draw risk-control experiment")
    _add_risk_options(p, with_epsilon=False)
    p.add_argument("--epsilons", type=_floats, default=[0.05, 0.1, 0.2, 0.5])
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-cal", type=int, default=450)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--dim", type=int, default=DEFAULT_PCA_DIM)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    _add_probe_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="summary CSV in calibration-report layout")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_coverage)
    return parser


def _apply_config(parser, argv: list) -> argparse.Namespace:
    args = parser.parse_args(argv)
    args.sim_overrides = {}
    if not args.config:
        return args
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise CliError(f"{args.config}: config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions} - {"help", "config"}
    defaults, sim = {}, {}
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if dest in dests:
            defaults[dest] = value
        elif args.command in ("simulate", "coverage") and key in _SIM_FIELDS:
            sim[key] = value
        else:
            raise CliError(f"{args.config}: unknown key {key!r} for {args.command}")
    # command-line flags win over the file
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    args.sim_overrides = sim
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        with warnings.catch_warnings():
            warnings.simplefilter("always", UserWarning)
            return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except CliError as exc:
        print(f"stopcal: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, MonitorTerminated, json.JSONDecodeError) as exc:
        print(f"stopcal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
