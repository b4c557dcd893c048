"""Command-line driver: generate, augment, train-base, evaluate, report.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import models
from .data import BROKEN, generate_synthetic, load_dataset, load_ncm_records, save_channel_table, save_ncm_records
from .ensemble import stratified_split
from .errors import ContractViolation, ParseError, TrainingDegeneracyError, ValidationError
from .pipeline import (
    CNN_DEFAULTS,
    FCN_DEFAULTS,
    EvalReport,
    RunConfig,
    format_scores_csv,
    format_tables,
    run_pipeline,
    synthetic_from_dict,
    write_report,
)
from .preprocessing import balance_to_ratio, fit_matrix_normalizer, fit_normalizer

log = logging.getLogger("coilstack")

CHANNEL_FILE = "channels.csv"
NCM_FILE = "ncms.csv"


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _fraction(text):
    v = float(text)
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _open_ratio(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    return doc


def _build_run_config(args):
    """Config file first, then flags on top."""
    doc = _read_config(args.config)
    synth = doc.get("synthetic", {})
    synth = None if synth is None else dict(synth)
    for flag, key in (("coils", "coils"), ("broken_fraction", "broken_fraction"), ("events", "channel_events_per_coil"),
                      ("ncms_per_coil", "ncm_per_coil")):
        v = getattr(args, flag, None)
        if v is not None:
            synth = synth if synth is not None else {}
            synth[key] = v
    if args.seed is not None:
        doc["seed"] = args.seed
        if synth is not None:
            synth["seed"] = args.seed
    if args.channels or args.ncms:
        if not (args.channels and args.ncms):
            raise UsageError("--channels and --ncms must be given together")
        doc["channel_path"], doc["ncm_path"] = str(args.channels), str(args.ncms)
        synth = None
    doc["synthetic"] = synth
    if args.k is not None:
        doc["k"] = args.k
    if args.cnn_variant == "all":
        doc["cnn_variants"] = list(models.CNN_VARIANTS)
        doc.setdefault("stack_cnn", "cnn2")
    elif args.cnn_variant is not None:
        doc["cnn_variants"] = [args.cnn_variant]
        doc["stack_cnn"] = args.cnn_variant
    if args.no_augment:
        doc["augment"] = False
    if args.target_ratio is not None:
        doc["target_ratio"] = args.target_ratio
    if args.jobs is not None:
        doc["jobs"] = args.jobs
    try:
        return RunConfig.from_dict(doc)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc.args[0]!r}") from None
    except (TypeError, ContractViolation) as exc:
        raise UsageError(f"invalid config: {exc}") from None


# ------------------------------------------------------------------ commands


def cmd_generate(args):
    doc = _read_config(args.config)
    spec_doc = dict(doc.get("synthetic", doc))
    for flag, key in (("coils", "coils"), ("broken_fraction", "broken_fraction"), ("seed", "seed"),
                      ("events", "channel_events_per_coil"), ("ncms_per_coil", "ncm_per_coil")):
        v = getattr(args, flag)
        if v is not None:
            spec_doc[key] = v
    try:
        spec = synthetic_from_dict(spec_doc)
    except KeyError as exc:
        raise UsageError(f"unknown config key {exc.args[0]!r}") from None
    except ContractViolation as exc:
        raise UsageError(str(exc)) from None
    ds = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_channel_table(ds.channel_samples(), out / CHANNEL_FILE)
    save_ncm_records(ds.ncm_samples(), out / NCM_FILE)
    labels = ds.coil_labels()
    n_broken = sum(v == BROKEN for v in labels.values())
    print(f"coils {len(labels)} broken {n_broken} channel_rows {len(ds.features)} ncms {len(ds.matrices)}")
    print(f"wrote {out / CHANNEL_FILE} {out / NCM_FILE}")
    return 0


def _ratio(samples):
    return sum(s.label == BROKEN for s in samples) / len(samples) if samples else 0.0


def cmd_augment(args):
    samples = load_ncm_records(args.input)
    before = _ratio(samples)
    print(f"before: {len(samples)} matrices, broken ratio {before:.4f}")
    if not any(s.label == BROKEN for s in samples):
        log.error("no broken matrices to augment")
        return 1
    if before >= args.target_ratio and not args.full_expansion:
        if Path(args.input).resolve() != Path(args.output).resolve():
            shutil.copyfile(args.input, args.output)
        print(f"after: unchanged, ratio already at or above {args.target_ratio}")
        return 0
    out = balance_to_ratio(samples, args.target_ratio, np.random.default_rng(args.seed), args.full_expansion)
    save_ncm_records(out, args.output, with_provenance=True)
    load_ncm_records(args.output)  # revalidate what was written
    print(f"after: {len(out)} matrices ({len(out) - len(samples)} augmented), broken ratio {_ratio(out):.4f}")
    return 0


def cmd_train_base(args):
    ds = load_dataset(args.channels, args.ncms)
    labels = ds.coil_labels()
    ids = sorted(labels)
    rng = np.random.default_rng(args.seed)
    tune_ids, base_ids = stratified_split(ids, [labels[c] for c in ids], args.tune_fraction, rng)
    base, tune = ds.subset(base_ids), ds.subset(tune_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wanted = ["fcn"] + (list(models.CNN_VARIANTS) if args.cnn_variant == "all" else [args.cnn_variant])
    for name in wanted:
        if name == "fcn":
            cfg = replace(FCN_DEFAULTS, seed=args.seed, **_epochs(args))
            model = models.train(models.build_fcn(), (base.features, base.channel_label),
                                 (tune.features, tune.channel_label), cfg, normalizer=fit_normalizer(base.features))
        else:
            cfg = replace(CNN_DEFAULTS, seed=args.seed, **_epochs(args))
            train_ncms = list(base.ncm_samples())
            if not args.no_augment:
                train_ncms = balance_to_ratio(train_ncms, args.target_ratio, np.random.default_rng(args.seed))
            aug = base.with_ncms(train_ncms)
            model = models.train(models.build_cnn(name), (aug.matrices[:, None], aug.ncm_label),
                                 (tune.matrices[:, None], tune.ncm_label), cfg,
                                 normalizer=fit_matrix_normalizer(base.matrices))
        path = out / f"{name}.npz"
        models.save_model(model, path)
        print(f"{name}: best epoch {model.best_epoch} of {len(model.history)} -> {path}")
    return 0


def _epochs(args):
    return {} if args.epochs is None else {"max_epochs": args.epochs}


def cmd_evaluate(args):
    cfg = _build_run_config(args)
    report = run_pipeline(cfg)
    paths = write_report(report, args.out)
    sys.stdout.write(format_tables(report))
    for p in paths.values():
        log.info("wrote %s", p)
    if report.failures:
        log.error("%d of %d folds failed", len(report.failures), len(report.per_fold))
        return 1
    return 0


def cmd_report(args):
    with open(args.report, encoding="utf-8") as fh:
        report = EvalReport.from_dict(json.load(fh))
    if args.format == "text":
        sys.stdout.write(format_tables(report))
    elif args.format == "csv":
        sys.stdout.write(format_scores_csv(report))
    else:
        sys.stdout.write(report.to_json())
    return 0


# -------------------------------------------------------------------- parser


def _add_synthetic_flags(p):
    p.add_argument("--coils", type=_positive_int, help="number of synthetic coils")
    p.add_argument("--broken-fraction", type=_fraction, help="prior probability that a coil is broken")
    p.add_argument("--events", type=int, help="channel measurement events per coil")
    p.add_argument("--ncms-per-coil", type=int, help="noise covariance matrices per coil")


def build_parser():
    parser = argparse.ArgumentParser(prog="coilstack", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic channel table and NCM table")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with generator settings")
    p.add_argument("--seed", type=int)
    _add_synthetic_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("augment", help="balance an NCM table with permuted copies of broken matrices")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--target-ratio", type=_open_ratio, default=0.2)
    p.add_argument("--full-expansion", action="store_true", help="add every broken matrix's N-1 permutations")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-base", help="train the FCN and CNN base learners on all coils")
    p.add_argument("--channels", required=True)
    p.add_argument("--ncms", required=True)
    p.add_argument("--out", required=True, help="directory for model checkpoints")
    p.add_argument("--cnn-variant", default="cnn2", choices=list(models.CNN_VARIANTS) + ["all"])
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--target-ratio", type=_open_ratio, default=0.2)
    p.add_argument("--tune-fraction", type=_open_ratio, default=0.3)
    p.add_argument("--epochs", type=int, help="override max epochs for every model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("evaluate", help="cross-validate base learners and the stack; write report files")
    p.add_argument("--out", required=True, help="directory for report.json, report.txt, scores.csv")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--channels", help="channel table (with --ncms, replaces the generator)")
    p.add_argument("--ncms", help="NCM table")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="number of folds")
    p.add_argument("--cnn-variant", choices=list(models.CNN_VARIANTS) + ["all"])
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--target-ratio", type=_open_ratio)
    p.add_argument("--jobs", type=_positive_int, help="folds run in parallel")
    _add_synthetic_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print a saved report as text, csv or json")
    p.add_argument("report", help="path to report.json")
    p.add_argument("--format", choices=["text", "csv", "json"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ParseError, ValidationError, ContractViolation, TrainingDegeneracyError) as exc:
        log.error("%s", exc)
        return 1
