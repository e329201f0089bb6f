"""Command-line interface.

Subcommands: `simulate` (scenario -> dataset), `train` (dataset -> model
bundle), `infer` (bundle + dataset -> per-step CSV), `evaluate` (nested-CV
comparison -> AUC/ROC/alpha-sweep CSVs), `features` (dataset -> feature
matrix CSV).  Exit codes: 0 success, 1 usage error, 2 data error; errors are
printed to stderr with a machine-parseable prefix.  The SLDSMON_OUT
environment variable supplies a default output directory.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .dataio import (
    DataFormatError,
    load_bundle,
    load_dataset,
    load_scenario,
    save_bundle,
    save_dataset,
)
from .evaluation import (
    EvalConfig,
    GridSpec,
    build_fold_plan,
    evaluate_models,
    write_evaluation_outputs,
)
from .features import WindowSpec, feature_matrix, write_features_csv
from .simulate import simulate
from .train import TrainConfig, run_model, train_bundle

USAGE_PREFIX = "sldsmon:error:usage:"
DATA_PREFIX = "sldsmon:error:data:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors must be 1
        raise UsageError(message)


def _default_out(value, fallback_name):
    if value:
        return value
    base = os.environ.get("SLDSMON_OUT")
    if base:
        return os.path.join(base, fallback_name)
    raise UsageError("--out is required (or set SLDSMON_OUT)")


def _int_list(text):
    return tuple(int(v) for v in text.split(","))


def build_parser() -> _Parser:
    parser = _Parser(prog="sldsmon", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("simulate", parents=[], add_help=True,
                       help="sample an annotated dataset from a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--patients", type=int)
    p.add_argument("--length", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit dynamics and classifiers into a bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", required=True,
                   help="scenario/config file carrying the factor declarations")
    p.add_argument("--out")
    p.add_argument("--patients", help="comma-separated patient ids (default: all)")
    p.add_argument("--trees", type=int, default=50)
    p.add_argument("--l", type=int, default=9)
    p.add_argument("--r", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--em", type=int, default=8)
    p.add_argument("--stable-d", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="filter one patient with a trained bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--out")
    p.add_argument("--model", choices=("dslds", "fslds", "mixture"), default="dslds")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--lag", type=int, default=None,
                   help="future context r; outputs trail by this many steps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="nested-CV comparison of the three models")
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trees-set", type=_int_list, default=(10, 25, 50, 100, 200))
    p.add_argument("--l-set", type=_int_list, default=(4, 9, 14, 19, 29, 49))
    p.add_argument("--r-set", type=_int_list, default=(0, 5, 10))
    p.add_argument("--stable-d", type=int, default=None)
    p.add_argument("--stride", type=int, default=2)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("features", help="export the feature matrix for one patient")
    p.add_argument("--data", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--out")
    p.add_argument("--l", type=int, default=9)
    p.add_argument("--r", type=int, default=0)
    p.set_defaults(func=cmd_features)
    return parser


def cmd_simulate(args) -> int:
    scen = load_scenario(args.scenario)
    if args.seed is not None or args.patients is not None or args.length is not None:
        from dataclasses import replace

        scen = replace(
            scen,
            seed=scen.seed if args.seed is None else args.seed,
            n_patients=scen.n_patients if args.patients is None else args.patients,
            length=scen.length if args.length is None else args.length,
        )
    out = _default_out(args.out, "dataset")
    dataset = simulate(scen)
    save_dataset(dataset, out)
    print(f"wrote {len(dataset.patient_ids)} patients to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    scen = load_scenario(args.scenario)
    patients = args.patients.split(",") if args.patients else list(dataset.patient_ids)
    unknown = [p for p in patients if p not in dataset.patients]
    if unknown:
        raise DataFormatError(f"unknown patients: {', '.join(unknown)}")
    cfg = TrainConfig(
        l=args.l, r=args.r, n_trees=args.trees, train_stride=args.stride,
        em_iterations=args.em, alpha=args.alpha, stable_d=args.stable_d,
    )
    bundle = train_bundle(dataset, patients, scen.factors, cfg)
    out = _default_out(args.out, "model.bundle")
    save_bundle(bundle, out)
    print(f"wrote bundle to {out}")
    return 0


def cmd_infer(args) -> int:
    bundle = load_bundle(args.bundle)
    dataset = load_dataset(args.data)
    if args.patient not in dataset.patients:
        raise DataFormatError(f"unknown patient {args.patient!r}")
    output = run_model(
        bundle, dataset, args.patient, model=args.model,
        alpha=args.alpha, lag=args.lag,
    )
    out = _default_out(args.out, f"{args.patient}_{args.model}.csv")
    output.write_csv(out)
    print(f"wrote {len(output.times)} steps to {out}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    scen = load_scenario(args.scenario)
    out = _default_out(args.out, "evaluation")
    plan = build_fold_plan(list(dataset.patient_ids), P=args.folds, seed=args.seed)
    cfg = EvalConfig(
        factor_configs=scen.factors,
        grid=GridSpec(tuple(args.trees_set), tuple(args.l_set), tuple(args.r_set)),
        stable_d=args.stable_d,
        train_stride=args.stride,
        out_dir=out,
    )
    results = evaluate_models(dataset, plan, cfg)
    write_evaluation_outputs(results, out, cfg, plan)
    table = results["auc_table"]
    factors = results["factor_names"]
    print("AUC," + ",".join(factors))
    for model in ("dslds", "fslds", "mixture"):
        print(model + "," + ",".join(f"{table[model][f]:.3f}" for f in factors))
    return 0


def cmd_features(args) -> int:
    dataset = load_dataset(args.data)
    if args.patient not in dataset.patients:
        raise DataFormatError(f"unknown patient {args.patient!r}")
    rec = dataset.patients[args.patient]
    X, schema = feature_matrix(rec.vitals, WindowSpec(args.l, args.r),
                               dataset.channel_names)
    out = _default_out(args.out, f"{args.patient}_features.csv")
    write_features_csv(out, X, schema)
    print(f"wrote {X.shape[0]} x {X.shape[1]} feature matrix to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{USAGE_PREFIX} {exc}", file=sys.stderr)
        return 1
    if not getattr(args, "func", None):
        print(f"{USAGE_PREFIX} missing subcommand (try --help)", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{USAGE_PREFIX} {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"{DATA_PREFIX} {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"{DATA_PREFIX} {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
