"""Command line entry point: ``corrprior {generate,train,infer,evaluate,modes}``.

Exit codes: 0 success, 2 input error, 3 missing upstream artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("corrprior")


class InputError(Exception):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_generate(args) -> int:
    from .cohort import SyntheticSpec, generate_synthetic

    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        spec["seed"] = args.seed
    if args.n_samples is not None:
        spec["n_samples"] = args.n_samples
    manifest = generate_synthetic(SyntheticSpec.from_dict(spec), args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_config
    from .pipeline import PHASE_DIRS, prepare_data, run_phase

    overrides = list(args.set)
    if args.cohort:
        overrides.append(f"data.cohort={json.dumps(args.cohort)}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides, args.preset)
    run_dir = Path(args.runs_dir) / args.name
    phases = ["surface", "align", "refine"] if args.phase == "all" else [args.phase]
    if args.phase == "all" and args.with_baseline:
        phases.append("baseline")
    data = prepare_data(cfg)
    for phase in phases:
        result = run_phase(run_dir, phase, data, cfg)
        print(f"{phase}\t{run_dir / PHASE_DIRS[phase]}\tbest_val_cd={result.best_val_cd!r}\tepoch={result.best_epoch}")
    return EXIT_OK


def _image_paths(spec) -> list:
    paths = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.nrrd")))
        elif p.exists():
            paths.append(p)
        else:
            raise InputError(f"image {p} does not exist")
    if not paths:
        raise InputError("no .nrrd images found")
    return paths


def cmd_infer(args) -> int:
    from .cohort import normalize_image
    from .formats import read_nrrd
    from .nets import load_checkpoint
    from .pipeline import write_predictions
    from .training import infer

    net, manifest = load_checkpoint(args.checkpoint)
    method = args.normalization or manifest.get("config", {}).get("data", {}).get("normalization", "zscore")
    paths = _image_paths(args.images)
    shape = tuple(net.config.image_shape)
    images, ids = [], []
    for p in paths:
        vol, _ = read_nrrd(p)
        if vol.shape != shape:
            raise InputError(f"{p}: volume shape {vol.shape} does not match the network input {shape}")
        images.append(normalize_image(vol, method))
        ids.append(p.name[:-len(".nrrd")] if p.name.endswith(".nrrd") else p.stem)
    pred = infer(net, np.stack(images))
    for path in write_predictions(args.out, ids, pred):
        print(path)
    return EXIT_OK


def _read_predictions(pred_dir) -> dict:
    from .formats import read_particles

    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise InputError(f"prediction directory {pred_dir} does not exist")
    return {p.name[:-len(".particles")]: read_particles(p) for p in sorted(pred_dir.glob("*.particles"))}


def _cohort_for(args):
    from .cohort import load_cohort

    manifest = Path(args.cohort)
    split_file = args.splits
    if split_file is None and (manifest.parent / "splits.csv").exists():
        split_file = manifest.parent / "splits.csv"
    return load_cohort(manifest, tuple(args.split_fractions), args.split_seed, split_file, validate=False)


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_cohort

    cohort = _cohort_for(args)
    preds = _read_predictions(args.pred)
    unknown = sorted(set(preds) - set(cohort.ids))
    if unknown:
        raise InputError(f"predictions without a cohort sample: {unknown}")
    if args.train_pred:
        train_preds = _read_predictions(args.train_pred)
        bad = sorted(set(train_preds) - set(cohort.ids))
        if bad:
            raise InputError(f"training predictions without a cohort sample: {bad}")
    else:
        train_preds = preds
    eval_ids = cohort.split_ids(args.split)
    train_ids = cohort.split_ids("train")
    for name, need, have in (("evaluation", eval_ids, preds), ("training", train_ids, train_preds)):
        missing = [i for i in need if i not in have]
        if missing:
            raise InputError(f"{name} samples without a prediction: {missing}")
    report = evaluate_cohort(
        [preds[i] for i in eval_ids], [cohort.load_mesh(i) for i in eval_ids],
        [train_preds[i] for i in train_ids], ids=eval_ids,
        train_meshes=[cohort.load_mesh(i) for i in train_ids], variance=args.variance,
        n_specificity=args.specificity_samples, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    report.write_csv(out.with_suffix(".csv"))
    print(f"cd={report.cd['mean']!r} p2m={report.p2m['mean']!r} s2s={report.s2s['mean']!r} "
          f"compactness={report.compactness} specificity={report.specificity!r} "
          f"generalization={report.generalization!r}")
    return EXIT_OK


def cmd_modes(args) -> int:
    from .formats import write_particles
    from .metrics import export_modes, fit_pca

    if args.pred:
        preds = _read_predictions(args.pred)
        sets = list(preds.values())
    elif args.checkpoint:
        if not args.cohort:
            raise InputError("--checkpoint needs --cohort to predict the training images")
        from .nets import load_checkpoint
        from .training import infer

        cohort = _cohort_for(args)
        net, _ = load_checkpoint(args.checkpoint)
        sets = list(infer(net, np.stack([cohort.load_image(i) for i in cohort.split_ids("train")])))
    else:
        raise InputError("pass --pred or --checkpoint")
    if len(sets) < 2:
        raise InputError(f"mode export needs at least two correspondence sets, got {len(sets)}")
    try:
        model = fit_pca(sets, args.variance)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.k > model.n_components_:
        raise InputError(f"asked for {args.k} modes but the model retains {model.n_components_}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for mode in range(args.k):
        for s, points, magnitude in export_modes(model, mode, args.stds):
            stem = f"mode{mode + 1}_{s:+g}sd"
            write_particles(out / f"{stem}.particles", points)
            np.savetxt(out / f"{stem}.scalars", magnitude, fmt="%.17g")
    (out / "modes.json").write_text(json.dumps({
        "n_modes": args.k, "stds": list(args.stds),
        "eigenvalues": [float(x) for x in model.explained_variance_[:args.k]],
        "cumulative_variance": [float(x) for x in model.cumulative_variance_[:args.k]],
    }, indent=2))
    print(out)
    return EXIT_OK


def _add_cohort_args(p, required=True):
    p.add_argument("--cohort", required=required, help="cohort manifest.csv")
    p.add_argument("--splits", default=None, help="split CSV (id,split); defaults to splits.csv next to the manifest")
    p.add_argument("--split-fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrprior", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the synthetic ellipsoid cohort")
    p.add_argument("--spec", help="JSON file with synthetic cohort parameters")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-samples", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training phase or all of them")
    p.add_argument("--phase", choices=["surface", "align", "refine", "baseline", "all"], default="all")
    p.add_argument("--config", help="JSON config with data/model/train/eval sections")
    p.add_argument("--cohort", help="shortcut for --set data.cohort=PATH")
    p.add_argument("--name", default="default", help="run name; outputs go to RUNS_DIR/NAME")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--preset", choices=["default", "desk"], default="default")
    p.add_argument("--seed", type=int)
    p.add_argument("--with-baseline", action="store_true", help="with --phase all, also train the no-prior baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict correspondences from images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, nargs="+", help=".nrrd files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--normalization", choices=["zscore", "minmax"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predictions against cohort meshes")
    p.add_argument("--pred", required=True, help="directory of <id>.particles")
    p.add_argument("--train-pred", help="training-split predictions if not in --pred")
    _add_cohort_args(p)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", required=True, help="report JSON; a per-sample CSV is written alongside")
    p.add_argument("--variance", type=float, default=0.95)
    p.add_argument("--specificity-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("modes", help="export PCA mode sweeps")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--pred")
    src.add_argument("--checkpoint")
    _add_cohort_args(p, required=False)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--stds", type=float, nargs="+", default=[-2.0, -1.0, 0.0, 1.0, 2.0])
    p.add_argument("--variance", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_modes)
    return parser


def main(argv=None) -> int:
    from .cohort import CohortError
    from .config import ConfigError
    from .geometry import GeometryError
    from .pipeline import MissingCheckpointError
    from .training import DivergenceError, PhaseOrderError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 1), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (MissingCheckpointError, PhaseOrderError) as exc:
        return _fail(EXIT_MISSING, str(exc))
    except FileNotFoundError as exc:
        if args.command in ("infer", "modes") and getattr(args, "checkpoint", None):
            return _fail(EXIT_MISSING, str(exc))
        return _fail(EXIT_INPUT, str(exc))
    except DivergenceError as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except (InputError, CohortError, ConfigError, GeometryError, ValueError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INPUT, str(exc))


if __name__ == "__main__":
    sys.exit(main())
