"""Command-line surface: fit models, transform runs, run the cross-validated
reconstruction benchmark, generate synthetic datasets, and time/measure the
fits.

Exit codes: 0 on success, 1 on runtime failure, 2 on argument errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import load_atlas
from .bench import PeakRssSampler, run_bench
from .dataio import load_manifest, load_matrix, save_matrix
from .evaluation import cosmoothing, mean_within, roi_mask
from .fastsrm import FastSrmConfig, fastsrm_fit, fastsrm_transform
from .srm import SrmModel, detsrm_fit, probsrm_fit
from .synthetic import generate

ALGOS = ("detsrm", "probsrm", "fastsrm")


def _add_common_fit_args(p):
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p.add_argument("--k", type=int, required=True, help="number of components")
    p.add_argument("--atlas", help="atlas SRMB file (required for fastsrm)")
    p.add_argument("--atlas-kind", choices=("partition", "prob"), default=None)
    p.add_argument("--n-iter", type=int, default=10)
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srmkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"srmkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write it to a directory")
    p.add_argument("--algo", choices=ALGOS, required=True)
    _add_common_fit_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("transform", help="shared response of one run through a fitted model")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", type=int, required=True)
    p.add_argument("--subjects", help="comma-separated subject indices (default: all)")
    p.add_argument("--out", required=True, help="output SRMB file")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("evaluate", help="cross-validated reconstruction scores")
    p.add_argument("--algo", choices=ALGOS, required=True)
    _add_common_fit_args(p)
    p.add_argument("--roi-threshold", type=float, default=0.05)
    p.add_argument(
        "--roi-from",
        action="append",
        default=None,
        metavar="MAP",
        help="select the ROI from these mean-map SRMB files (e.g. a previous "
        "probsrm evaluation, possibly at several component counts) instead of "
        "the evaluated algorithm's own map; repeatable",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="subjects")
    p.add_argument("--m", type=int, required=True, help="runs")
    p.add_argument("--t", required=True, help="timeframes per run (single value or comma list)")
    p.add_argument("--v", type=int, required=True, help="voxels")
    p.add_argument("--k", type=int, required=True, help="components")
    p.add_argument("--sigma", default="0", help="noise level (single value or per-subject list)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--isotropic", action="store_true", help="equal component variances")
    p.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="time and measure fits on one dataset")
    p.add_argument("--algos", required=True, help="comma-separated algorithms")
    _add_common_fit_args(p)
    p.add_argument("--out", default="-", help="JSON-lines output file, or - for stdout")
    p.set_defaults(func=cmd_bench)

    return parser


def _load_inputs(args, parser, need_atlas: bool):
    if not Path(args.manifest).is_file():
        parser.error(f"manifest not found: {args.manifest}")
    try:
        manifest = load_manifest(args.manifest)
    except Exception as exc:
        parser.error(f"invalid manifest: {exc}")
    atlas = None
    if args.atlas:
        if not Path(args.atlas).is_file():
            parser.error(f"atlas not found: {args.atlas}")
        atlas = load_atlas(args.atlas, kind=args.atlas_kind)
    elif need_atlas:
        parser.error("fastsrm requires --atlas")
    return manifest, atlas


def cmd_fit(args, parser) -> int:
    manifest, atlas = _load_inputs(args, parser, need_atlas=args.algo == "fastsrm")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if args.algo == "fastsrm":
        cfg = FastSrmConfig(k=args.k, n_iter=args.n_iter, n_jobs=args.n_jobs, seed=args.seed)
        model = fastsrm_fit(manifest, atlas, cfg)
        trace = model.objective_trace
    else:
        data = manifest.load_all()
        fit = detsrm_fit if args.algo == "detsrm" else probsrm_fit
        model, _ = fit(data, args.k, n_iter=args.n_iter, seed=args.seed, n_jobs=args.n_jobs)
        trace = model.objective_trace if args.algo == "detsrm" else model.loglik_trace
    wall = time.perf_counter() - start
    model.save(out / "model")
    log = {
        "algorithm": args.algo,
        "k": args.k,
        "n_iter": args.n_iter,
        "n_jobs": args.n_jobs,
        "seed": args.seed,
        "trace": [float(x) for x in trace],
        "wall_time_s": wall,
    }
    with open(out / "fit_log.json", "w") as f:
        json.dump(log, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"model written to {out / 'model'}")
    return 0


def cmd_transform(args, parser) -> int:
    if not Path(args.model).is_dir():
        parser.error(f"model directory not found: {args.model}")
    if not Path(args.manifest).is_file():
        parser.error(f"manifest not found: {args.manifest}")
    manifest = load_manifest(args.manifest)
    if not 0 <= args.run < manifest.n_runs:
        parser.error(f"run {args.run} out of range (dataset has {manifest.n_runs})")
    model = SrmModel.load(args.model)
    subjects = (
        [int(x) for x in args.subjects.split(",")] if args.subjects else list(range(model.n))
    )
    runs = [manifest.load_run(i, args.run) for i in subjects]
    shared = fastsrm_transform(model, runs, subjects)
    save_matrix(shared, args.out)
    print(f"shared response written to {args.out}")
    return 0


def cmd_evaluate(args, parser) -> int:
    manifest, atlas = _load_inputs(args, parser, need_atlas=args.algo == "fastsrm")
    if manifest.n_runs < 2:
        parser.error("co-smoothing needs at least 2 runs (one is held out per fold)")
    if manifest.n_subjects < 2:
        parser.error("co-smoothing needs at least 2 subjects (one is held out per fold)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    sampler = PeakRssSampler()
    with sampler:
        result = cosmoothing(
            manifest,
            args.algo,
            args.k,
            atlas=atlas,
            n_iter=args.n_iter,
            seed=args.seed,
            n_jobs=args.n_jobs,
        )
    runtime = time.perf_counter() - start

    per_fold = []
    for fold in result.folds:
        name = f"r2_run-{fold.left_out_run:02d}_sub-{fold.left_out_subject:02d}.srmb"
        save_matrix(fold.scores[None, :], out / name)
        per_fold.append(
            {
                "run": fold.left_out_run,
                "subject": fold.left_out_subject,
                "mean_r2": float(fold.scores.mean()),
                "map_file": name,
            }
        )
    mean_map = result.mean_map()
    save_matrix(mean_map[None, :], out / "mean_map.srmb")
    if args.roi_from:
        roi_maps = [load_matrix(p)[0] for p in args.roi_from]
    else:
        roi_maps = [mean_map]
    mask = roi_mask(roi_maps, threshold=args.roi_threshold)
    roi_voxels = int(mask.sum())
    mean_roi = mean_within(mask, mean_map)
    summary = {
        "algorithm": args.algo,
        "k": args.k,
        "n_iter": args.n_iter,
        "seed": args.seed,
        "roi_threshold": args.roi_threshold,
        "roi_voxel_count": roi_voxels,
        "mean_roi_r2": None if np.isnan(mean_roi) else mean_roi,
        "per_fold": per_fold,
        "runtime_s": runtime,
        "peak_mem_bytes": sampler.peak_bytes,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    if roi_voxels == 0:
        print("warning: ROI is empty at this threshold", file=sys.stderr)
    print(f"summary written to {out / 'summary.json'}")
    return 0


def cmd_synth(args, parser) -> int:
    t_list = [int(x) for x in args.t.split(",")]
    if len(t_list) == 1:
        t_list = t_list * args.m
    sigma = [float(x) for x in args.sigma.split(",")]
    if len(sigma) == 1:
        sigma = sigma * args.n
    dtype = np.float64 if args.dtype == "f64" else np.float32
    try:
        manifest, _ = generate(
            args.n, args.m, t_list, args.v, args.k, sigma,
            seed=args.seed, out_dir=args.out, isotropic=args.isotropic, dtype=dtype,
        )
    except ValueError as exc:
        parser.error(str(exc))
    print(f"dataset written to {args.out} ({manifest.n_subjects} subjects, "
          f"{manifest.n_runs} runs, v={manifest.v})")
    return 0


def cmd_bench(args, parser) -> int:
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    for a in algos:
        if a not in ALGOS:
            parser.error(f"unknown algorithm {a!r}")
    manifest, atlas = _load_inputs(args, parser, need_atlas="fastsrm" in algos)
    reports = []
    for algo in algos:
        report = run_bench(
            manifest,
            algo,
            args.k,
            atlas=atlas,
            atlas_id=args.atlas,
            n_iter=args.n_iter,
            seed=args.seed,
        )
        reports.append(report)
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in reports)
    if args.out == "-":
        sys.stdout.write(lines)
    else:
        with open(args.out, "w") as f:
            f.write(lines)
        print(f"reports written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
