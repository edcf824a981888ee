"""Command-line entry point.

Subcommands: analyze (divergence study), merge (single recipe), sweep
(strength-grid execution from a plan file), probe-dare (random-pruning
viability checkpoints), pareto (accuracy-efficiency analytics).

Exit codes: 0 success, 1 usage error, 2 data error, 3 IO error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .divergence import (
    DEFAULT_BINS,
    DEFAULT_THRESHOLD,
    analyze_checkpoint_pair,
    dare_viability_probe,
)
from .errors import DataError, RecipeError, UsageError
from .merge_methods import BASE_REQUIRED_METHODS, MergeMethod, MergeRecipe
from .pareto import DEFAULT_BOOTSTRAP_N, DEFAULT_CI_LEVEL, build_report, ingest_records
from .sweep import DtypePolicy, execute_sweep, load_plan_file, merge_single
from .tensor_store import Role, open_checkpoint

_WORKERS_ENV = "MERGESPECTRUM_WORKERS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(_WORKERS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mergespectrum",
                     description="Merge direct/thinking checkpoints and analyze the result spectrum.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p_analyze = sub.add_parser("analyze", help="parameter-divergence study of a checkpoint pair")
    p_analyze.add_argument("--direct", required=True, help="direct parent checkpoint path")
    p_analyze.add_argument("--think", required=True, help="thinking parent checkpoint path")
    p_analyze.add_argument("--bins", type=int, default=DEFAULT_BINS, help="histogram bin count")
    p_analyze.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                           help="|delta| band reported as fraction_within_threshold")
    p_analyze.add_argument("--grid", type=int, default=200, help="cumulative-curve grid size")
    p_analyze.add_argument("--out", default="divergence_report.json", help="report JSON path")
    p_analyze.add_argument("--csv-dir", default=None, help="also write histogram/curve CSVs here")
    p_analyze.set_defaults(func=_cmd_analyze)

    p_merge = sub.add_parser("merge", help="merge one checkpoint at a single strength")
    p_merge.add_argument("--method", required=True,
                         choices=[m.value for m in MergeMethod])
    p_merge.add_argument("--strength", type=float, required=True, help="merging strength in [0, 1]")
    p_merge.add_argument("--direct", required=True)
    p_merge.add_argument("--think", required=True)
    p_merge.add_argument("--base", default=None, help="base checkpoint (required for dare/ties/emr/twin)")
    p_merge.add_argument("--out", required=True, help="output checkpoint path (file or directory)")
    p_merge.add_argument("--seed", type=int, default=0)
    p_merge.add_argument("--drop-rate", type=float, default=0.2)
    p_merge.add_argument("--top-k-fraction", type=float, default=0.2)
    p_merge.add_argument("--svt-threshold", type=float, default=0.1)
    p_merge.add_argument("--lore-iters", type=int, default=5)
    p_merge.add_argument("--dtype-policy", choices=[p.value for p in DtypePolicy],
                         default=DtypePolicy.PRESERVE_SOURCE.value)
    p_merge.add_argument("--shard-limit-bytes", type=int, default=None)
    p_merge.add_argument("--workers", type=int, default=_default_workers())
    p_merge.set_defaults(func=_cmd_merge)

    p_sweep = sub.add_parser("sweep", help="execute a strength-grid sweep plan")
    p_sweep.add_argument("--plan", required=True, help="sweep plan JSON file")
    p_sweep.add_argument("--workers", type=int, default=_default_workers())
    p_sweep.set_defaults(func=_cmd_sweep)

    p_probe = sub.add_parser("probe-dare", help="emit randomly pruned-and-rescaled delta checkpoints")
    p_probe.add_argument("--model", required=True, help="model checkpoint to probe")
    p_probe.add_argument("--base", required=True, help="base checkpoint for the delta")
    p_probe.add_argument("--rates", required=True,
                         help="comma-separated drop rates, e.g. 0.5,0.9,0.99")
    p_probe.add_argument("--out", required=True, help="output directory")
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--force-f32", action="store_true",
                         help="store outputs as F32 instead of the source dtype")
    p_probe.set_defaults(func=_cmd_probe)

    p_pareto = sub.add_parser("pareto", help="fronts, improvements and phase changes from eval records")
    p_pareto.add_argument("--records", required=True, help="NDJSON evaluation record file")
    p_pareto.add_argument("--parent-id", required=True,
                          help="model_id of the thinking parent in the records")
    p_pareto.add_argument("--out", default="pareto", help="output directory")
    p_pareto.add_argument("--ci-level", type=float, default=DEFAULT_CI_LEVEL)
    p_pareto.add_argument("--bootstrap-n", type=int, default=DEFAULT_BOOTSTRAP_N)
    p_pareto.add_argument("--seed", type=int, default=0)
    p_pareto.set_defaults(func=_cmd_pareto)

    return parser


# --- subcommand bodies ----------------------------------------------------------

def _cmd_analyze(args) -> int:
    direct = open_checkpoint(args.direct, Role.DIRECT)
    think = open_checkpoint(args.think, Role.THINKING)
    report, curve = analyze_checkpoint_pair(
        direct, think, bins=args.bins, threshold=args.threshold, grid=args.grid)
    doc = {"report": report.to_dict(),
           "cumulative_curve": curve.to_dict() if curve else None}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    if args.csv_dir:
        csv_dir = Path(args.csv_dir)
        csv_dir.mkdir(parents=True, exist_ok=True)
        with open(csv_dir / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            writer.writerows(report.histogram)
        if curve:
            with open(csv_dir / "cumulative_curve.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["quantile", "empirical_share", "reference_share"])
                for (q, s), (_, r) in zip(curve.points, curve.reference_points):
                    writer.writerow([q, s, r])
    print(f"analyze: relative_l2={report.relative_l2:.6%} "
          f"within±{report.threshold:g}={report.fraction_within_threshold:.4f} "
          f"params={report.total_params} -> {out}")
    return 0


def _cmd_merge(args) -> int:
    method = MergeMethod(args.method)
    if method in BASE_REQUIRED_METHODS and not args.base:
        raise UsageError(f"--base is required for method {method.value!r}")
    try:
        recipe = MergeRecipe(
            method=method,
            strength=args.strength,
            drop_rate=args.drop_rate,
            top_k_fraction=args.top_k_fraction,
            svt_threshold_fraction=args.svt_threshold,
            lore_iters=args.lore_iters,
            seed=args.seed,
        )
    except RecipeError as exc:  # flag values outside their ranges
        raise UsageError(str(exc)) from exc
    merged = merge_single(
        recipe,
        direct_path=Path(args.direct),
        thinking_path=Path(args.think),
        base_path=Path(args.base) if args.base else None,
        out_path=Path(args.out),
        dtype_policy=DtypePolicy(args.dtype_policy),
        shard_limit_bytes=args.shard_limit_bytes,
        workers=args.workers,
    )
    print(f"merge: {method.value} strength={args.strength:g} "
          f"tensors={len(merged.tensors)} -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    plan = load_plan_file(args.plan)
    manifest = execute_sweep(plan, workers=args.workers)
    done = sum(1 for e in manifest.entries if e.status == "done")
    failed = sum(1 for e in manifest.entries if e.status == "failed")
    print(f"sweep: {done} done, {failed} failed of {len(manifest.entries)} entries "
          f"-> {plan.output_root}")
    return 2 if failed else 0


def _cmd_probe(args) -> int:
    try:
        rates = [float(r) for r in args.rates.split(",") if r.strip()]
    except ValueError as exc:
        raise UsageError(f"--rates must be comma-separated numbers: {exc}") from exc
    if not rates:
        raise UsageError("--rates must name at least one drop rate")
    model = open_checkpoint(args.model, Role.THINKING)
    base = open_checkpoint(args.base, Role.BASE)
    results = dare_viability_probe(model, base, rates, seed=args.seed,
                                   out_root=args.out, force_f32=args.force_f32)
    print(f"probe-dare: wrote {len(results)} probed checkpoints under {args.out}")
    return 0


def _cmd_pareto(args) -> int:
    records = ingest_records(args.records)
    report = build_report(records, parent_id=args.parent_id, ci_level=args.ci_level,
                          bootstrap_n=args.bootstrap_n, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    point_fields = ["benchmark", "model_id", "method", "strength", "accuracy_mean",
                    "accuracy_ci_low", "accuracy_ci_high", "mean_tokens", "n_trials"]
    for filename, key in (("points.csv", "points"), ("fronts.csv", "front")):
        with open(out_dir / filename, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=point_fields)
            writer.writeheader()
            for benchmark, body in report["benchmarks"].items():
                for point in body[key]:
                    writer.writerow({"benchmark": benchmark, **point})
    n_improvements = sum(len(b["improvements"] or []) for b in report["benchmarks"].values())
    print(f"pareto: {len(report['benchmarks'])} benchmarks, "
          f"{n_improvements} improvements over {args.parent_id!r} -> {out_dir}")
    return 0


# --- driver ----------------------------------------------------------------------

def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
