#!/usr/bin/env python3
"""End-to-end toy experiment: build parents, measure divergence, sweep two
merge methods across the strength grid, synthesize evaluation records for
the merged models, and run the accuracy-efficiency analytics.

No model inference happens anywhere; trial outcomes are simulated from a
logistic accuracy curve (sharp transition near strength 0.65) with token
costs that grow with strength, which is enough to exercise phase-change
localization and improvement detection end to end.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from mergespectrum.cli import run
from mergespectrum.sweep import SweepManifest


def synthesize_records(manifest: SweepManifest, out_path: Path, seed: int,
                       trials: int) -> None:
    rng = np.random.default_rng(seed)
    lines = []

    def trial_block(p_correct: float, tokens_mean: float) -> list[dict]:
        return [{"correct": bool(rng.random() < p_correct),
                 "output_tokens": int(max(1, rng.normal(tokens_mean, tokens_mean * 0.1)))}
                for _ in range(trials)]

    for entry in manifest.entries:
        if entry.status != "done":
            continue
        strength = entry.strength
        p_correct = 0.15 + 0.75 / (1.0 + np.exp(-(strength - 0.65) / 0.03))
        tokens = 300 + 2700 / (1.0 + np.exp(-(strength - 0.65) / 0.05))
        lines.append({
            "model_id": f"{entry.method}-{strength:.4f}",
            "method": entry.method,
            "strength": strength,
            "benchmark": "toy-reasoning",
            "trials": trial_block(p_correct, tokens),
        })
    # parents: the thinking model is accurate but verbose, leaving headroom
    # for merged models to dominate it
    lines.append({"model_id": "parent-direct", "method": "parent", "strength": 0.0,
                  "benchmark": "toy-reasoning", "trials": trial_block(0.15, 300)})
    lines.append({"model_id": "parent-think", "method": "parent", "strength": 1.0,
                  "benchmark": "toy-reasoning", "trials": trial_block(0.85, 3200)})
    out_path.write_text("\n".join(json.dumps(d) for d in lines) + "\n", encoding="utf-8")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trials", type=int, default=40)
    parser.add_argument("--step", type=float, default=0.1, help="strength grid step")
    args = parser.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    from make_toy_checkpoints import generate
    generate(work / "parents", seed=args.seed)

    parents = work / "parents"
    assert run(["analyze", "--direct", str(parents / "direct"),
                "--think", str(parents / "think"),
                "--out", str(work / "divergence.json"),
                "--csv-dir", str(work / "divergence_csv")]) == 0

    plan = {
        "parents": {"direct": str(parents / "direct"), "thinking": str(parents / "think"),
                    "base": str(parents / "base")},
        "output_root": str(work / "sweep"),
        "dtype_policy": "force_f32",
        "seed": args.seed,
        "methods": [
            {"method": "weighted_average",
             "grid": {"start": 0.0, "stop": 1.0, "step": args.step}},
            {"method": "ties", "grid": {"start": 0.0, "stop": 1.0, "step": args.step}},
        ],
    }
    (work / "plan.json").write_text(json.dumps(plan, indent=2), encoding="utf-8")
    assert run(["sweep", "--plan", str(work / "plan.json")]) == 0

    manifest = SweepManifest.load(work / "sweep" / "manifest.json")
    synthesize_records(manifest, work / "records.ndjson", args.seed, args.trials)
    assert run(["pareto", "--records", str(work / "records.ndjson"),
                "--parent-id", "parent-think", "--out", str(work / "pareto"),
                "--bootstrap-n", "2000", "--seed", str(args.seed)]) == 0

    report = json.loads((work / "pareto" / "report.json").read_text())
    body = report["benchmarks"]["toy-reasoning"]
    print("\n--- toy experiment summary ---")
    print(f"front size: {len(body['front'])}")
    improvements = body["improvements"] or []
    for imp in improvements:
        print(f"improvement over parent-think: {imp['model_id']} "
              f"acc={imp['accuracy_mean']:.2f} tokens={imp['mean_tokens']:.0f} "
              f"ci_robust={imp['ci_robust']}")
    for method, phase in body["phase_changes"].items():
        if "max_slope_interval" in phase:
            print(f"phase change [{method}]: steepest step at "
                  f"{tuple(phase['max_slope_interval'])}, "
                  f"gain window {tuple(phase['gain_window'])}")
    print(f"outputs under {work}")


if __name__ == "__main__":
    main()
