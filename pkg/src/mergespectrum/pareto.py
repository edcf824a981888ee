"""Accuracy-efficiency analytics over benchmark evaluation records.

Ingests newline-delimited JSON evaluation records (one model x benchmark
per line, with per-trial correctness and output token counts), summarizes
them into points with percentile-bootstrap confidence intervals, computes
Pareto fronts over (mean output tokens, accuracy), flags Pareto
improvements against a parent model, and localizes phase changes in
accuracy-vs-strength series.

No inference and no plotting happen here; records arrive from an external
evaluation harness and outputs are plain JSON/CSV-able structures.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NoTransition, RecordSchemaError

DEFAULT_CI_LEVEL = 0.90
DEFAULT_BOOTSTRAP_N = 10_000
_BOOTSTRAP_CHUNK = 2_000
GAIN_WINDOW_SHARE = 0.5


@dataclass(frozen=True)
class Trial:
    correct: bool
    output_tokens: int


@dataclass(frozen=True)
class EvalRecord:
    model_id: str
    method: str
    strength: float
    benchmark: str
    trials: tuple[Trial, ...]
    timestamp: str | None = None

    def trial_digest(self) -> str:
        doc = [[t.correct, t.output_tokens] for t in self.trials]
        return hashlib.sha256(json.dumps(doc).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ParetoPoint:
    method: str
    strength: float
    accuracy_mean: float
    accuracy_ci: tuple[float, float]
    mean_tokens: float
    n_trials: int
    model_id: str = ""

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "method": self.method,
            "strength": self.strength,
            "accuracy_mean": self.accuracy_mean,
            "accuracy_ci_low": self.accuracy_ci[0],
            "accuracy_ci_high": self.accuracy_ci[1],
            "mean_tokens": self.mean_tokens,
            "n_trials": self.n_trials,
        }


@dataclass(frozen=True)
class ParetoImprovement:
    point: ParetoPoint
    ci_robust: bool  # point's CI floor clears the parent's CI ceiling

    def to_dict(self) -> dict:
        doc = self.point.to_dict()
        doc["ci_robust"] = self.ci_robust
        return doc


@dataclass(frozen=True)
class PhaseChangeReport:
    benchmark: str
    max_slope_interval: tuple[float, float]
    gain_window: tuple[float, float]
    first_differences: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "max_slope_interval": list(self.max_slope_interval),
            "gain_window": list(self.gain_window),
            "first_differences": self.first_differences,
        }


# --- ingestion -----------------------------------------------------------------

def _parse_record(doc: dict, line_number: int) -> EvalRecord:
    def fail(msg: str):
        raise RecordSchemaError(msg, line_number)

    if not isinstance(doc, dict):
        fail("record is not a JSON object")
    for key in ("model_id", "method", "benchmark"):
        if not isinstance(doc.get(key), str) or not doc[key]:
            fail(f"missing or non-string field {key!r}")
    strength = doc.get("strength")
    if not isinstance(strength, (int, float)) or isinstance(strength, bool):
        fail("missing or non-numeric field 'strength'")
    if not 0.0 <= float(strength) <= 1.0:
        fail(f"strength {strength} outside [0, 1]")
    raw_trials = doc.get("trials")
    if not isinstance(raw_trials, list) or not raw_trials:
        fail("'trials' must be a non-empty list")
    trials = []
    for i, t in enumerate(raw_trials):
        if not isinstance(t, dict) or not isinstance(t.get("correct"), bool):
            fail(f"trial {i}: 'correct' must be a boolean")
        tokens = t.get("output_tokens")
        if not isinstance(tokens, int) or isinstance(tokens, bool) or tokens < 0:
            fail(f"trial {i}: 'output_tokens' must be a non-negative integer")
        trials.append(Trial(correct=t["correct"], output_tokens=tokens))
    timestamp = doc.get("timestamp")
    if timestamp is not None and not isinstance(timestamp, str):
        fail("'timestamp' must be a string when present")
    return EvalRecord(
        model_id=doc["model_id"],
        method=doc["method"],
        strength=float(strength),
        benchmark=doc["benchmark"],
        trials=tuple(trials),
        timestamp=timestamp,
    )


def ingest_records(path: str | Path) -> list[EvalRecord]:
    """Parse and validate an NDJSON record file; duplicates (same model,
    benchmark and trial set) are dropped, keeping the first occurrence."""
    records: list[EvalRecord] = []
    seen: set[tuple[str, str, str]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordSchemaError(f"invalid JSON: {exc}", line_number) from exc
            record = _parse_record(doc, line_number)
            key = (record.model_id, record.benchmark, record.trial_digest())
            if key in seen:
                continue
            seen.add(key)
            records.append(record)
    if not records:
        raise DataError(f"{path}: no evaluation records found")
    return records


# --- summaries -----------------------------------------------------------------

def summarize(
    record: EvalRecord,
    ci_level: float = DEFAULT_CI_LEVEL,
    bootstrap_n: int = DEFAULT_BOOTSTRAP_N,
    seed: int = 0,
) -> ParetoPoint:
    """Accuracy mean with a two-sided percentile-bootstrap CI over trial
    resamples, plus mean output tokens."""
    if not record.trials:
        raise DataError("record has no trials")
    correct = np.array([t.correct for t in record.trials], dtype=np.float64)
    tokens = np.array([t.output_tokens for t in record.trials], dtype=np.float64)
    n = correct.size
    gen = np.random.default_rng(seed)
    samples = np.empty(bootstrap_n, dtype=np.float64)
    filled = 0
    while filled < bootstrap_n:
        count = min(_BOOTSTRAP_CHUNK, bootstrap_n - filled)
        idx = gen.integers(0, n, size=(count, n))
        samples[filled:filled + count] = correct[idx].mean(axis=1)
        filled += count
    alpha = (1.0 - ci_level) / 2.0
    low, high = np.percentile(samples, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return ParetoPoint(
        method=record.method,
        strength=record.strength,
        accuracy_mean=float(correct.mean()),
        accuracy_ci=(float(low), float(high)),
        mean_tokens=float(tokens.mean()),
        n_trials=int(n),
        model_id=record.model_id,
    )


# --- dominance -----------------------------------------------------------------

def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """True when a is at least as accurate and at most as costly as b, with
    at least one strict inequality."""
    return (a.accuracy_mean >= b.accuracy_mean and a.mean_tokens <= b.mean_tokens
            and (a.accuracy_mean > b.accuracy_mean or a.mean_tokens < b.mean_tokens))


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset, sorted by mean tokens ascending.

    Single left-to-right sweep over token-sorted points: a point survives
    iff no strictly cheaper point matches its accuracy and no point at the
    same cost beats it.
    """
    if not points:
        raise DataError("pareto_front requires at least one point")
    ordered = sorted(points, key=lambda p: (p.mean_tokens, -p.accuracy_mean))
    front: list[ParetoPoint] = []
    best_before = -np.inf  # best accuracy among strictly cheaper points
    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j].mean_tokens == ordered[i].mean_tokens:
            j += 1
        group = ordered[i:j]
        group_best = group[0].accuracy_mean
        if group_best > best_before:
            front.extend(p for p in group if p.accuracy_mean == group_best)
        best_before = max(best_before, group_best)
        i = j
    return front


def pareto_improvements(
    points: Sequence[ParetoPoint],
    parent_think: ParetoPoint,
) -> list[ParetoImprovement]:
    """Points that dominate the thinking parent. A point is CI-robust when
    its CI lower bound exceeds the parent's CI upper bound."""
    improvements = []
    for point in points:
        if point is parent_think:
            continue
        if dominates(point, parent_think):
            improvements.append(ParetoImprovement(
                point=point,
                ci_robust=point.accuracy_ci[0] > parent_think.accuracy_ci[1],
            ))
    return improvements


# --- phase changes ----------------------------------------------------------------

def detect_phase_change(
    series: Sequence[tuple[float, float]],
    benchmark: str = "",
) -> PhaseChangeReport:
    """Locate the steepest accuracy step and the shortest contiguous window
    capturing at least half the total accuracy gain."""
    if len(series) < 3:
        raise DataError(f"phase detection needs >= 3 grid points, got {len(series)}")
    strengths = [float(s) for s, _ in series]
    accuracies = [float(a) for _, a in series]
    for a, b in zip(strengths, strengths[1:]):
        if b <= a:
            raise DataError("strengths must be strictly increasing")
    total_gain = max(accuracies) - min(accuracies)
    if total_gain == 0.0:
        raise NoTransition(f"{benchmark or 'series'}: accuracy is constant")
    diffs = [accuracies[i + 1] - accuracies[i] for i in range(len(accuracies) - 1)]
    slopes = [d / (strengths[i + 1] - strengths[i]) for i, d in enumerate(diffs)]
    top = int(np.argmax(slopes))  # first occurrence wins ties
    max_slope_interval = (strengths[top], strengths[top + 1])

    needed = GAIN_WINDOW_SHARE * total_gain
    gain_window = None
    for width in range(1, len(series)):
        for start in range(0, len(series) - width):
            positive = sum(d for d in diffs[start:start + width] if d > 0)
            if positive >= needed:
                gain_window = (strengths[start], strengths[start + width])
                break
        if gain_window is not None:
            break
    if gain_window is None:
        raise NoTransition(f"{benchmark or 'series'}: no window reaches "
                           f"{GAIN_WINDOW_SHARE:.0%} of the total gain")
    return PhaseChangeReport(
        benchmark=benchmark,
        max_slope_interval=max_slope_interval,
        gain_window=gain_window,
        first_differences=diffs,
    )


# --- report assembly ----------------------------------------------------------------

def build_report(
    records: Sequence[EvalRecord],
    parent_id: str,
    ci_level: float = DEFAULT_CI_LEVEL,
    bootstrap_n: int = DEFAULT_BOOTSTRAP_N,
    seed: int = 0,
) -> dict:
    """Per-benchmark summary: all points, the Pareto front, improvements over
    the parent model, and per-method phase-change localization."""
    benchmarks: dict[str, list[EvalRecord]] = {}
    for record in records:
        benchmarks.setdefault(record.benchmark, []).append(record)

    report: dict = {"parent_id": parent_id, "ci_level": ci_level, "benchmarks": {}}
    for benchmark in sorted(benchmarks):
        group = benchmarks[benchmark]
        points = [summarize(r, ci_level=ci_level, bootstrap_n=bootstrap_n, seed=seed)
                  for r in sorted(group, key=lambda r: (r.method, r.strength, r.model_id))]
        front = pareto_front(points)
        parents = [p for p in points if p.model_id == parent_id]
        if parents:
            improvements = [imp.to_dict()
                            for imp in pareto_improvements(points, parents[0])]
            parent_doc = parents[0].to_dict()
        else:
            improvements = None
            parent_doc = None

        phase: dict = {}
        by_method: dict[str, dict[float, list[float]]] = {}
        for p in points:
            by_method.setdefault(p.method, {}).setdefault(p.strength, []).append(
                p.accuracy_mean)
        for method, by_strength in sorted(by_method.items()):
            # repeated evaluations of one strength collapse to their mean
            series = [(s, float(np.mean(accs))) for s, accs in sorted(by_strength.items())]
            if len(series) < 3:
                continue
            try:
                phase[method] = detect_phase_change(series, benchmark=benchmark).to_dict()
            except NoTransition as exc:
                phase[method] = {"no_transition": True, "reason": str(exc)}

        report["benchmarks"][benchmark] = {
            "points": [p.to_dict() for p in points],
            "front": [p.to_dict() for p in front],
            "parent": parent_doc,
            "improvements": improvements,
            "phase_changes": phase,
        }
    return report
