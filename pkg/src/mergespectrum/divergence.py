"""Parameter-space divergence of a direct/thinking checkpoint pair.

Computes the per-parameter delta histogram, the fraction of deltas inside a
small threshold band, the relative L2 distance ||delta|| / ||direct||, and
the cumulative distribution of squared deltas against the analytic curve of
a variance-matched chi-square(1) reference (what the squared difference of
two i.i.d. Gaussians follows). Also hosts the random-pruning viability
probe that emits rescaled-sparse-delta checkpoints for external evaluation.

All global statistics stream tensor-by-tensor in name-sorted order with
float64 compensated accumulation, so results are independent of iteration
order and peak memory stays at one tensor.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import chi2

from .errors import DegenerateInput
from .rng import drop_mask, mask_generator
from .tensor_store import (
    Checkpoint,
    DType,
    Role,
    content_digest,
    iter_tensor_slices,
    load_tensor,
    validate_aligned,
    write_checkpoint,
)

DEFAULT_THRESHOLD = 0.002
DEFAULT_BINS = 2001
SKETCH_BUCKETS = 4096
_SKETCH_LOG2_LO = -300.0
_SKETCH_LOG2_HI = 64.0


@dataclass(frozen=True)
class DivergenceReport:
    histogram: list[tuple[float, float, int]]  # (bin_left, bin_right, count)
    fraction_within_threshold: float
    relative_l2: float
    total_params: int
    delta_variance: float
    threshold: float = DEFAULT_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "threshold": self.threshold,
            "fraction_within_threshold": self.fraction_within_threshold,
            "relative_l2": self.relative_l2,
            "relative_l2_percent": 100.0 * self.relative_l2,
            "delta_variance": self.delta_variance,
            "histogram": [list(row) for row in self.histogram],
        }


@dataclass(frozen=True)
class CumulativeCurve:
    points: list[tuple[float, float]]            # (quantile, cumulative share)
    reference_points: list[tuple[float, float]]  # same grid, analytic reference

    def to_dict(self) -> dict:
        return {
            "points": [list(p) for p in self.points],
            "reference_points": [list(p) for p in self.reference_points],
        }


class _Kahan:
    """Compensated float64 accumulator; order-insensitive to ~1e-16 relative."""

    def __init__(self):
        self.total = 0.0
        self._comp = 0.0

    def add(self, value: float) -> None:
        y = value - self._comp
        t = self.total + y
        self._comp = (t - self.total) - y
        self.total = t


CHUNK_ELEMENTS = 1 << 22  # per-slice cap for the statistics passes


def _delta_stream(
    direct: Checkpoint,
    think: Checkpoint,
    chunk_elements: int = CHUNK_ELEMENTS,
) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
    """Yield (name, delta slice, direct slice) pairs; tensors larger than
    chunk_elements arrive in several flat slices."""
    for name in direct.names():
        direct_slices = iter_tensor_slices(direct, name, chunk_elements)
        think_slices = iter_tensor_slices(think, name, chunk_elements)
        for d, t in zip(direct_slices, think_slices):
            yield name, t - d, d


def compute_divergence(
    direct: Checkpoint,
    think: Checkpoint,
    bins: int = DEFAULT_BINS,
    threshold: float = DEFAULT_THRESHOLD,
    chunk_elements: int = CHUNK_ELEMENTS,
) -> DivergenceReport:
    """Histogram, threshold fraction, relative L2 and delta variance of
    think - direct, streamed in two passes (range, then statistics)."""
    if bins < 1:
        raise DegenerateInput(f"histogram needs at least one bin, got {bins}")
    validate_aligned(direct, think)

    max_abs = 0.0
    for _, delta, _ in _delta_stream(direct, think, chunk_elements):
        if delta.size:
            max_abs = max(max_abs, float(np.max(np.abs(delta))))
    hist_range = max_abs if max_abs > 0.0 else 1.0

    counts = np.zeros(bins, dtype=np.int64)
    edges = np.linspace(-hist_range, hist_range, bins + 1)
    sum_sq_delta = _Kahan()
    sum_sq_direct = _Kahan()
    sum_delta = _Kahan()
    within = 0
    total = 0
    for _, delta, d in _delta_stream(direct, think, chunk_elements):
        delta64 = delta.astype(np.float64)
        counts += np.histogram(delta64, bins=bins, range=(-hist_range, hist_range))[0]
        sum_sq_delta.add(float(np.sum(delta64 * delta64)))
        sum_sq_direct.add(float(np.sum(d.astype(np.float64) ** 2)))
        sum_delta.add(float(np.sum(delta64)))
        within += int(np.count_nonzero(np.abs(delta64) <= threshold))
        total += delta.size

    if total == 0:
        raise DegenerateInput("checkpoints contain no parameters")
    norm_direct = math.sqrt(sum_sq_direct.total)
    if norm_direct == 0.0:
        raise DegenerateInput("direct checkpoint has zero norm")
    mean_delta = sum_delta.total / total
    variance = max(0.0, sum_sq_delta.total / total - mean_delta * mean_delta)
    histogram = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    return DivergenceReport(
        histogram=histogram,
        fraction_within_threshold=within / total,
        relative_l2=math.sqrt(sum_sq_delta.total) / norm_direct,
        total_params=total,
        delta_variance=variance,
        threshold=threshold,
    )


# --- cumulative squared-delta curve ------------------------------------------------

def reference_share(quantiles: np.ndarray) -> np.ndarray:
    """Cumulative share of total squared mass below each quantile for a
    chi-square(1) variable. Scale-free: variance matching rescales both the
    mass and the total identically, so the matched reference equals this."""
    q = np.asarray(quantiles, dtype=np.float64)
    cutoff = chi2.ppf(q, df=1)
    return chi2.cdf(cutoff, df=3)


def cumulative_sq_curve(deltas: np.ndarray | Iterable[np.ndarray], grid: int = 200) -> CumulativeCurve:
    """Exact empirical cumulative-share curve of squared deltas on a uniform
    quantile grid, paired with the analytic chi-square(1) reference."""
    if grid < 1:
        raise DegenerateInput(f"curve grid must be positive, got {grid}")
    if isinstance(deltas, np.ndarray):
        chunks = [deltas.reshape(-1)]
    else:
        chunks = [np.asarray(c).reshape(-1) for c in deltas]
    if not chunks or sum(c.size for c in chunks) == 0:
        raise DegenerateInput("empty delta stream")
    squared = np.sort(np.concatenate([c.astype(np.float64) ** 2 for c in chunks]))
    total = float(squared.sum())
    if total == 0.0:
        raise DegenerateInput("all-zero delta: cumulative share curve undefined")
    cumulative = np.concatenate([[0.0], np.cumsum(squared)])
    n = squared.size
    quantiles = np.arange(grid + 1) / grid
    take = np.floor(quantiles * n).astype(np.int64)
    shares = cumulative[take] / cumulative[-1]
    points = [(float(q), float(s)) for q, s in zip(quantiles, shares)]
    ref = reference_share(quantiles)
    reference_points = [(float(q), float(s)) for q, s in zip(quantiles, ref)]
    return CumulativeCurve(points=points, reference_points=reference_points)


class SquaredDeltaSketch:
    """Fixed-size log-domain histogram of squared deltas for out-of-core
    quantile curves; error bounded by bucket width."""

    def __init__(self, buckets: int = SKETCH_BUCKETS):
        self.buckets = buckets
        self.counts = np.zeros(buckets, dtype=np.int64)
        self.mass = np.zeros(buckets, dtype=np.float64)
        self.zeros = 0

    def add(self, delta: np.ndarray) -> None:
        squared = delta.astype(np.float64).reshape(-1) ** 2
        positive = squared[squared > 0.0]
        self.zeros += squared.size - positive.size
        if positive.size == 0:
            return
        scale = self.buckets / (_SKETCH_LOG2_HI - _SKETCH_LOG2_LO)
        idx = np.clip(((np.log2(positive) - _SKETCH_LOG2_LO) * scale).astype(np.int64),
                      0, self.buckets - 1)
        self.counts += np.bincount(idx, minlength=self.buckets)
        self.mass += np.bincount(idx, weights=positive, minlength=self.buckets)

    def curve(self, grid: int = 200) -> CumulativeCurve:
        n = self.zeros + int(self.counts.sum())
        total = float(self.mass.sum())
        if n == 0:
            raise DegenerateInput("empty delta stream")
        if total == 0.0:
            raise DegenerateInput("all-zero delta: cumulative share curve undefined")
        cum_counts = np.concatenate([[0], np.cumsum(self.counts)])
        cum_mass = np.concatenate([[0.0], np.cumsum(self.mass)])
        quantiles = np.arange(grid + 1) / grid
        shares = np.empty(grid + 1)
        for i, q in enumerate(quantiles):
            target = math.floor(q * n) - self.zeros  # zeros contribute no mass
            if target <= 0:
                shares[i] = 0.0
                continue
            bucket = int(np.searchsorted(cum_counts, target, side="left")) - 1
            bucket = min(bucket, self.buckets - 1)
            inside = target - cum_counts[bucket]
            frac = inside / self.counts[bucket] if self.counts[bucket] else 0.0
            shares[i] = (cum_mass[bucket] + frac * self.mass[bucket]) / total
        shares[-1] = 1.0
        points = [(float(q), float(s)) for q, s in zip(quantiles, shares)]
        ref = reference_share(quantiles)
        reference_points = [(float(q), float(s)) for q, s in zip(quantiles, ref)]
        return CumulativeCurve(points=points, reference_points=reference_points)


def analyze_checkpoint_pair(
    direct: Checkpoint,
    think: Checkpoint,
    bins: int = DEFAULT_BINS,
    threshold: float = DEFAULT_THRESHOLD,
    grid: int = 200,
    exact_curve_limit: int = 1 << 24,
    chunk_elements: int = CHUNK_ELEMENTS,
) -> tuple[DivergenceReport, CumulativeCurve | None]:
    """Full divergence study: report plus cumulative curve. Exact curve up to
    `exact_curve_limit` parameters, sketch-based beyond. Returns curve=None
    when the delta is identically zero."""
    report = compute_divergence(direct, think, bins=bins, threshold=threshold,
                                chunk_elements=chunk_elements)
    try:
        if report.total_params <= exact_curve_limit:
            curve = cumulative_sq_curve(
                (delta for _, delta, _ in _delta_stream(direct, think, chunk_elements)),
                grid=grid)
        else:
            sketch = SquaredDeltaSketch()
            for _, delta, _ in _delta_stream(direct, think, chunk_elements):
                sketch.add(delta)
            curve = sketch.curve(grid=grid)
    except DegenerateInput:
        curve = None
    return report, curve


# --- random-pruning viability probe -------------------------------------------------

def dare_viability_probe(
    model: Checkpoint,
    base: Checkpoint,
    drop_rates: Sequence[float],
    seed: int,
    out_root: str | Path,
    force_f32: bool = False,
    shard_limit_bytes: int | None = None,
) -> list[tuple[float, Checkpoint]]:
    """For each drop rate p, write base + dare(model - base, p) as a merged
    checkpoint under out_root/rate_<p>/ plus a manifest of digests. Quality
    evaluation of the probed models is external."""
    validate_aligned(model, base)
    for rate in drop_rates:
        if not 0.0 <= rate < 1.0:
            raise DegenerateInput(f"drop rate must be in [0, 1), got {rate}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    results: list[tuple[float, Checkpoint]] = []
    manifest = []
    for rate in drop_rates:
        out_dir = out_root / f"rate_{rate:.4f}"

        def tensor_stream() -> Iterator[tuple[str, np.ndarray]]:
            # float64 intermediates with one final rounding keep the p=0 probe
            # within 1 ulp of the input model even where |theta| << |base|
            for name in model.names():
                theta = load_tensor(model, name).values.astype(np.float64)
                anchor = load_tensor(base, name).values.astype(np.float64)
                delta = theta - anchor
                if rate > 0.0:
                    gen = mask_generator(seed, "dare_probe", "probe", name)
                    keep = drop_mask(gen, delta.size, rate).reshape(delta.shape)
                    delta = np.where(keep, delta / (1.0 - rate), 0.0)
                yield name, (anchor + delta).astype(np.float32)

        dtypes = (DType.F32 if force_f32
                  else {name: meta.dtype for name, meta in model.tensors.items()})
        ckpt = write_checkpoint(
            tensor_stream(), out_dir, target_dtypes=dtypes,
            shard_limit_bytes=shard_limit_bytes, role=Role.MERGED)
        results.append((rate, ckpt))
        manifest.append({
            "drop_rate": rate,
            "path": str(out_dir),
            "tensor_count": len(ckpt.tensors),
            "content_digest": content_digest(ckpt),
        })
    manifest_path = out_root / "probe_manifest.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "entries": manifest}, fh, indent=2)
    os.replace(tmp, manifest_path)
    return results
