"""Per-tensor merging strategies.

Every operation is a pure function of aligned float32 tensors (direct,
thinking, optional base) and returns a float32 array of the same shape.
Delta methods do their element math in float32; dot products, norms and
magnitude averages accumulate in float64, and the two plain interpolations
(weighted average, slerp) evaluate in float64 with a single final rounding.
Randomness is injected as explicit generator arguments so identical recipes
are bitwise reproducible regardless of execution order.

Exact endpoint guarantees: methods whose strength-0/strength-1 output is
mathematically a parent (weighted average, slerp, dare at p=0, ties at
density 1, twin at mask rate 0) return a verbatim copy of that parent, so
the identity survives float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.random import Generator

from .errors import BaseRequired, MergeError, RecipeError, ShapeMismatch, ZeroNormTensor
from .rng import drop_mask, mask_generator

SLERP_COLLINEARITY_EPS = 1e-7


class MergeMethod(Enum):
    WEIGHTED_AVERAGE = "weighted_average"
    SLERP = "slerp"
    DARE = "dare"
    TIES = "ties"
    EMR = "emr"
    LORE = "lore"
    TWIN = "twin"
    TOPK_REPLACE = "topk_replace"
    TOPK_DIFF_AVERAGE = "topk_diff_average"
    GLOBAL_AVG_TOPK_OVERRIDE = "global_avg_topk_override"


BASE_REQUIRED_METHODS = frozenset(
    {MergeMethod.DARE, MergeMethod.TIES, MergeMethod.EMR, MergeMethod.TWIN}
)


@dataclass(frozen=True)
class MergeRecipe:
    """A fully specified merge: method, strength, hyperparameters, seed."""

    method: MergeMethod
    strength: float
    drop_rate: float = 0.2
    top_k_fraction: float = 0.2
    svt_threshold_fraction: float = 0.1
    lore_iters: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise RecipeError(f"strength must be in [0, 1], got {self.strength}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise RecipeError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if not 0.0 < self.top_k_fraction <= 1.0:
            raise RecipeError(f"top_k_fraction must be in (0, 1], got {self.top_k_fraction}")
        if not 0.0 < self.svt_threshold_fraction < 1.0:
            raise RecipeError(
                f"svt_threshold_fraction must be in (0, 1), got {self.svt_threshold_fraction}")
        if self.lore_iters < 1:
            raise RecipeError(f"lore_iters must be >= 1, got {self.lore_iters}")

    @property
    def requires_base(self) -> bool:
        return self.method in BASE_REQUIRED_METHODS


@dataclass(frozen=True)
class TensorMergeDiagnostic:
    """Geometry of one slerp merge: angle, dot, norms, fallback flag."""

    name: str
    angle_radians: float
    dot: float
    norm_direct: float
    norm_think: float
    collinear_fallback: bool


# --- helpers ------------------------------------------------------------------

def _check_aligned(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for arr in arrays[1:]:
        if arr.shape != shape:
            raise ShapeMismatch(f"operand shapes differ: {shape} vs {arr.shape}")


def _as_f32(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float32)


def _ceil_fraction(fraction: float, n: int) -> int:
    """ceil(fraction * n) robust to float noise in the product."""
    return min(n, math.ceil(round(fraction * n, 9)))


def _top_k_indices(magnitudes: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest magnitudes; ties broken by lower flat index."""
    order = np.argsort(-magnitudes, kind="stable")
    return order[:k]


def _keep_top_k(flat: np.ndarray, k: int) -> np.ndarray:
    """Zero all but the k largest-|value| entries."""
    out = np.zeros_like(flat)
    idx = _top_k_indices(np.abs(flat), k)
    out[idx] = flat[idx]
    return out


# --- simple interpolation -------------------------------------------------------

def weighted_average(direct: np.ndarray, think: np.ndarray, strength: float) -> np.ndarray:
    """(1 - strength) * direct + strength * think, elementwise.

    Computed in float64 and rounded once, so the result is within 1 ulp of
    any correctly-rounded evaluation even where the two terms nearly cancel.
    """
    direct, think = _as_f32(direct), _as_f32(think)
    _check_aligned(direct, think)
    if not 0.0 <= strength <= 1.0:
        raise MergeError(f"strength must be in [0, 1], got {strength}")
    if strength == 0.0:
        return direct.copy()
    if strength == 1.0:
        return think.copy()
    merged = (1.0 - strength) * direct.astype(np.float64) + strength * think.astype(np.float64)
    return merged.astype(np.float32)


def slerp_merge(
    direct: np.ndarray,
    think: np.ndarray,
    strength: float,
    collinearity_eps: float = SLERP_COLLINEARITY_EPS,
    name: str = "",
) -> tuple[np.ndarray, TensorMergeDiagnostic]:
    """Spherical interpolation of the two tensors viewed as flat vectors.

    Falls back to linear interpolation (flagged) when the vectors are nearly
    collinear or anti-parallel, where the geodesic is numerically or
    mathematically undefined.
    """
    direct, think = _as_f32(direct), _as_f32(think)
    _check_aligned(direct, think)
    v0 = direct.reshape(-1).astype(np.float64)
    v1 = think.reshape(-1).astype(np.float64)
    norm0 = float(np.linalg.norm(v0))
    norm1 = float(np.linalg.norm(v1))
    if norm0 == 0.0 or norm1 == 0.0:
        raise ZeroNormTensor(f"slerp undefined for zero-norm operand {name!r}")
    dot = float(v0 @ v1)
    cos_angle = min(1.0, max(-1.0, dot / (norm0 * norm1)))
    angle = math.acos(cos_angle)
    collinear = cos_angle >= 1.0 - collinearity_eps or cos_angle <= -1.0 + collinearity_eps
    diag = TensorMergeDiagnostic(
        name=name, angle_radians=angle, dot=dot,
        norm_direct=norm0, norm_think=norm1, collinear_fallback=collinear,
    )
    if strength == 0.0:
        return direct.copy(), diag
    if strength == 1.0:
        return think.copy(), diag
    if collinear:
        return weighted_average(direct, think, strength), diag
    sin_angle = math.sin(angle)
    c0 = math.sin((1.0 - strength) * angle) / sin_angle
    c1 = math.sin(strength * angle) / sin_angle
    merged = (c0 * v0 + c1 * v1).astype(np.float32)
    return merged.reshape(direct.shape), diag


# --- sparsified delta methods ----------------------------------------------------

def dare_process(delta: np.ndarray, drop_rate: float, gen: Generator) -> np.ndarray:
    """Randomly zero entries with probability drop_rate, rescale survivors by
    1/(1 - drop_rate). Unbiased: the expected output equals the input."""
    delta = _as_f32(delta)
    if not 0.0 <= drop_rate < 1.0:
        raise MergeError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if drop_rate == 0.0:
        return delta.copy()
    keep = drop_mask(gen, delta.size, drop_rate).reshape(delta.shape)
    rescale = np.float32(1.0 / (1.0 - drop_rate))
    return np.where(keep, delta * rescale, np.float32(0.0))


def dare_merge(
    direct: np.ndarray,
    think: np.ndarray,
    base: np.ndarray,
    strength: float,
    drop_rate: float,
    gen_direct: Generator,
    gen_think: Generator,
) -> np.ndarray:
    """base + (1-strength) * dare(direct - base) + strength * dare(think - base),
    with independent masks for the two deltas."""
    direct, think, base = _as_f32(direct), _as_f32(think), _as_f32(base)
    _check_aligned(direct, think, base)
    if drop_rate == 0.0:
        if strength == 0.0:
            return direct.copy()
        if strength == 1.0:
            return think.copy()
    pruned_direct = dare_process(direct - base, drop_rate, gen_direct)
    pruned_think = dare_process(think - base, drop_rate, gen_think)
    return base + np.float32(1.0 - strength) * pruned_direct + np.float32(strength) * pruned_think


def ties_merge(
    direct: np.ndarray,
    think: np.ndarray,
    base: np.ndarray,
    strength: float,
    density: float,
) -> np.ndarray:
    """Trim each delta to its top-ceil(density*n) magnitudes, elect a consensus
    sign per entry by (1-strength, strength)-weighted vote, then average the
    sign-aligned entries with the same weights."""
    direct, think, base = _as_f32(direct), _as_f32(think), _as_f32(base)
    _check_aligned(direct, think, base)
    if not 0.0 < density <= 1.0:
        raise MergeError(f"density must be in (0, 1], got {density}")
    if density == 1.0:
        if strength == 0.0:
            return direct.copy()
        if strength == 1.0:
            return think.copy()
    shape = direct.shape
    n = direct.size
    k = _ceil_fraction(density, n)
    delta_direct = _keep_top_k((direct - base).reshape(-1), k)
    delta_think = _keep_top_k((think - base).reshape(-1), k)

    w_direct = np.float32(1.0 - strength)
    w_think = np.float32(strength)
    vote = w_direct * delta_direct + w_think * delta_think
    sign = np.sign(vote)
    aligned_direct = (np.sign(delta_direct) == sign) & (sign != 0)
    aligned_think = (np.sign(delta_think) == sign) & (sign != 0)
    numer = (w_direct * np.where(aligned_direct, delta_direct, np.float32(0.0))
             + w_think * np.where(aligned_think, delta_think, np.float32(0.0)))
    denom = (np.where(aligned_direct, w_direct, np.float32(0.0))
             + np.where(aligned_think, w_think, np.float32(0.0)))
    merged_delta = np.where(denom > 0, numer / np.where(denom > 0, denom, np.float32(1.0)),
                            np.float32(0.0))
    return base + merged_delta.reshape(shape)


def emr_merge(
    direct: np.ndarray,
    think: np.ndarray,
    base: np.ndarray,
    strength: float,
) -> np.ndarray:
    """Elect a dominant sign per entry from the mean delta, build a unified
    max-magnitude vector along it, then reconstruct each delta through its
    direction mask and a magnitude-preserving rescale."""
    direct, think, base = _as_f32(direct), _as_f32(think), _as_f32(base)
    _check_aligned(direct, think, base)
    delta_direct = direct - base
    delta_think = think - base
    mean_delta = (delta_direct + delta_think) * np.float32(0.5)
    sign = np.sign(mean_delta)
    unified = sign * np.maximum(
        np.float32(0.0), np.maximum(sign * delta_direct, sign * delta_think))

    def reconstruct(delta: np.ndarray) -> np.ndarray:
        mask = (np.sign(delta) == sign) & (sign != 0)
        masked_unified = np.where(mask, unified, np.float32(0.0))
        denom = float(np.sum(np.abs(masked_unified), dtype=np.float64))
        if denom == 0.0:
            return np.zeros_like(delta)
        scale = float(np.sum(np.abs(delta), dtype=np.float64)) / denom
        return np.float32(scale) * masked_unified

    recon_direct = reconstruct(delta_direct)
    recon_think = reconstruct(delta_think)
    return base + np.float32(1.0 - strength) * recon_direct + np.float32(strength) * recon_think


def _singular_value_threshold(diff: np.ndarray, threshold_fraction: float) -> np.ndarray:
    """Zero singular values below threshold_fraction * sigma_max."""
    if not np.all(np.isfinite(diff)):
        raise MergeError("svt input contains non-finite values")
    u, s, vt = np.linalg.svd(diff, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros_like(diff)
    keep = s >= threshold_fraction * s[0]
    return (u[:, keep] * s[keep]) @ vt[keep]


def lore_merge(
    direct: np.ndarray,
    think: np.ndarray,
    strength: float,
    svt_threshold_fraction: float = 0.1,
    iters: int = 5,
) -> np.ndarray:
    """Estimate a shared center and low-rank per-model deltas by alternating
    singular value thresholding of each model's offset from the center with
    a center update; combine the deltas at the requested strength.

    Tensors with fewer than two dims skip the SVT and use plain offsets.
    """
    direct, think = _as_f32(direct), _as_f32(think)
    _check_aligned(direct, think)
    if not 0.0 < svt_threshold_fraction < 1.0:
        raise MergeError(f"svt_threshold_fraction must be in (0, 1), got {svt_threshold_fraction}")
    if iters < 1:
        raise MergeError(f"iters must be >= 1, got {iters}")
    shape = direct.shape
    if direct.ndim < 2:
        center = (direct + think) * np.float32(0.5)
        delta_direct = direct - center
        delta_think = think - center
        center = ((direct - delta_direct) + (think - delta_think)) * np.float32(0.5)
        return center + np.float32(1.0 - strength) * delta_direct + np.float32(strength) * delta_think

    mat_direct = direct.reshape(shape[0], -1).astype(np.float64)
    mat_think = think.reshape(shape[0], -1).astype(np.float64)
    center = (mat_direct + mat_think) / 2.0
    delta_direct = np.zeros_like(center)
    delta_think = np.zeros_like(center)
    for _ in range(iters):
        delta_direct = _singular_value_threshold(mat_direct - center, svt_threshold_fraction)
        delta_think = _singular_value_threshold(mat_think - center, svt_threshold_fraction)
        center = ((mat_direct - delta_direct) + (mat_think - delta_think)) / 2.0
    merged = center + (1.0 - strength) * delta_direct + strength * delta_think
    return merged.astype(np.float32).reshape(shape)


def twin_merge(
    direct: np.ndarray,
    think: np.ndarray,
    base: np.ndarray,
    strength: float,
    mask_rate: float,
) -> np.ndarray:
    """Split each model into the shared mid-point model plus an exclusive
    vector, sparsify the exclusives by magnitude (no rescale), and recombine
    at the requested strength."""
    direct, think, base = _as_f32(direct), _as_f32(think), _as_f32(base)
    _check_aligned(direct, think, base)
    if not 0.0 <= mask_rate < 1.0:
        raise MergeError(f"mask_rate must be in [0, 1), got {mask_rate}")
    if mask_rate == 0.0:
        if strength == 0.0:
            return direct.copy()
        if strength == 1.0:
            return think.copy()
    shape = direct.shape
    shared = base + ((direct - base) + (think - base)) * np.float32(0.5)
    keep = _ceil_fraction(1.0 - mask_rate, direct.size)
    excl_direct = _keep_top_k((direct - shared).reshape(-1), keep)
    excl_think = _keep_top_k((think - shared).reshape(-1), keep)
    combined = (np.float32(1.0 - strength) * excl_direct
                + np.float32(strength) * excl_think).reshape(shape)
    return shared + combined


# --- custom fusion strategies -----------------------------------------------------

def _largest_diff_indices(direct: np.ndarray, think: np.ndarray, k_fraction: float) -> np.ndarray:
    if not 0.0 < k_fraction <= 1.0:
        raise MergeError(f"k_fraction must be in (0, 1], got {k_fraction}")
    diff = np.abs(think.reshape(-1) - direct.reshape(-1))
    return _top_k_indices(diff, _ceil_fraction(k_fraction, diff.size))


def topk_replace(direct: np.ndarray, think: np.ndarray, k_fraction: float) -> np.ndarray:
    """Overwrite the top-k largest-|difference| positions of direct with think."""
    direct, think = _as_f32(direct), _as_f32(think)
    _check_aligned(direct, think)
    idx = _largest_diff_indices(direct, think, k_fraction)
    out = direct.reshape(-1).copy()
    out[idx] = think.reshape(-1)[idx]
    return out.reshape(direct.shape)


def topk_diff_average(direct: np.ndarray, think: np.ndarray, k_fraction: float) -> np.ndarray:
    """Average the top-k largest-|difference| positions; keep direct elsewhere."""
    direct, think = _as_f32(direct), _as_f32(think)
    _check_aligned(direct, think)
    idx = _largest_diff_indices(direct, think, k_fraction)
    flat_direct = direct.reshape(-1)
    flat_think = think.reshape(-1)
    out = flat_direct.copy()
    out[idx] = (flat_direct[idx] + flat_think[idx]) * np.float32(0.5)
    return out.reshape(direct.shape)


def global_avg_topk_override(direct: np.ndarray, think: np.ndarray, k_fraction: float) -> np.ndarray:
    """Average everywhere, then overwrite the top-k largest-|difference|
    positions with think."""
    direct, think = _as_f32(direct), _as_f32(think)
    _check_aligned(direct, think)
    idx = _largest_diff_indices(direct, think, k_fraction)
    out = ((direct.reshape(-1) + think.reshape(-1)) * np.float32(0.5)).copy()
    out[idx] = think.reshape(-1)[idx]
    return out.reshape(direct.shape)


# --- dispatch ---------------------------------------------------------------------

def merge_tensor(
    recipe: MergeRecipe,
    name: str,
    direct: np.ndarray,
    think: np.ndarray,
    base: np.ndarray | None = None,
) -> np.ndarray:
    """Apply one recipe to one aligned tensor triple."""
    if recipe.requires_base and base is None:
        raise BaseRequired(f"method {recipe.method.value!r} requires a base checkpoint")
    method = recipe.method
    if method is MergeMethod.WEIGHTED_AVERAGE:
        return weighted_average(direct, think, recipe.strength)
    if method is MergeMethod.SLERP:
        merged, _ = slerp_merge(direct, think, recipe.strength, name=name)
        return merged
    if method is MergeMethod.DARE:
        return dare_merge(
            direct, think, base, recipe.strength, recipe.drop_rate,
            mask_generator(recipe.seed, method.value, "direct", name),
            mask_generator(recipe.seed, method.value, "think", name),
        )
    if method is MergeMethod.TIES:
        return ties_merge(direct, think, base, recipe.strength, 1.0 - recipe.drop_rate)
    if method is MergeMethod.EMR:
        return emr_merge(direct, think, base, recipe.strength)
    if method is MergeMethod.LORE:
        return lore_merge(direct, think, recipe.strength,
                          recipe.svt_threshold_fraction, recipe.lore_iters)
    if method is MergeMethod.TWIN:
        return twin_merge(direct, think, base, recipe.strength, recipe.drop_rate)
    if method is MergeMethod.TOPK_REPLACE:
        return topk_replace(direct, think, recipe.top_k_fraction)
    if method is MergeMethod.TOPK_DIFF_AVERAGE:
        return topk_diff_average(direct, think, recipe.top_k_fraction)
    if method is MergeMethod.GLOBAL_AVG_TOPK_OVERRIDE:
        return global_avg_topk_override(direct, think, recipe.top_k_fraction)
    raise MergeError(f"unhandled method {method!r}")
