"""Strength-grid sweeps over merge methods.

A sweep plan expands (method, strength) pairs from a JSON config, then
execution streams aligned tensors from the parent checkpoints through the
per-tensor merge, writing one merged checkpoint per pair under
<output_root>/<method>/<strength formatted to 4 decimals>/.

The manifest (JSON, written atomically after every entry) records a content
digest per finished entry; re-running a plan skips entries whose outputs
still verify, so interrupted sweeps resume with only the remaining work.
Failures are recorded per entry and do not abort the sweep.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import shutil
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import PlanDigestMismatch, PlanError
from .merge_methods import MergeMethod, MergeRecipe, merge_tensor
from .tensor_store import (
    Checkpoint,
    DType,
    Role,
    content_digest,
    load_tensor,
    open_checkpoint,
    validate_aligned,
    write_checkpoint,
)

from . import __version__ as TOOLKIT_VERSION

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"
_SIDECAR_EXCLUDE_SUFFIXES = (".safetensors", ".safetensors.index.json")


class DtypePolicy(Enum):
    PRESERVE_SOURCE = "preserve_source"
    FORCE_F32 = "force_f32"


@dataclass(frozen=True)
class SweepPlan:
    recipes: tuple[MergeRecipe, ...]
    direct_path: Path
    thinking_path: Path
    base_path: Path | None
    output_root: Path
    dtype_policy: DtypePolicy = DtypePolicy.PRESERVE_SOURCE
    sidecar_source: str = "thinking"  # "thinking" | "direct" | "none"
    shard_limit_bytes: int | None = None

    def digest(self) -> str:
        doc = {
            "recipes": [
                {
                    "method": r.method.value,
                    "strength": r.strength,
                    "drop_rate": r.drop_rate,
                    "top_k_fraction": r.top_k_fraction,
                    "svt_threshold_fraction": r.svt_threshold_fraction,
                    "lore_iters": r.lore_iters,
                    "seed": r.seed,
                }
                for r in self.recipes
            ],
            "direct": str(self.direct_path),
            "thinking": str(self.thinking_path),
            "base": str(self.base_path) if self.base_path else None,
            "output_root": str(self.output_root),
            "dtype_policy": self.dtype_policy.value,
            "sidecar_source": self.sidecar_source,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass
class SweepEntry:
    method: str
    strength: float
    output_path: str
    tensor_count: int | None = None
    content_digest: str | None = None
    status: str = "pending"  # pending | done | failed
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "strength": self.strength,
            "output_path": self.output_path,
            "tensor_count": self.tensor_count,
            "content_digest": self.content_digest,
            "status": self.status,
            "error": self.error,
        }


@dataclass
class SweepManifest:
    plan_digest: str
    toolkit_version: str = TOOLKIT_VERSION
    entries: list[SweepEntry] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "plan_digest": self.plan_digest,
            "toolkit_version": self.toolkit_version,
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path: Path) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Path) -> "SweepManifest":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        entries = [SweepEntry(**e) for e in doc.get("entries", [])]
        return cls(plan_digest=doc["plan_digest"],
                   toolkit_version=doc.get("toolkit_version", "unknown"),
                   entries=entries)

    def find(self, method: str, strength: float) -> SweepEntry | None:
        for entry in self.entries:
            if entry.method == method and entry.strength == strength:
                return entry
        return None


# --- planning -----------------------------------------------------------------

def _expand_grid(grid) -> list[float]:
    if isinstance(grid, dict):
        try:
            start, stop, step = float(grid["start"]), float(grid["stop"]), float(grid["step"])
        except KeyError as exc:
            raise PlanError(f"grid object needs start/stop/step: missing {exc}") from exc
        if step <= 0 or stop < start:
            raise PlanError(f"invalid grid range {grid}")
        count = int(round((stop - start) / step)) + 1
        values = [round(start + i * step, 10) for i in range(count)]
        if values and values[-1] > stop + 1e-9:
            values.pop()
        return values
    if isinstance(grid, (list, tuple)):
        return [float(x) for x in grid]
    raise PlanError(f"grid must be a list or start/stop/step object, got {type(grid).__name__}")


def _validate_grid(values: list[float], method: str) -> None:
    if not values:
        raise PlanError(f"{method}: empty strength grid")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise PlanError(f"{method}: strength {v} outside [0, 1]")
    for a, b in zip(values, values[1:]):
        if b <= a:
            raise PlanError(f"{method}: grid must be strictly increasing ({a} then {b})")


def plan_sweep(config: dict) -> SweepPlan:
    """Validate a sweep config document and expand it into a concrete plan."""
    try:
        parents = config["parents"]
        direct_path = Path(parents["direct"])
        thinking_path = Path(parents["thinking"])
        output_root = Path(config["output_root"])
    except (KeyError, TypeError) as exc:
        raise PlanError(f"config missing required field: {exc}") from exc
    base_path = Path(parents["base"]) if parents.get("base") else None
    for label, path in (("direct", direct_path), ("thinking", thinking_path),
                        ("base", base_path)):
        if path is not None and not path.exists():
            raise PlanError(f"{label} parent path does not exist: {path}")

    policy = DtypePolicy(config.get("dtype_policy", DtypePolicy.PRESERVE_SOURCE.value))
    sidecar_source = config.get("sidecar_source", "thinking")
    if sidecar_source not in ("thinking", "direct", "none"):
        raise PlanError(f"sidecar_source must be thinking/direct/none, got {sidecar_source!r}")
    default_seed = int(config.get("seed", 0))

    method_specs = config.get("methods")
    if not method_specs:
        raise PlanError("config must list at least one method")
    recipes: list[MergeRecipe] = []
    seen: set[tuple[str, float]] = set()
    for spec in method_specs:
        try:
            method = MergeMethod(spec["method"])
        except (KeyError, ValueError) as exc:
            raise PlanError(f"unknown or missing method in {spec!r}") from exc
        if method in (MergeMethod.DARE, MergeMethod.TIES, MergeMethod.EMR, MergeMethod.TWIN) \
                and base_path is None:
            raise PlanError(f"method {method.value!r} requires parents.base")
        grid = _expand_grid(spec.get("grid", [0.5]))
        _validate_grid(grid, method.value)
        template = MergeRecipe(
            method=method,
            strength=grid[0],
            drop_rate=float(spec.get("drop_rate", 0.2)),
            top_k_fraction=float(spec.get("top_k_fraction", 0.2)),
            svt_threshold_fraction=float(spec.get("svt_threshold_fraction", 0.1)),
            lore_iters=int(spec.get("lore_iters", 5)),
            seed=int(spec.get("seed", default_seed)),
        )
        for strength in grid:
            key = (method.value, strength)
            if key in seen:
                raise PlanError(f"duplicate (method, strength) pair: {key}")
            seen.add(key)
            recipes.append(replace(template, strength=strength))

    return SweepPlan(
        recipes=tuple(recipes),
        direct_path=direct_path,
        thinking_path=thinking_path,
        base_path=base_path,
        output_root=output_root,
        dtype_policy=policy,
        sidecar_source=sidecar_source,
        shard_limit_bytes=(int(config["shard_limit_bytes"])
                           if config.get("shard_limit_bytes") else None),
    )


def load_plan_file(path: str | Path) -> SweepPlan:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PlanError(f"{path}: invalid JSON: {exc}") from exc
    return plan_sweep(config)


# --- execution ----------------------------------------------------------------

def _target_dtypes(policy: DtypePolicy, direct: Checkpoint, think: Checkpoint):
    if policy is DtypePolicy.FORCE_F32:
        return DType.F32
    dtypes: dict[str, DType] = {}
    for name, meta in direct.tensors.items():
        other = think.tensors[name].dtype
        dtypes[name] = meta.dtype if meta.dtype == other else DType.F32
    return dtypes


def _compute_one(recipe: MergeRecipe, name: str, direct: Checkpoint,
                 think: Checkpoint, base: Checkpoint | None) -> tuple[str, np.ndarray]:
    d = load_tensor(direct, name).values
    t = load_tensor(think, name).values
    b = load_tensor(base, name).values if base is not None else None
    return name, merge_tensor(recipe, name, d, t, b)


def _merged_stream(recipe: MergeRecipe, direct: Checkpoint, think: Checkpoint,
                   base: Checkpoint | None, workers: int) -> Iterator[tuple[str, np.ndarray]]:
    names = direct.names()
    if workers <= 1:
        for name in names:
            yield _compute_one(recipe, name, direct, think, base)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        name_iter = iter(names)
        window: deque = deque()
        for name in itertools.islice(name_iter, workers):
            window.append(pool.submit(_compute_one, recipe, name, direct, think, base))
        while window:
            done = window.popleft()
            nxt = next(name_iter, None)
            if nxt is not None:
                window.append(pool.submit(_compute_one, recipe, nxt, direct, think, base))
            yield done.result()


def _copy_sidecars(parent: Checkpoint, out_dir: Path) -> None:
    root = parent.path
    if not root.is_dir():
        return
    for item in sorted(root.iterdir()):
        if not item.is_file():
            continue
        if item.name.endswith(_SIDECAR_EXCLUDE_SUFFIXES) or item.name == MANIFEST_FILENAME:
            continue
        shutil.copy2(item, out_dir / item.name)


def _execute_entry(plan: SweepPlan, recipe: MergeRecipe, out_dir: Path,
                   direct: Checkpoint, think: Checkpoint, base: Checkpoint | None,
                   workers: int) -> tuple[int, str]:
    """Merge every tensor for one (method, strength) pair and write the model."""
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = write_checkpoint(
        _merged_stream(recipe, direct, think, base, workers),
        out_dir,
        target_dtypes=_target_dtypes(plan.dtype_policy, direct, think),
        shard_limit_bytes=plan.shard_limit_bytes,
        role=Role.MERGED,
    )
    if plan.sidecar_source == "thinking":
        _copy_sidecars(think, out_dir)
    elif plan.sidecar_source == "direct":
        _copy_sidecars(direct, out_dir)
    return len(merged.tensors), content_digest(merged)


def merge_single(
    recipe: MergeRecipe,
    direct_path: Path,
    thinking_path: Path,
    base_path: Path | None,
    out_path: Path,
    dtype_policy: DtypePolicy = DtypePolicy.PRESERVE_SOURCE,
    shard_limit_bytes: int | None = None,
    workers: int = 1,
) -> Checkpoint:
    """Merge one checkpoint pair at a single strength, outside any sweep."""
    direct = open_checkpoint(direct_path, Role.DIRECT)
    think = open_checkpoint(thinking_path, Role.THINKING)
    base = open_checkpoint(base_path, Role.BASE) if base_path else None
    validate_aligned(direct, think)
    if base is not None:
        validate_aligned(direct, base)
    merged = write_checkpoint(
        _merged_stream(recipe, direct, think, base, workers),
        out_path,
        target_dtypes=_target_dtypes(dtype_policy, direct, think),
        shard_limit_bytes=shard_limit_bytes,
        role=Role.MERGED,
    )
    if out_path.suffix != ".safetensors":
        _copy_sidecars(think, out_path)
    return merged


def _entry_verifies(entry: SweepEntry) -> bool:
    try:
        ckpt = open_checkpoint(Path(entry.output_path), Role.MERGED)
        return content_digest(ckpt) == entry.content_digest
    except Exception:
        return False


def execute_sweep(plan: SweepPlan, workers: int = 1) -> SweepManifest:
    """Run (or resume) every entry of the plan; never aborts on a single
    entry's failure. Returns the final manifest."""
    plan.output_root.mkdir(parents=True, exist_ok=True)
    manifest_path = plan.output_root / MANIFEST_FILENAME
    digest = plan.digest()
    if manifest_path.exists():
        manifest = SweepManifest.load(manifest_path)
        if manifest.plan_digest != digest:
            raise PlanDigestMismatch(
                f"{manifest_path} was produced by a different plan; "
                "use a fresh output_root or the original plan")
    else:
        manifest = SweepManifest(plan_digest=digest)

    direct = open_checkpoint(plan.direct_path, Role.DIRECT)
    think = open_checkpoint(plan.thinking_path, Role.THINKING)
    base = open_checkpoint(plan.base_path, Role.BASE) if plan.base_path else None
    validate_aligned(direct, think)
    if base is not None:
        validate_aligned(direct, base)

    for recipe in plan.recipes:
        out_dir = plan.output_root / recipe.method.value / f"{recipe.strength:.4f}"
        entry = manifest.find(recipe.method.value, recipe.strength)
        if entry is None:
            entry = SweepEntry(method=recipe.method.value, strength=recipe.strength,
                               output_path=str(out_dir))
            manifest.entries.append(entry)
        if entry.status == "done":
            if _entry_verifies(entry):
                continue
            logger.warning("entry %s/%.4f failed digest verification; re-running",
                           entry.method, entry.strength)
        try:
            tensor_count, entry_digest = _execute_entry(
                plan, recipe, out_dir, direct, think, base, workers)
        except Exception as exc:
            entry.status = "failed"
            entry.error = f"{type(exc).__name__}: {exc}"
            entry.tensor_count = None
            entry.content_digest = None
            manifest.save(manifest_path)
            logger.error("entry %s/%.4f failed: %s", entry.method, entry.strength, exc)
            continue
        except BaseException:
            manifest.save(manifest_path)
            raise
        entry.status = "done"
        entry.error = None
        entry.tensor_count = tensor_count
        entry.content_digest = entry_digest
        manifest.save(manifest_path)

    manifest.save(manifest_path)
    return manifest
