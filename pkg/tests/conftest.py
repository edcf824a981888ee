import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from mergespectrum.tensor_store import DType, Role, write_checkpoint

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")

TOY_SHAPES = {
    "embed.weight": (6, 4),
    "layers.0.attn.weight": (4, 4),
    "layers.0.mlp.weight": (4, 6),
    "layers.0.norm.weight": (4,),
    "layers.1.attn.weight": (4, 4),
    "layers.1.mlp.weight": (6, 4),
    "layers.1.norm.weight": (4,),
    "head.weight": (4, 6),
}


def make_toy_tensors(seed: int = 0) -> dict[str, dict[str, np.ndarray]]:
    """Synthetic 2-layer parent triple: base plus two nearby fine-tunes."""
    rng = np.random.default_rng(seed)
    base = {name: rng.normal(0.0, 0.5, shape).astype(np.float32)
            for name, shape in TOY_SHAPES.items()}
    direct = {name: (arr + rng.normal(0.0, 0.05, arr.shape)).astype(np.float32)
              for name, arr in base.items()}
    think = {name: (arr + rng.normal(0.0, 0.05, arr.shape)).astype(np.float32)
             for name, arr in base.items()}
    return {"base": base, "direct": direct, "think": think}


def write_toy_family(root: Path, seed: int = 0, dtype: DType = DType.F32,
                     shard_limit_bytes: int | None = None,
                     with_sidecars: bool = True) -> dict[str, Path]:
    """Write base/direct/think parent checkpoints as model directories."""
    tensors = make_toy_tensors(seed)
    roles = {"base": Role.BASE, "direct": Role.DIRECT, "think": Role.THINKING}
    paths = {}
    for label, arrays in tensors.items():
        out_dir = root / label
        write_checkpoint(sorted(arrays.items()), out_dir, target_dtypes=dtype,
                         shard_limit_bytes=shard_limit_bytes, role=roles[label])
        if with_sidecars:
            (out_dir / "config.json").write_text(
                json.dumps({"model_type": "toy", "role": label}), encoding="utf-8")
            (out_dir / "tokenizer.json").write_text(
                json.dumps({"vocab": {"a": 0, "b": 1}}), encoding="utf-8")
        paths[label] = out_dir
    return paths


@pytest.fixture
def toy_tensors():
    return make_toy_tensors(seed=7)


@pytest.fixture
def toy_family(tmp_path):
    return write_toy_family(tmp_path, seed=7)


def f32_order(values: np.ndarray) -> np.ndarray:
    """Map float32 bit patterns onto a monotone integer line."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.int64)
    return np.where(u & 0x80000000, 0xFFFFFFFF - u, 0x80000000 + u)


def ulp_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(f32_order(a) - f32_order(b))


def lattice_floats(rng: np.random.Generator, n: int, step: float = 2.0 ** -10,
                   span: int = 2048) -> np.ndarray:
    """Random floats on a dyadic lattice: sums/products of a few of them are
    exact in both float32 and float64, making oracle comparisons exact."""
    return (rng.integers(-span, span + 1, size=n) * step).astype(np.float32)
