#!/usr/bin/env python3
"""Generate a synthetic base/direct/think checkpoint triple for experiments.

The three models share a base; direct and think are independent Gaussian
perturbations of it, so delta-based merge methods have meaningful task
vectors to work with. Layout mirrors a small 2-layer transformer.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from mergespectrum.tensor_store import DType, Role, write_checkpoint


def layer_shapes(layers: int, width: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (4 * width, width)}
    for i in range(layers):
        shapes[f"layers.{i}.attn.weight"] = (width, width)
        shapes[f"layers.{i}.mlp.weight"] = (width, 4 * width)
        shapes[f"layers.{i}.norm.weight"] = (width,)
    shapes["head.weight"] = (width, 4 * width)
    return shapes


def generate(out: Path, seed: int = 0, layers: int = 2, width: int = 16,
             delta_scale: float = 0.05, dtype: DType = DType.F32,
             shard_limit_bytes: int | None = None) -> None:
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(layers, width)
    base = {name: rng.normal(0.0, 0.5, shape).astype(np.float32)
            for name, shape in shapes.items()}
    variants = {
        "base": (base, Role.BASE),
        "direct": ({n: (a + rng.normal(0.0, delta_scale, a.shape)).astype(np.float32)
                    for n, a in base.items()}, Role.DIRECT),
        "think": ({n: (a + rng.normal(0.0, delta_scale, a.shape)).astype(np.float32)
                   for n, a in base.items()}, Role.THINKING),
    }
    for label, (arrays, role) in variants.items():
        out_dir = Path(out) / label
        ckpt = write_checkpoint(sorted(arrays.items()), out_dir, target_dtypes=dtype,
                                shard_limit_bytes=shard_limit_bytes, role=role)
        (out_dir / "config.json").write_text(
            json.dumps({"model_type": "toy", "role": label,
                        "layers": layers, "width": width}), encoding="utf-8")
        print(f"wrote {label}: {len(ckpt.tensors)} tensors, "
              f"{ckpt.param_count} params -> {out_dir}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory for the triple")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--width", type=int, default=16)
    parser.add_argument("--delta-scale", type=float, default=0.05,
                        help="std-dev of the fine-tune perturbations")
    parser.add_argument("--dtype", choices=[d.value for d in DType], default="F32")
    parser.add_argument("--shard-limit-bytes", type=int, default=None)
    args = parser.parse_args()
    generate(Path(args.out), seed=args.seed, layers=args.layers, width=args.width,
             delta_scale=args.delta_scale, dtype=DType(args.dtype),
             shard_limit_bytes=args.shard_limit_bytes)


if __name__ == "__main__":
    main()
