"""Deterministic per-tensor random streams.

Masks must be reproducible under parallel and resumed execution, so each
tensor gets its own counter-based Philox stream keyed by a hash of
(seed, method, role, tensor name). No stream is ever shared or advanced
by another tensor's work.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Generator, Philox


def mask_generator(seed: int, method: str, role: str, tensor_name: str) -> Generator:
    material = f"{seed}|{method}|{role}|{tensor_name}".encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return Generator(Philox(key=int.from_bytes(digest[:16], "little")))


def drop_mask(gen: Generator, n: int, drop_rate: float) -> np.ndarray:
    """Boolean keep-mask: True with probability 1 - drop_rate."""
    return gen.random(n) >= drop_rate
