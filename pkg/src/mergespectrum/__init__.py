"""Training-free merging of direct/thinking checkpoint pairs, with
parameter-divergence analysis and accuracy-efficiency analytics."""

__version__ = "0.1.0"

from .merge_methods import MergeMethod, MergeRecipe, merge_tensor
from .tensor_store import (
    Checkpoint,
    DType,
    Role,
    TensorBuffer,
    TensorMeta,
    load_tensor,
    open_checkpoint,
    write_checkpoint,
)

__all__ = [
    "__version__",
    "Checkpoint",
    "DType",
    "MergeMethod",
    "MergeRecipe",
    "Role",
    "TensorBuffer",
    "TensorMeta",
    "load_tensor",
    "merge_tensor",
    "open_checkpoint",
    "write_checkpoint",
]
