"""Numeric substrate: autodiff tape, Jacobi SVD, Adam, seeded randomness."""

import numpy as np

from .autodiff import Tensor, as_tensor, concat_rows, no_grad_value, spmm
from .linalg import (
    InvalidInputError,
    check_finite,
    matrix_from_bytes,
    matrix_to_bytes,
    read_matrix,
    spectral_norm,
    svd,
    write_matrix,
)
from .optim import (
    AdamState,
    ContractError,
    GradCheckReport,
    adam_step,
    finite_diff_check,
    grad_of,
)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the same seed gives the same stream."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``, e.g. per-instance workers."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, keys)])
    return np.random.Generator(np.random.Philox(ss))


__all__ = [
    "Tensor", "as_tensor", "concat_rows", "no_grad_value", "spmm",
    "InvalidInputError", "check_finite", "svd", "spectral_norm",
    "matrix_to_bytes", "matrix_from_bytes", "read_matrix", "write_matrix",
    "AdamState", "ContractError", "GradCheckReport", "adam_step",
    "finite_diff_check", "grad_of", "make_rng", "child_rng",
]
