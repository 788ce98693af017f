"""Dense float64 matrix/tensor helpers shared by every other module.

Values are plain numpy arrays; this module pins the conventions the rest of
the package relies on: 64-bit floats, row-major contiguous storage with
``(k, i, j)`` linearization for rank-3 tensors, and finite entries. Matrices
stay small (a few hundred per side at most), so numpy is the whole story --
no sparse formats, no GPU.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "as_mat",
    "as_tensor3",
    "check_finite",
    "matmul",
    "hadamard",
    "colsum",
    "frobenius_inner",
]


class ShapeError(ValueError):
    """Operands have incompatible or unexpected shapes."""


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def as_mat(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 matrix, checking shape and finiteness."""
    a = np.ascontiguousarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if rows is not None and a.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {a.shape[1]}")
    return check_finite(a, "matrix")


def as_tensor3(data, k: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 rank-3 tensor (k, rows, cols)."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if t.ndim != 3:
        raise ShapeError(f"expected a rank-3 tensor, got ndim={t.ndim}")
    if k is not None and t.shape[0] != k:
        raise ShapeError(f"expected leading dimension {k}, got {t.shape[0]}")
    return check_finite(t, "tensor")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entrywise product of two same-shape matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def colsum(a: np.ndarray) -> np.ndarray:
    """Column sums as a 1-D vector of length ``a.shape[1]``."""
    return np.asarray(a).sum(axis=0)


def frobenius_inner(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius inner product: sum of entrywise products, tr(a^T b)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))
