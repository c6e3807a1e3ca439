"""Dense in-place kernels for the block Cholesky update.

Every matrix is row-major (C order). LAPACK/BLAS expect column-major, so a
C-contiguous array ``a`` is handed over as ``a.T``, which is the same memory
viewed in Fortran order. A row-major lower-triangular factor is therefore a
column-major upper-triangular one, and all calls below use ``lower=0``.

Kernels that take an ``out`` or ``work`` argument write only into those
buffers; they allocate nothing as long as the buffers are C-contiguous and of
the working dtype.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.linalg import blas, lapack

from .errors import (
    BudgetExceeded,
    DimensionMismatch,
    NonFiniteResult,
    NotPositiveDefinite,
    SingularFactor,
)

SUPPORTED_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))

# Incremented by every buffer allocation made through allocate(); tests use
# it to check that the candidate-evaluation loop allocates nothing.
allocation_count = 0


def allocate(size: int, dtype=np.float64) -> np.ndarray:
    """Zero-filled flat buffer, counted by the allocation hook."""
    global allocation_count
    allocation_count += 1
    return np.zeros(size, dtype=dtype)


def square_view(flat: np.ndarray, n: int) -> np.ndarray:
    """Contiguous ``n x n`` view over the head of a flat buffer."""
    return flat[: n * n].reshape(n, n)


def rect_view(flat: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return flat[: rows * cols].reshape(rows, cols)


@lru_cache(maxsize=None)
def _potrf(dtype: np.dtype):
    return lapack.get_lapack_funcs("potrf", dtype=dtype)


@lru_cache(maxsize=None)
def _trsm(dtype: np.dtype):
    return blas.get_blas_funcs("trsm", dtype=dtype)


def _check_buffer(a: np.ndarray, name: str) -> None:
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype not in SUPPORTED_DTYPES:
        raise TypeError(f"{name} must be float64 or float32, got {a.dtype}")
    if not a.flags.c_contiguous:
        raise ValueError(f"{name} must be C-contiguous for in-place operation")


def cholesky_in_place(block: np.ndarray) -> np.ndarray:
    """Overwrite the SPD matrix ``block`` with its lower Cholesky factor.

    Only the lower triangle is read. The upper triangle is zeroed on return.
    A failed pivot raises :class:`NotPositiveDefinite`; no jitter is added.
    """
    _check_buffer(block, "block")
    n, m = block.shape
    if n != m:
        raise DimensionMismatch(f"block must be square, got {block.shape}")
    if n == 0:
        return block
    _, info = _potrf(block.dtype)(block.T, lower=0, overwrite_a=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info - 1)
    if info < 0:
        raise ValueError(f"potrf rejected argument {-info}")
    if not math.isfinite(block.trace()):
        diag = block.diagonal()
        bad = next(i for i in range(n) if not math.isfinite(diag[i]))
        raise NotPositiveDefinite(bad, f"non-finite pivot at {bad}")
    return block


def cholesky(a: np.ndarray) -> np.ndarray:
    """Out-of-place convenience wrapper around :func:`cholesky_in_place`."""
    out = np.array(a, dtype=np.result_type(a, np.float32), order="C", copy=True)
    return cholesky_in_place(out)


def solve_lower_triangular(
    L: np.ndarray, rhs: np.ndarray, out: np.ndarray | None = None, check: bool = True
) -> np.ndarray:
    """Forward substitution ``L Y = rhs`` written into ``out``.

    ``out`` may be ``rhs`` itself. With ``check`` the diagonal of ``L`` is
    scanned for zero or non-finite entries first.
    """
    _check_buffer(L, "L")
    n = L.shape[0]
    if L.shape[1] != n or rhs.ndim != 2 or rhs.shape[0] != n:
        raise DimensionMismatch(f"cannot solve {L.shape} factor against {rhs.shape}")
    if out is None:
        out = np.array(rhs, dtype=L.dtype, order="C")
    else:
        _check_buffer(out, "out")
        if out.shape != rhs.shape:
            raise DimensionMismatch(f"out has shape {out.shape}, expected {rhs.shape}")
        if out is not rhs:
            np.copyto(out, rhs)
    if n == 0 or out.shape[1] == 0:
        return out
    if check:
        diag = L.diagonal()
        if not (np.isfinite(diag).all() and diag.all()):
            bad = next(i for i in range(n) if not (math.isfinite(diag[i]) and diag[i] != 0))
            raise SingularFactor(bad)
    # Y^T L^T = R^T: a right-side solve against the column-major upper factor.
    _trsm(L.dtype)(1.0, L.T, out.T, side=1, lower=0, trans_a=0, overwrite_b=1)
    return out


def schur_complement(
    K_ss: np.ndarray,
    Y_s: np.ndarray,
    out: np.ndarray | None = None,
    work: np.ndarray | None = None,
) -> np.ndarray:
    """``K_ss - Y_s^T Y_s``, symmetrized as ``(M + M^T) / 2``."""
    nt = K_ss.shape[0]
    if K_ss.ndim != 2 or K_ss.shape[1] != nt or Y_s.ndim != 2 or Y_s.shape[1] != nt:
        raise DimensionMismatch(f"incompatible shapes {K_ss.shape} and {Y_s.shape}")
    if out is None:
        out = np.empty_like(K_ss, order="C")
    if work is None:
        work = np.empty_like(out)
    np.matmul(Y_s.T, Y_s, out=work)
    np.subtract(K_ss, work, out=out)
    np.add(out, out.T, out=work)
    np.multiply(work, 0.5, out=out)
    return out


def logdet_from_factor(L: np.ndarray, work: np.ndarray | None = None) -> float:
    """``2 * sum(log(diag(L)))`` accumulated in float64."""
    n = L.shape[0]
    if n == 0:
        return 0.0
    diag = L.diagonal()
    if not diag.min() > 0:
        raise NonFiniteResult("factor has a non-positive or NaN diagonal entry")
    if work is None:
        work = np.empty(n, dtype=L.dtype)
    logs = np.log(diag, out=work[:n])
    value = 2.0 * float(logs.sum(dtype=np.float64))
    if not math.isfinite(value):
        raise NonFiniteResult(f"log-determinant is {value}")
    return value


def grow_square_in_place(flat: np.ndarray, n: int, m: int) -> None:
    """Re-stride the ``n x n`` head of ``flat`` to the top-left of ``m x m``.

    Rows move back to front so no row overwrites one that has not been moved
    yet. The new right-hand columns of the old rows are zeroed; the new
    bottom rows are left for the caller.
    """
    if m < n or m * m > flat.size:
        raise BudgetExceeded(f"cannot grow {n}x{n} to {m}x{m} in a buffer of {flat.size}")
    for i in range(n - 1, -1, -1):
        if i:
            flat[i * m : i * m + n] = flat[i * n : i * n + n]
        flat[i * m + n : (i + 1) * m] = 0


class LowerTriangularFactor:
    """Growing block Cholesky factor held in one preallocated buffer.

    ``storage`` has room for ``capacity x capacity`` entries. The active
    factor is the contiguous ``active_dim x active_dim`` head of the buffer,
    so BLAS sees it without a copy. Appending a block column re-strides it in
    place; nothing is allocated after construction.
    """

    def __init__(self, capacity_blocks: int, block_size: int, dtype=np.float64):
        if capacity_blocks < 0 or block_size < 1:
            raise ValueError("capacity_blocks must be >= 0 and block_size >= 1")
        self.block_size = block_size
        self.capacity = capacity_blocks * block_size
        self.dtype = np.dtype(dtype)
        self.storage = allocate(self.capacity * self.capacity, self.dtype)
        self.active_dim = 0

    @property
    def n_blocks(self) -> int:
        return self.active_dim // self.block_size

    def view(self) -> np.ndarray:
        return square_view(self.storage, self.active_dim)

    def append_block_column(self, Y: np.ndarray, L_M: np.ndarray) -> None:
        append_block_column(self, Y, L_M)

    def logdet(self) -> float:
        return logdet_from_factor(self.view())

    def reconstruct(self) -> np.ndarray:
        L = self.view().astype(np.float64)
        return L @ L.T

    def reset(self) -> None:
        self.active_dim = 0

    def load(self, L: np.ndarray) -> None:
        """Replace the active factor with a full factor computed elsewhere."""
        n = L.shape[0]
        if n % self.block_size or n > self.capacity:
            raise BudgetExceeded(f"factor of dim {n} does not fit")
        square_view(self.storage, n)[...] = L
        self.active_dim = n


def append_block_column(L: LowerTriangularFactor, Y: np.ndarray, L_M: np.ndarray) -> None:
    """Extend ``L`` to ``[[L, 0], [Y^T, L_M]]`` inside its own buffer."""
    n, b = L.active_dim, L.block_size
    m = n + b
    if m > L.capacity:
        raise BudgetExceeded(f"factor already holds {L.n_blocks} blocks")
    if L_M.shape != (b, b) or Y.shape != (n, b):
        raise DimensionMismatch(f"expected Y {(n, b)} and L_M {(b, b)}, got {Y.shape}, {L_M.shape}")
    diag = L_M.diagonal()
    if not diag.min() > 0:
        raise SingularFactor(n + int(np.argmin(diag)))
    grow_square_in_place(L.storage, n, m)
    tail = rect_view(L.storage[n * m :], b, m)
    tail[:, :n] = Y.T
    tail[:, n:] = L_M
    L.active_dim = m
