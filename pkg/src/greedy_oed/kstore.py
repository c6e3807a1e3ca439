"""KBF: a flat on-disk layout for K with block-granular random reads.

Layout (all little-endian)::

    offset  size  field
    0       4     magic  b"KBF1"
    4       4     version        u32 (1)
    8       4     n_sensors      u32
    12      4     n_steps        u32
    16      4     dtype code     u32 (1 = float64)
    20      4     block ordering u32 (0 = block-row-major)
    24      8     zero padding
    32      ...   payload: n_sensors**2 blocks, block (i, j) at
                  32 + (i * n_sensors + j) * n_steps**2 * 8,
                  each block n_steps x n_steps row-major

Both (i, j) and (j, i) are stored so every block read is a single seek.
Per-sensor noise variances, needed for the normalized objective, go to a
JSON sidecar ``<path>.meta.json``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DimensionMismatch, IndexOutOfRange, InvalidMatrix

MAGIC = b"KBF1"
VERSION = 1
DTYPE_F64 = 1
ORDER_BLOCK_ROW_MAJOR = 0
HEADER = struct.Struct("<4sIIIII8x")
HEADER_SIZE = HEADER.size  # 32
ITEM = np.dtype("<f8")


def payload_size(n_sensors: int, n_steps: int) -> int:
    return n_sensors * n_sensors * n_steps * n_steps * ITEM.itemsize


def file_size(n_sensors: int, n_steps: int) -> int:
    return HEADER_SIZE + payload_size(n_sensors, n_steps)


def meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_k(K, path, symmetry_rtol: float = 1e-10) -> None:
    """Write a :class:`DataSpaceHessian` to ``path`` in KBF format."""
    nd, nt = K.n_sensors, K.n_steps
    matrix = np.asarray(K.matrix, dtype=np.float64)
    if matrix.shape != (nd * nt, nd * nt):
        raise InvalidMatrix(f"matrix shape {matrix.shape} does not match {nd} sensors x {nt} steps")
    scale = float(np.abs(matrix).max()) or 1.0
    asym = float(np.abs(matrix - matrix.T).max())
    if not asym <= symmetry_rtol * scale:
        raise InvalidMatrix(f"refusing to write a non-symmetric K (max asymmetry {asym:.3e})")
    blocks = matrix.reshape(nd, nt, nd, nt).transpose(0, 2, 1, 3)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, nd, nt, DTYPE_F64, ORDER_BLOCK_ROW_MAJOR))
        f.write(np.ascontiguousarray(blocks, dtype=ITEM).tobytes())
    meta = {"n_sensors": nd, "n_steps": nt}
    if getattr(K, "noise_diag", None) is not None:
        meta["noise_diag"] = [float(x) for x in K.noise_diag]
    meta_path(path).write_text(json.dumps(meta, indent=2))


class KStore:
    """Read-only handle on a KBF file.

    Reads use ``os.preadv`` on one shared descriptor, so any number of threads
    can read concurrently and no read allocates a buffer of its own.
    """

    def __init__(self, path, noise_diag=None):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            self._read_header()
        except BaseException:
            os.close(self._fd)
            raise
        self._block_bytes = self.n_steps * self.n_steps * ITEM.itemsize
        if noise_diag is None and meta_path(self.path).exists():
            noise_diag = json.loads(meta_path(self.path).read_text()).get("noise_diag")
        self.noise_diag = None if noise_diag is None else np.asarray(noise_diag, dtype=np.float64)

    def _read_header(self) -> None:
        raw = os.pread(self._fd, HEADER_SIZE, 0)
        if len(raw) < HEADER_SIZE:
            raise CorruptFile(f"{self.path}: header truncated ({len(raw)} bytes)")
        magic, version, nd, nt, dtype, order = HEADER.unpack(raw)
        if magic != MAGIC:
            raise CorruptFile(f"{self.path}: bad magic {magic!r}")
        if version != VERSION or dtype != DTYPE_F64 or order != ORDER_BLOCK_ROW_MAJOR:
            raise CorruptFile(f"{self.path}: unsupported version/dtype/order {version}/{dtype}/{order}")
        self.n_sensors, self.n_steps = nd, nt
        actual = os.fstat(self._fd).st_size
        if actual != file_size(nd, nt):
            raise CorruptFile(f"{self.path}: size {actual} != expected {file_size(nd, nt)}")

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def offset(self, i: int, j: int) -> int:
        return HEADER_SIZE + (i * self.n_sensors + j) * self._block_bytes

    def _check_index(self, i: int, j: int) -> None:
        if not (0 <= i < self.n_sensors and 0 <= j < self.n_sensors):
            raise IndexOutOfRange(f"block ({i}, {j}) outside {self.n_sensors} x {self.n_sensors}")

    def _pread_into(self, out: np.ndarray, offset: int) -> None:
        got = os.preadv(self._fd, [memoryview(out).cast("B")], offset)
        if got != out.nbytes:
            raise CorruptFile(f"{self.path}: short read at offset {offset} ({got} of {out.nbytes} bytes)")

    def read_block(self, i: int, j: int, out: np.ndarray) -> None:
        self._check_index(i, j)
        if out.shape != (self.n_steps, self.n_steps) or out.dtype != ITEM or not out.flags.c_contiguous:
            raise DimensionMismatch(f"out must be a C-contiguous float64 {self.n_steps}x{self.n_steps} block")
        self._pread_into(out, self.offset(i, j))

    def read_test_column(self, S, s: int, out: np.ndarray) -> None:
        """Stack blocks ``(S[0], s), ..., (S[k-1], s)`` into ``out``."""
        b = self.n_steps
        if out.shape != (len(S) * b, b) or out.dtype != ITEM or not out.flags.c_contiguous:
            raise DimensionMismatch(f"out must be a C-contiguous float64 {(len(S) * b, b)} array")
        for r, i in enumerate(S):
            self._check_index(i, s)
            self._pread_into(out[r * b : (r + 1) * b], self.offset(i, s))

    def to_dense(self) -> np.ndarray:
        nd, nt = self.n_sensors, self.n_steps
        out = np.empty((nd, nd, nt, nt))
        for i in range(nd):
            for j in range(nd):
                self.read_block(i, j, out[i, j])
        return out.transpose(0, 2, 1, 3).reshape(nd * nt, nd * nt)


def open_store(path, noise_diag=None) -> KStore:
    return KStore(path, noise_diag)
