"""Dense matrices, seeded generation, precision emulation and the shared GEMM.

All values are carried as binary64. Narrower formats are emulated by rounding
at fixed points so that results are reproducible on any platform:

* ``exact64``  no rounding at all.
* ``fp32``     operands rounded to binary32, products accumulated in binary32.
* ``fp16emu``  operands rounded to binary16, products accumulated in binary32,
               each output element rounded once to binary32.

Random matrices come from numpy's PCG64 bit generator
(``numpy.random.Generator(numpy.random.PCG64(seed))``). That choice is fixed;
changing it would invalidate every frozen golden value in the test suite.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GoldenFormatError",
    "Matrix",
    "Precision",
    "TransposeCounter",
    "count_transposes",
    "gemm",
    "matrix_from_seed",
    "read_golden",
    "rmse",
    "round_half",
    "round_half_array",
    "round_single_array",
    "transpose",
    "write_golden",
]


class DimensionError(ValueError):
    """Raised when matrix shapes are empty or do not conform."""


class GoldenFormatError(ValueError):
    """Raised when a golden matrix file is malformed."""


class Precision(str, enum.Enum):
    EXACT64 = "exact64"
    FP32 = "fp32"
    FP16EMU = "fp16emu"

    @classmethod
    def parse(cls, value: "Precision | str") -> "Precision":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown precision {value!r} (expected one of {choices})") from None


@dataclass(frozen=True, eq=False)
class Matrix:
    """Immutable dense row-major binary64 matrix.

    ``values`` is a read-only ``(rows, cols)`` float64 array. Construction copies
    the input so a Matrix never aliases caller-owned memory.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"matrix must be 2-D, got {arr.ndim}-D")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"matrix dimensions must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_flat(cls, rows: int, cols: int, data: Sequence[float]) -> "Matrix":
        if rows < 1 or cols < 1:
            raise DimensionError(f"matrix dimensions must be >= 1, got ({rows}, {cols})")
        flat = np.asarray(data, dtype=np.float64)
        if flat.size != rows * cols:
            raise DimensionError(f"expected {rows * cols} values for {rows}x{cols}, got {flat.size}")
        return cls(flat.reshape(rows, cols))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def data(self) -> tuple[float, ...]:
        """Row-major flat view of the entries."""
        return tuple(self.values.ravel().tolist())

    def __getitem__(self, index: tuple[int, int]) -> float:
        i, j = index
        return float(self.values[i, j])

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    def row_block(self, start: int, stop: int) -> "Matrix":
        return Matrix(self.values[start:stop])

    def max_abs_diff(self, other: "Matrix") -> float:
        _check_same_shape(self, other)
        return float(np.max(np.abs(self.values - other.values)))


def _check_same_shape(a: Matrix, b: Matrix) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def matrix_from_seed(
    rows: int,
    cols: int,
    seed: int,
    dist: Literal["normal", "uniform"] = "normal",
) -> Matrix:
    """Deterministic random matrix: N(0, 1) or U(-1, 1) entries from PCG64(seed)."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"matrix dimensions must be >= 1, got ({rows}, {cols})")
    rng = np.random.Generator(np.random.PCG64(seed))
    if dist == "normal":
        values = rng.standard_normal((rows, cols))
    elif dist == "uniform":
        values = rng.uniform(-1.0, 1.0, (rows, cols))
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return Matrix(values)


def round_half_array(x: np.ndarray) -> np.ndarray:
    # numpy converts float64 -> float16 directly (no float32 detour), with RNE.
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)


def round_single_array(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def round_half(x: float) -> float:
    """Round ``x`` to the nearest binary16 value (ties to even), returned as a float.

    Values at or past the halfway point above 65504 become infinity; NaN stays NaN.
    """
    return float(round_half_array(np.float64(x)))


def round_to(precision: Precision, x: np.ndarray) -> np.ndarray:
    """Round a storage operand according to ``precision``."""
    if precision is Precision.FP16EMU:
        return round_half_array(x)
    if precision is Precision.FP32:
        return round_single_array(x)
    return np.asarray(x, dtype=np.float64)


def gemm_array(
    a: np.ndarray,
    b: np.ndarray,
    trans_a: bool = False,
    trans_b: bool = False,
    precision: Precision = Precision.EXACT64,
) -> np.ndarray:
    """Array-level kernel behind :func:`gemm`; skips Matrix wrapping in hot loops."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("gemm operands must be 2-D")
    # contiguous operands: flagged and pre-transposed inputs take the same BLAS path
    opa = np.ascontiguousarray(a.T if trans_a else a)
    opb = np.ascontiguousarray(b.T if trans_b else b)
    if opa.shape[1] != opb.shape[0]:
        raise DimensionError(
            f"gemm inner dimensions disagree: {opa.shape} x {opb.shape}"
            f" (trans_a={trans_a}, trans_b={trans_b})"
        )
    if precision is Precision.EXACT64:
        return opa @ opb
    # binary16 x binary16 products are exact in binary32, so a float32 GEMM is a
    # faithful model of FP16-multiply / FP32-accumulate.
    narrow = np.float16 if precision is Precision.FP16EMU else np.float32
    with np.errstate(over="ignore", invalid="ignore"):
        a32 = opa.astype(narrow).astype(np.float32)
        b32 = opb.astype(narrow).astype(np.float32)
    return (a32 @ b32).astype(np.float64)


def gemm(
    a: Matrix,
    b: Matrix,
    trans_a: bool = False,
    trans_b: bool = False,
    precision: Precision | str = Precision.EXACT64,
) -> Matrix:
    """op(A) @ op(B) where op transposes when the matching flag is set."""
    return Matrix(gemm_array(a.values, b.values, trans_a, trans_b, Precision.parse(precision)))


def rmse(a: Matrix, b: Matrix) -> float:
    _check_same_shape(a, b)
    diff = a.values - b.values
    return float(np.sqrt(np.mean(diff * diff)))


class TransposeCounter:
    """Tally of materialized transposes performed while the counter is active."""

    def __init__(self) -> None:
        self.count = 0


_active_counter: contextvars.ContextVar[TransposeCounter | None] = contextvars.ContextVar(
    "etaplab_transpose_counter", default=None
)


@contextlib.contextmanager
def count_transposes() -> Iterator[TransposeCounter]:
    """Count calls to :func:`transpose` made inside the ``with`` block.

    The counter is context-local, so concurrent callers do not see each other's counts.
    """
    counter = TransposeCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def transpose_array(x: np.ndarray) -> np.ndarray:
    counter = _active_counter.get()
    if counter is not None:
        counter.count += 1
    return np.ascontiguousarray(x.T)


def transpose(m: Matrix) -> Matrix:
    return Matrix(transpose_array(m.values))


# Golden file: b"ATNM" | u32 rows | u32 cols | rows*cols f32, all little-endian.
_MAGIC = b"ATNM"
_HEADER = struct.Struct("<4sII")


def encode_golden(m: Matrix) -> bytes:
    payload = m.values.astype("<f4").tobytes(order="C")
    return _HEADER.pack(_MAGIC, m.rows, m.cols) + payload


def decode_golden(blob: bytes) -> Matrix:
    if len(blob) < _HEADER.size:
        raise GoldenFormatError(f"truncated header: {len(blob)} bytes")
    magic, rows, cols = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise GoldenFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if rows < 1 or cols < 1:
        raise GoldenFormatError(f"invalid dimensions {rows}x{cols}")
    expected = _HEADER.size + 4 * rows * cols
    if len(blob) < expected:
        raise GoldenFormatError(f"truncated payload: {len(blob)} of {expected} bytes")
    if len(blob) > expected:
        raise GoldenFormatError(f"{len(blob) - expected} trailing bytes after payload")
    values = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return Matrix(values.astype(np.float64).reshape(rows, cols))


def write_golden(path: str | Path, m: Matrix) -> None:
    Path(path).write_bytes(encode_golden(m))


def read_golden(path: str | Path) -> Matrix:
    return decode_golden(Path(path).read_bytes())
