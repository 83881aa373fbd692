"""Dense float32 tensor file I/O and 2-D summed-area tables.

Tensors travel between tools as NPY v1.0 files: 6-byte magic ``\\x93NUMPY``,
version (1, 0), a little-endian uint16 header length, then an ASCII dict
declaring ``descr: '<f4'``, ``fortran_order: False`` and the shape, padded
with spaces and a trailing newline so the payload starts on a 64-byte
boundary.  The payload is little-endian float32 in row-major order.  Readers
reject anything else, so a file either round-trips bit-exactly or fails
loudly.

Summed-area tables give any rectangular window sum in O(1).  Alongside the
top-left prefix table we keep the mirrored bottom-right suffix table: the
masking fast path sums the four strips around a window using only entries
whose accumulation never touches the window interior, which makes masked
predictions exactly independent of in-window values (bit for bit), not just
approximately so.
"""

from __future__ import annotations

import ast
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from maskcert.errors import BoundsError, TensorFormatError, TensorValidationError

MAGIC = b"\x93NUMPY"
HEADER_ALIGN = 64
MAX_NDIM = 4


def _validate_payload(arr: np.ndarray, where: str) -> np.ndarray:
    if arr.ndim > MAX_NDIM:
        raise TensorValidationError(f"{where}: {arr.ndim} dims, at most {MAX_NDIM} supported")
    if not np.all(np.isfinite(arr)):
        raise TensorValidationError(f"{where}: payload contains NaN or Inf")
    return arr


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write ``arr`` as a little-endian float32 NPY v1.0 file.

    Input is cast to float32; non-finite values (before or after the cast)
    are rejected.
    """
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    _validate_payload(arr, str(path))
    header = "{'descr': '<f4', 'fortran_order': False, 'shape': %s, }" % (
        str(tuple(int(n) for n in arr.shape)),
    )
    # magic(6) + version(2) + hlen(2) + header + '\n' padded to a 64-byte boundary
    unpadded = len(MAGIC) + 2 + 2 + len(header) + 1
    pad = (-unpadded) % HEADER_ALIGN
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("latin1"))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a float32 NPY v1.0 file written by :func:`save_tensor`.

    Returns a C-contiguous float32 array.  Malformed files raise
    :class:`TensorFormatError`; a well-formed file carrying NaN/Inf raises
    :class:`TensorValidationError`.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10 or raw[:6] != MAGIC:
        raise TensorFormatError(f"{path}: not a tensor file (bad magic)")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise TensorFormatError(f"{path}: unsupported format version {major}.{minor}")
    (hlen,) = struct.unpack("<H", raw[8:10])
    header_end = 10 + hlen
    if len(raw) < header_end:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        meta = ast.literal_eval(raw[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise TensorFormatError(f"{path}: unparseable header") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise TensorFormatError(f"{path}: header is not a dtype/order/shape dict")
    if meta["descr"] != "<f4":
        raise TensorFormatError(f"{path}: dtype {meta['descr']!r}, only '<f4' accepted")
    if meta["fortran_order"] is not False:
        raise TensorFormatError(f"{path}: column-major files are rejected")
    shape = meta["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise TensorFormatError(f"{path}: bad shape {shape!r}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = header_end + 4 * count
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise TensorFormatError(f"{path}: {kind} payload ({len(raw)} bytes, expected {expected})")
    arr = np.frombuffer(raw[header_end:], dtype="<f4").reshape(shape)
    return _validate_payload(np.ascontiguousarray(arr, dtype=np.float32), str(path))


@dataclass(frozen=True)
class SummedAreaTable:
    """Prefix sums of an H x W x C map, with the mirrored suffix table.

    ``prefix[i, j, k]`` is the sum of the source over rows < i and cols < j;
    its first row and column are zero and ``prefix[H, W, k]`` is the total.
    ``suffix[i, j, k]`` sums rows >= i and cols >= j.  Both accumulate in
    float64.
    """

    prefix: np.ndarray  # (H+1, W+1, C) float64
    suffix: np.ndarray  # (H+1, W+1, C) float64

    @property
    def source_shape(self) -> tuple[int, int, int]:
        h, w, c = self.prefix.shape
        return h - 1, w - 1, c

    @property
    def totals(self) -> np.ndarray:
        """Per-channel sum of the whole source map."""
        return self.prefix[-1, -1]


def build_sat(m: np.ndarray) -> SummedAreaTable:
    """Build prefix and suffix summed-area tables for an H x W x C map."""
    if m.ndim == 2:
        m = m[:, :, None]
    if m.ndim != 3:
        raise TensorValidationError(f"expected an H x W x C map, got {m.ndim} dims")
    if not np.all(np.isfinite(m)):
        raise TensorValidationError("source map contains NaN or Inf")
    h, w, c = m.shape
    prefix = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    prefix[1:, 1:] = m.cumsum(axis=0, dtype=np.float64).cumsum(axis=1)
    suffix = np.zeros((h + 1, w + 1, c), dtype=np.float64)
    suffix[:h, :w] = m[::-1, ::-1].cumsum(axis=0, dtype=np.float64).cumsum(axis=1)[::-1, ::-1]
    return SummedAreaTable(prefix=prefix, suffix=suffix)


def window_sum(sat: SummedAreaTable, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Per-channel sum over ``rect = (top, left, height, width)`` via 4 lookups."""
    i, j, h, w = rect
    src_h, src_w, _ = sat.source_shape
    if h < 0 or w < 0 or i < 0 or j < 0 or i + h > src_h or j + w > src_w:
        raise BoundsError(f"rect {rect} outside {src_h}x{src_w} map")
    p = sat.prefix
    return p[i + h, j + w] - p[i, j + w] - p[i + h, j] + p[i, j]
