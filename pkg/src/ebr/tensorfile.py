"""Dense float64 tensors and the ``.ebt`` binary container.

Every array the package touches (weights, clips, saliency maps) is a
C-contiguous float64 ndarray of rank 1 to 4. On disk it becomes an
``.ebt`` file:

    bytes 0..3    magic ``EBT1``
    byte  4       rank, unsigned 8-bit, 1..4
    next 4*rank   extents, unsigned 32-bit little-endian, outermost first
    payload       prod(extents) float64 values, IEEE-754 little-endian,
                  row-major (last index fastest)

Round trips are bit-exact, including NaN payloads and signed zeros, so
``.ebt`` files double as golden fixtures.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"EBT1"
MAX_RANK = 4


class TensorFileError(Exception):
    """Malformed or unreadable .ebt container."""


class BadMagicError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class RankError(TensorFileError):
    pass


def _check_rank_and_shape(shape: tuple[int, ...]) -> None:
    if not 1 <= len(shape) <= MAX_RANK:
        raise RankError(f"tensor rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(e <= 0 for e in shape):
        raise TensorFileError(f"extents must be positive, got {shape}")
    if any(e > 0xFFFFFFFF for e in shape):
        raise TensorFileError(f"extent exceeds uint32 range: {shape}")


def save_tensor(t: np.ndarray, path) -> None:
    """Write *t* to *path* in the .ebt layout."""
    t = np.asarray(t, dtype=np.float64)
    _check_rank_and_shape(t.shape)
    header = struct.pack(f"<4sB{t.ndim}I", MAGIC, t.ndim, *t.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(t).astype("<f8", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read an .ebt file back into a float64 ndarray.

    Raises BadMagicError, RankError or TruncatedPayloadError on a file
    that does not match the layout; trailing bytes are also rejected.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an EBT1 file")
    if len(raw) < 5:
        raise TruncatedPayloadError(f"{path}: missing rank byte")
    rank = raw[4]
    if not 1 <= rank <= MAX_RANK:
        raise RankError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
    header_end = 5 + 4 * rank
    if len(raw) < header_end:
        raise TruncatedPayloadError(f"{path}: truncated extent table")
    shape = struct.unpack_from(f"<{rank}I", raw, 5)
    if any(e == 0 for e in shape):
        raise TensorFileError(f"{path}: zero extent in shape {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    expected = header_end + 8 * count
    if len(raw) < expected:
        have = (len(raw) - header_end) // 8
        raise TruncatedPayloadError(
            f"{path}: payload declares {count} values but holds {have}"
        )
    if len(raw) > expected:
        raise TensorFileError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=header_end)
    return data.reshape(shape).astype(np.float64, copy=True)
