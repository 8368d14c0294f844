"""Binary tensor records and checkpoint files.

Tensor record (little-endian)::

    b"FANT" | u8 precision | u8 rank | rank x u64 dims | raw elements

Precision codes: 1 = float32, 2 = float64, 3 = int64, 4 = uint8.

Checkpoint::

    u64 header length | header JSON (utf-8) | tensor records in registry order

The header carries ``"params"``, the list of parameter names in record order.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FanError

MAGIC = b"FANT"
_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(FanError, ValueError):
    pass


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{what} contains non-finite values")
    return arr


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _CODES[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor record")
    return buf


def read_tensor(fh) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad tensor magic")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _DTYPES:
        raise FormatError(f"unknown precision code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = _read_exact(fh, count * dt.itemsize)
    return np.frombuffer(data, dtype=dt).reshape(dims).copy()


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path, header: dict, params: dict) -> None:
    header = dict(header, params=list(params))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in params:
            write_tensor(fh, params[name])


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        header = json.loads(_read_exact(fh, n).decode("utf-8"))
        params = {name: read_tensor(fh) for name in header["params"]}
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint records")
    return header, params
