"""Binary PGM/PPM (P5/P6) and tensor-file image I/O.

Images are ``(C, H, W)`` float arrays in ``[0, 1]``; C is 1 for PGM, 3 for PPM.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .serialize import FormatError, load_tensor, save_tensor


def _tokens(data: bytes, count: int) -> tuple[list, int]:
    """Read ``count`` whitespace-separated header fields, skipping comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PNM header")
        out.append(data[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    c = 3 if magic == b"P6" else 1
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = w * h * c
    raw = np.frombuffer(data, dtype=dt, count=n, offset=off)
    return (raw.reshape(h, w, c).transpose(2, 0, 1) / maxval).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img: np.ndarray, comment: str | None = None) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise FormatError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    body = to_uint8(img).transpose(1, 2, 0).tobytes()
    note = b""
    if comment:
        note = b"".join(b"# " + line.encode() + b"\n" for line in comment.splitlines())
    Path(path).write_bytes(magic + b"\n" + note + b"%d %d\n255\n" % (w, h) + body)


def load_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    arr = load_tensor(path)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a (C, H, W) tensor, got shape {arr.shape}")
    return arr


def save_image(path, img: np.ndarray) -> None:
    suffix = Path(path).suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        write_pnm(path, img)
    else:
        save_tensor(path, np.asarray(img, dtype=np.float32))
