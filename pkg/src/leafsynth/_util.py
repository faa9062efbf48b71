"""Small shared helpers: seed derivation, pinned clock, hashing and PNG I/O."""

from __future__ import annotations

import hashlib
import os
import time
from pathlib import Path

import numpy as np
from PIL import Image


def derive_seed(root: int, *names: str | int) -> int:
    """Deterministically split a root seed into an independent stage seed."""
    h = hashlib.sha256(str(int(root)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:4], "little") & 0x7FFFFFFF


def now() -> float:
    """Wall-clock time, pinned to ``SOURCE_DATE_EPOCH`` when that is set."""
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    if pinned is not None:
        return float(pinned)
    return time.time()


class Stopwatch:
    """Elapsed seconds since construction; always 0.0 when the clock is pinned."""

    def __init__(self) -> None:
        self._pinned = "SOURCE_DATE_EPOCH" in os.environ
        self._t0 = time.perf_counter()

    def elapsed(self) -> float:
        if self._pinned:
            return 0.0
        return time.perf_counter() - self._t0


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | os.PathLike, arr: np.ndarray) -> Path:
    """Write a [0,1] float raster (H×W or H×W×3) or a uint8 raster as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)
    return path


def write_mask_png(path: str | os.PathLike, mask: np.ndarray) -> Path:
    return write_png(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_png_u8(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG as a uint8 array; rejects other bit depths."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "P", "1"):
            raise ValueError(f"{path}: unsupported bit depth / mode {im.mode!r} (8-bit required)")
        if im.mode == "P":
            im = im.convert("RGB")
        if im.mode == "1":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.uint8)
    return arr.copy()


def write_log_header(path: str | os.PathLike | None, fields: list[str]) -> None:
    """Header-only CSV log, so a zero-budget run still produces its log file."""
    if path is not None:
        Path(path).write_text(",".join(fields) + "\n")
