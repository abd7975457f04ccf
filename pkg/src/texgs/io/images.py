"""PNG (8-bit) and TGIM (raw little-endian float32) image files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

TGIM_MAGIC = b"TGIM"
_TGIM_HEADER = struct.Struct("<4sIII")  # magic, H, W, C


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Writes ``img`` (H, W, C) in [0, 1]. ``.tgim`` keeps full float data,
    anything else goes through Pillow as 8-bit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(img)
    if path.suffix.lower() == ".tgim":
        h, w = img.shape[:2]
        c = 1 if img.ndim == 2 else img.shape[2]
        with open(path, "wb") as f:
            f.write(_TGIM_HEADER.pack(TGIM_MAGIC, h, w, c))
            f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
        return
    Image.fromarray(to_uint8(img.squeeze())).save(path)


def read_image(path) -> np.ndarray:
    """Float image in [0, 1], shape (H, W, C); alpha is kept if present."""
    path = Path(path)
    if path.suffix.lower() == ".tgim":
        raw = path.read_bytes()
        if len(raw) < _TGIM_HEADER.size:
            raise ValueError(f"{path}: truncated TGIM header")
        magic, h, w, c = _TGIM_HEADER.unpack_from(raw)
        if magic != TGIM_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        body = raw[_TGIM_HEADER.size:]
        if len(body) != h * w * c * 4:
            raise ValueError(f"{path}: truncated TGIM payload")
        return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr
