"""Image exchange formats.

Color images travel as 8-bit PNG. Depth and occupancy travel as raw float32
with a 20-byte header: magic ``SPLF``, then little-endian uint32 version,
height, width and channel count.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FLOAT_MAGIC = b"SPLF"
FLOAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img):
    """Write an (H, W, 3) or (H, W) float image in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_uint8(img)).save(Path(path), format="PNG")


def load_png(path):
    """Read a PNG as float64 RGB in [0, 1]; grayscale and alpha inputs are converted."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_float_image(path, img):
    a = np.asarray(img, dtype="<f4")
    if a.ndim == 2:
        h, w, ch = a.shape[0], a.shape[1], 1
    elif a.ndim == 3:
        h, w, ch = a.shape
    else:
        raise ValueError(f"float image must be 2-D or 3-D, got shape {a.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FLOAT_MAGIC, FLOAT_VERSION, h, w, ch))
        f.write(np.ascontiguousarray(a).tobytes())


def load_float_image(path):
    """Read a float image; single-channel files come back as (H, W)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a float image header")
    magic, version, h, w, ch = _HEADER.unpack_from(raw)
    if magic != FLOAT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FLOAT_VERSION:
        raise ValueError(f"{path}: unsupported float image version {version}")
    n = h * w * ch
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} data bytes, found {len(body)}")
    a = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w, ch)
    return a[:, :, 0] if ch == 1 else a
