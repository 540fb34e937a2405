"""PNG and PFM writers/readers for render buffers and sequence frames."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_png_color(path, img: np.ndarray):
    """8-bit RGB PNG from float [0, 1] (H, W, 3)."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png_color(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png_normal(path, normal: np.ndarray, valid=None):
    """Unit normals encoded as (n + 1) / 2; invalid pixels black."""
    enc = (np.asarray(normal) + 1.0) * 0.5
    if valid is not None:
        enc = np.where(np.asarray(valid)[..., None], enc, 0.0)
    write_png_color(path, enc)


def write_png_depth16(path, depth: np.ndarray, scale: float = 5000.0):
    """16-bit grayscale PNG with TUM-style depth quantization (meters * scale)."""
    arr = np.clip(np.asarray(depth) * scale + 0.5, 0, 65535).astype(np.uint16)
    img = Image.new("I;16", (arr.shape[1], arr.shape[0]))
    img.frombytes(arr.tobytes())
    img.save(path)


def read_png_depth16(path, scale: float = 5000.0) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return arr / scale


def write_pfm(path, data: np.ndarray):
    """32-bit float PFM (little-endian, rows bottom-to-top)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM supports (H,W) or (H,W,3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {kind!r}")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype).astype(np.float64)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return data.reshape(shape)[::-1].copy()
