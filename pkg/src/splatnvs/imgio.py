"""PNG (sRGB transfer) and PFM image IO."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def srgb_to_linear(s):
    s = np.clip(s, 0.0, 1.0)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def save_png(path, img, srgb=True):
    """Save a float image in [0,1]; color images go through the sRGB transfer."""
    img = np.asarray(img)
    if img.ndim == 3 and srgb:
        img = linear_to_srgb(img)
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Image.fromarray(u8).save(path)


def load_png(path, srgb=True):
    """Load a PNG as float32 in [0,1]; 3-channel images are sRGB-decoded."""
    arr = np.asarray(Image.open(path)).astype(np.float32) / 255.0
    if arr.ndim == 3 and arr.shape[2] > 3:
        arr = arr[:, :, :3]
    if arr.ndim == 3 and srgb:
        arr = srgb_to_linear(arr).astype(np.float32)
    return arr


def save_pfm(path, data):
    """Single-channel portable float map, little-endian (scale -1), rows bottom-up."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-d map, got shape {data.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] not in (b"Pf", b"PF"):
        raise ValueError(f"not a PFM file: {path}")
    if parts[0] == b"PF":
        raise ValueError("color PFM not supported")
    w, h = map(int, parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)
    return np.flipud(data).astype(np.float32).copy()


def encode_frame(image, width, height) -> bytes:
    """Service wire frame: magic 'GPSF' + u32 w/h + u32 len + PNG payload."""
    import io

    buf = io.BytesIO()
    u8 = np.clip(np.round(linear_to_srgb(np.asarray(image)) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(buf, format="PNG")
    payload = buf.getvalue()
    return b"GPSF" + struct.pack("<III", width, height, len(payload)) + payload


def decode_frame(frame: bytes):
    if frame[:4] != b"GPSF":
        raise ValueError("bad frame magic")
    w, h, n = struct.unpack_from("<III", frame, 4)
    payload = frame[16:16 + n]
    if len(payload) != n:
        raise ValueError("truncated frame payload")
    import io

    img = np.asarray(Image.open(io.BytesIO(payload))).astype(np.float32) / 255.0
    return srgb_to_linear(img[:, :, :3]).astype(np.float32), w, h
