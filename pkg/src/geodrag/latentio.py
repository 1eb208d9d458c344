"""Latent container files: one JSON header line, then raw little-endian float32."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

ORDER = "row-major, channel-last"


class ContainerError(ValueError):
    pass


def write_latent(path, z: np.ndarray) -> None:
    z = np.asarray(z)
    if z.ndim != 3:
        raise ContainerError(f"latent must be H x W x C, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ContainerError("latent contains non-finite values")
    h, w, c = z.shape
    header = {"height": h, "width": w, "channels": c, "dtype": "f32", "order": ORDER}
    payload = np.ascontiguousarray(z, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_latent(path) -> np.ndarray:
    """Read a container; values come back as float64 (exactly representable)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ContainerError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode())
        h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from None
    if header.get("dtype") != "f32":
        raise ContainerError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order", ORDER) != ORDER:
        raise ContainerError(f"{path}: unsupported order {header.get('order')!r}")
    if min(h, w, c) <= 0:
        raise ContainerError(f"{path}: non-positive dimensions")
    body = raw[nl + 1:]
    if len(body) != 4 * h * w * c:
        raise ContainerError(
            f"{path}: payload has {len(body)} bytes, header implies {4 * h * w * c}")
    z = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)
    if not np.all(np.isfinite(z)):
        raise ContainerError(f"{path}: non-finite values in payload")
    return z
