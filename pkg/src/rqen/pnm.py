"""Binary PPM (P6) and PGM (P5) reading and writing with numpy only."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, pos, n = [], 0, len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    """Decode to uint8 (H, W, 3) for P6 or (H, W) for P5."""
    try:
        (magic, w, h, maxval), offset = _tokens(data, 4)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"bad PNM header: {exc}") from None
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    if width <= 0 or height <= 0 or maxval != 255:
        raise ImageFormatError(f"only 8-bit images with positive extents are supported (got {width}x{height}, max {maxval})")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    raster = data[offset : offset + size]
    if len(raster) != size:
        raise ImageFormatError(f"expected {size} raster bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return img if channels == 3 else img[:, :, 0]


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot encode array of shape {img.shape}")
    header = b"%s\n%d %d\n255\n" % (magic, img.shape[1], img.shape[0])
    return header + np.ascontiguousarray(img).tobytes()


def read(path: str | Path) -> np.ndarray:
    try:
        return decode(Path(path).read_bytes())
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def write(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 pixels to float64 RGB in [0, 1]; grayscale is replicated to three channels."""
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
