"""Binary netpbm I/O: P5 grayscale (8/16-bit) and P6 color output.

16-bit samples are written and read big-endian, two bytes per sample, per
the netpbm raster convention. Boolean masks travel as 0/255 8-bit PGM.
"""

from __future__ import annotations

import numpy as np

from .core import DEFAULT_PIXEL_SPACING_MM, GrayImage


def _read_tokens(data: bytes, count: int):
    """First `count` whitespace-separated header tokens after the magic,
    skipping '#' comments; returns (tokens, offset just past the single
    whitespace byte that ends the header)."""
    tokens = []
    i = 2  # past the magic
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated netpbm header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or not data[i:i + 1].isspace():
        raise ValueError("netpbm header not terminated by whitespace")
    return [int(t) for t in tokens], i + 1


def read_pgm(path, pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM) -> GrayImage:
    """Reads a binary (P5) PGM into a GrayImage; maxval <= 255 becomes
    uint8, anything larger uint16."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    (width, height, maxval), offset = _read_tokens(data, 3)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    count = width * height
    if maxval < 256:
        raster = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset)
    else:
        raster = np.frombuffer(data, dtype=">u2", count=count, offset=offset)
        raster = raster.astype(np.uint16)
    if raster.size < count:
        raise ValueError(f"{path}: truncated raster")
    return GrayImage(raster.reshape(height, width).copy(), pixel_spacing_mm)


def write_pgm(image, path):
    """Writes a GrayImage or uint8/uint16 array as binary PGM."""
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    if px.ndim != 2 or px.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"need a 2-d uint8/uint16 array, got {px.dtype} {px.shape}")
    maxval = 255 if px.dtype == np.uint8 else 65535
    h, w = px.shape
    raster = px.tobytes() if maxval == 255 else px.astype(">u2").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(raster)


def write_mask_pgm(mask, path):
    """Boolean mask as a 0/255 8-bit PGM."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {mask.shape}")
    write_pgm((mask.astype(bool) * np.uint8(255)), path)


def read_mask_pgm(path) -> np.ndarray:
    """Boolean mask from a PGM: any nonzero pixel is foreground."""
    return read_pgm(path).pixels > 0


def write_ppm(rgb, path):
    """Writes an (H, W, 3) uint8 array as binary (P6) PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"need an (H, W, 3) uint8 array, got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
