"""Binary portable pixmap / graymap (P6 / P5) reading and writing."""
from __future__ import annotations

import os

import numpy as np


def _tokens(buf: bytes, pos: int, count: int):
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise OSError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    """Read a P5 or P6 file as ``uint8``/``uint16`` ``[H, W]`` or ``[H, W, 3]``."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read image {os.fspath(path)!r}: {exc.strerror or exc}") from exc
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise OSError(f"{os.fspath(path)!r} is not a binary PGM/PPM file")
    try:
        (w, h, maxval), pos = _tokens(buf, 2, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise OSError(f"{os.fspath(path)!r}: malformed PNM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise OSError(f"{os.fspath(path)!r}: bad PNM dimensions or maxval")
    chans = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * chans
    if len(buf) - pos < n * dtype.itemsize:
        raise OSError(f"{os.fspath(path)!r}: truncated raster")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(dtype.newbyteorder("="))
    return arr.reshape((h, w, 3) if chans == 3 else (h, w))


def read_image(path) -> np.ndarray:
    """RGB image as float64 ``[H, W, 3]`` in ``[0, 1]``; grayscale is replicated."""
    arr = read_pnm(path)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    img = arr.astype(np.float64) / scale
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        fh.write(np.ascontiguousarray(gray).tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write ``[H, W, 3]`` data; floats are read as ``[0, 1]`` and clipped."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("write_ppm expects an [H, W, 3] array")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to ``uint8``; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255).astype(np.uint8)
