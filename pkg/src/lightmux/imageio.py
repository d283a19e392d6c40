"""Grayscale image files: binary PGM (8/16-bit) and PNG."""
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ModelLoadError, ParameterError

_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ParameterError("PGM images must be 2-D")
    maxval = 65535 if pixels.dtype == np.uint16 else 255
    if pixels.dtype not in (np.uint8, np.uint16):
        raise ParameterError(f"PGM pixels must be uint8 or uint16, got {pixels.dtype}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        # PGM stores 16-bit samples big-endian
        fh.write(pixels.astype(">u2" if maxval > 255 else "u1").tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise ModelLoadError("not a binary PGM file", path)
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    body = data[m.end():]
    count = w * h
    if len(body) < count * np.dtype(dtype).itemsize:
        raise ModelLoadError("truncated PGM pixel data", path)
    arr = np.frombuffer(body, dtype=dtype, count=count).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


def write_image(path, pixels):
    """Write a uint8/uint16 image; format follows the file suffix."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        pixels = np.asarray(pixels)
        if pixels.dtype not in (np.uint8, np.uint16):
            raise ParameterError(f"PNG pixels must be uint8 or uint16, got {pixels.dtype}")
        # Pillow picks mode L / I;16 from the dtype
        Image.fromarray(pixels).save(path)
    else:
        write_pgm(path, pixels)


def read_image(path):
    path = Path(path)
    if not path.is_file():
        raise ModelLoadError("image file not found", path)
    if path.suffix.lower() == ".png":
        try:
            with Image.open(path) as im:
                arr = np.array(im)
        except OSError as exc:
            raise ModelLoadError(f"unreadable PNG ({exc})", path) from exc
        if arr.ndim != 2:
            raise ModelLoadError("expected a single-channel image", path)
        return arr.astype(np.uint16) if arr.dtype.itemsize > 1 else arr
    return read_pgm(path)


def to_display(image, gray_max=255):
    """Clip and quantize any image to uint8 for inspection."""
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint(image * (255.0 / gray_max)), 0, 255).astype(np.uint8)
