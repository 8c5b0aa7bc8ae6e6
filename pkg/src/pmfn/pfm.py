"""Portable float map (PFM) reading and writing.

Only the grayscale variant is produced: header ``Pf``, little-endian
payload (scale ``-1.0``), rows stored bottom-to-top as the format requires.
Color (``PF``) files and big-endian payloads are accepted on read.
"""

import re

import numpy as np

from .errors import ValidationError

_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", re.S)


def write_pfm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValidationError(f"write_pfm expects a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"refusing to write non-finite values to {path}")
    height, width = img.shape
    data = np.ascontiguousarray(np.flipud(img), dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (width, height))
        f.write(data.tobytes())


def read_pfm(path):
    """Read a PFM file into a float32 array (rows top-to-bottom)."""
    with open(path, "rb") as f:
        blob = f.read()
    m = _HEADER.match(blob)
    if m is None:
        raise ValidationError(f"{path}: not a PFM file")
    kind, width, height, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    if len(blob) - m.end() < 4 * count:
        raise ValidationError(f"{path}: truncated payload ({len(blob) - m.end()} bytes, "
                              f"expected {4 * count})")
    payload = np.frombuffer(blob, dtype=dtype, count=count, offset=m.end())
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(payload.reshape(shape)).astype(np.float32)
