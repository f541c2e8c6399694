"""Binary Netpbm (P5 graymap, P6 pixmap) reading and writing, maxval 255."""

from pathlib import Path

import numpy as np

from .errors import FormatError

_CHANNELS = {b"P5": 1, b"P6": 3}


def write(path, pixels: np.ndarray):
    """``H×W`` uint8 -> P5, ``H×W×3`` uint8 -> P6."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    magic = b"P5" if pixels.ndim == 2 else b"P6"
    h, w = pixels.shape[:2]
    Path(path).write_bytes(b"%s\n%d %d\n255\n" % (magic, w, h) + pixels.tobytes())


def read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated Netpbm header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte ends the header
    magic = fields[0]
    if magic not in _CHANNELS:
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric Netpbm header") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} != 255")
    ch = _CHANNELS[magic]
    body = raw[pos:]
    if len(body) != w * h * ch:
        raise FormatError(f"{path}: expected {w * h * ch} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)
