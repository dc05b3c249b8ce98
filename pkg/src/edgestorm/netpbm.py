"""Strict binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only."""

from pathlib import Path

import numpy as np

from edgestorm.errors import ParseError

_WS = b" \t\n\r\v\f"


def encode(image):
    """Encode an HxW (P5) or HxWx3 (P6) array; values are rounded and clipped to 0..255."""
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {a.shape} as PPM/PGM")
    h, w = a.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes()


def write(path, image):
    Path(path).write_bytes(encode(image))


def decode(blob, path="<bytes>", expect=None):
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            c = blob[pos : pos + 1]
            if c == b"#":
                while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c in _WS:
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and blob[pos : pos + 1] not in _WS and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(path, start, "unexpected end of header")
        return start, blob[start:pos]

    if blob[:2] not in (b"P5", b"P6"):
        raise ParseError(path, 0, f"unsupported magic {blob[:2]!r}, expected P5 or P6")
    magic = blob[:2].decode()
    if expect is not None and magic != expect:
        raise ParseError(path, 0, f"expected {expect}, found {magic}")
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        at, tok = token()
        if not tok.isdigit():
            raise ParseError(path, at, f"{name} is not a decimal integer")
        fields.append((at, int(tok)))
    (_, w), (_, h), (at, maxval) = fields
    if w < 1 or h < 1:
        raise ParseError(path, fields[0][0], "image extents must be positive")
    if maxval != 255:
        raise ParseError(path, at, f"maxval {maxval} rejected, only 255 is supported")
    if pos >= len(blob) or blob[pos : pos + 1] not in _WS:
        raise ParseError(path, pos, "missing whitespace after maxval")
    pos += 1
    channels = 3 if magic == "P6" else 1
    size = w * h * channels
    if len(blob) - pos != size:
        raise ParseError(path, pos, f"raster has {len(blob) - pos} bytes, expected {size}")
    a = np.frombuffer(blob, dtype=np.uint8, count=size, offset=pos).copy()
    return a.reshape(h, w, 3) if channels == 3 else a.reshape(h, w)


def read(path, expect=None):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise ParseError(path, 0, "file not found") from None
    return decode(blob, path, expect)
