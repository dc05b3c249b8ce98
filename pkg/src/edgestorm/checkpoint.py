"""Binary parameter container shared by the edge model and the classifier.

Layout::

    8 bytes   magic  b"EDGESTRM"
    uint32    format version (little-endian)
    uint32    descriptor length in bytes
    ...       descriptor, UTF-8 JSON (kind, hyperparameters, parameter names and shapes)
    ...       each parameter's values as little-endian float64, declaration order
"""

import json
import struct
from pathlib import Path

import numpy as np

from edgestorm.errors import ParseError

MAGIC = b"EDGESTRM"
VERSION = 1


def dumps(kind, params, meta=None):
    descriptor = {
        "kind": kind,
        "meta": meta or {},
        "params": [[name, list(value.shape)] for name, value in params.items()],
    }
    head = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for value in params.values():
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob, path="<bytes>"):
    """Inverse of :func:`dumps`; returns ``(kind, params, meta)``."""
    if blob[:8] != MAGIC:
        raise ParseError(path, 0, "bad magic, not a model checkpoint")
    if len(blob) < 16:
        raise ParseError(path, 8, "truncated header")
    version, n = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ParseError(path, 8, f"unsupported format version {version}")
    try:
        descriptor = json.loads(blob[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(path, 16, f"unreadable descriptor ({exc})") from None
    offset = 16 + n
    params = {}
    for name, shape in descriptor["params"]:
        size = int(np.prod(shape)) * 8
        if offset + size > len(blob):
            raise ParseError(path, offset, f"truncated parameter {name}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=offset).astype(np.float64).reshape(shape)
        offset += size
    if offset != len(blob):
        raise ParseError(path, offset, "trailing bytes after last parameter")
    return descriptor["kind"], params, descriptor["meta"]


def save(path, kind, params, meta=None):
    Path(path).write_bytes(dumps(kind, params, meta))


def load(path):
    return loads(Path(path).read_bytes(), path)
