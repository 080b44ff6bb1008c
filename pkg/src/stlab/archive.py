"""Tensor archives and PGM previews.

An archive is one line of JSON, a newline, then ``count`` records of
``shape`` stored as little-endian row-major values::

    {"magic":"STLAB1","dtype":"f32","shape":[128,128],"order":"row-major","count":50}
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

MAGIC = "STLAB1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ArchiveError(ValueError):
    pass


def _code(dtype) -> str:
    dt = np.dtype(dtype)
    for code, d in _DTYPES.items():
        if dt == d or dt == d.newbyteorder("="):
            return code
    raise ArchiveError(f"unsupported dtype {dt}")


def header_line(dtype, shape, count: int) -> bytes:
    head = {"magic": MAGIC, "dtype": _code(dtype), "shape": [int(s) for s in shape],
            "order": "row-major", "count": int(count)}
    return (json.dumps(head, separators=(",", ":")) + "\n").encode("ascii")


def to_bytes(records: np.ndarray, dtype=None) -> bytes:
    """Serialise ``records`` of shape ``(count, *shape)``."""
    a = np.asarray(records)
    code = _code(dtype if dtype is not None else a.dtype)
    if a.ndim == 0:
        raise ArchiveError("records need a leading count axis")
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    return header_line(_DTYPES[code], a.shape[1:], a.shape[0]) + payload


def parse_header(buf: bytes) -> tuple[dict, int]:
    end = buf.find(b"\n")
    if end < 0:
        raise ArchiveError("missing header terminator")
    try:
        head = json.loads(buf[:end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"bad header: {e}") from None
    if head.get("magic") != MAGIC or head.get("dtype") not in _DTYPES \
            or head.get("order") != "row-major":
        raise ArchiveError(f"not an archive header: {head}")
    return head, end + 1


def from_bytes(buf: bytes) -> np.ndarray:
    head, off = parse_header(buf)
    dt = _DTYPES[head["dtype"]]
    shape = (head["count"], *head["shape"])
    need = int(np.prod(shape)) * dt.itemsize
    if len(buf) - off != need:
        raise ArchiveError(f"payload holds {len(buf) - off} bytes, header promises {need}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def write_archive(path, records: np.ndarray, dtype=None) -> str:
    """Write an archive and return the SHA-256 of its bytes."""
    data = to_bytes(records, dtype)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_archive(path, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    if not mmap:
        return from_bytes(path.read_bytes())
    with open(path, "rb") as f:
        head, off = parse_header(f.readline())
    size = path.stat().st_size
    dt = _DTYPES[head["dtype"]]
    shape = (head["count"], *head["shape"])
    if size - off != int(np.prod(shape)) * dt.itemsize:
        raise ArchiveError(f"{path}: payload size does not match header")
    return np.memmap(path, dtype=dt, mode="r", offset=off, shape=shape)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


LOG_FLOOR = 0.001


def write_pgm(path, image: np.ndarray, log_scale: bool = False) -> dict:
    """8-bit binary PGM, max-normalised; the scale goes to ``<path>.json``.

    With ``log_scale`` the pixels are first mapped to
    ``log(z + 0.001) - log(0.001)`` for display.
    """
    z = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    z = np.maximum(z, 0.0)
    if log_scale:
        z = np.log(z + LOG_FLOOR) - np.log(LOG_FLOOR)
    top = float(z.max()) if z.size else 0.0
    pix = np.zeros(z.shape, np.uint8) if top <= 0 else np.rint(z / top * 255).astype(np.uint8)
    h, w = z.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    meta = {"scale": top, "transform": "log(z+0.001)-log(0.001)" if log_scale else "identity",
            "width": w, "height": h}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", buf)
    if m is None:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(m[1]), int(m[2])
    return np.frombuffer(buf, np.uint8, count=w * h, offset=m.end()).reshape(h, w)
