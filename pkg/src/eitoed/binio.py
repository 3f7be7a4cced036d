"""Binary array dumps with a short ASCII header.

Layout: exactly four header lines, then the arrays as little-endian
row-major float64, back to back.  Line 2 lists the array shapes as
``name=RxC`` tokens.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import FormatError


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.astype("<f8").tobytes())
    return h.hexdigest()


def write_arrays(path, magic: str, arrays: dict, line3: str, line4: str) -> None:
    dims = " ".join(f"{k}={'x'.join(str(s) for s in np.shape(v))}" for k, v in arrays.items())
    for text in (magic, line3, line4):
        if "\n" in text:
            raise ValueError("header fields must be single lines")
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{dims}\n{line3}\n{line4}\n".encode("ascii"))
        for v in arrays.values():
            fh.write(np.ascontiguousarray(np.asarray(v, dtype="<f8")).tobytes())


def read_arrays(path, magic: str):
    """Return ``(arrays, line3, line4)``."""
    with open(path, "rb") as fh:
        lines = [fh.readline().decode("ascii").rstrip("\n") for _ in range(4)]
        if lines[0] != magic:
            raise FormatError(f"{path}: expected header {magic!r}, found {lines[0]!r}")
        arrays = {}
        for tok in lines[1].split():
            name, _, shape = tok.partition("=")
            shape = tuple(int(s) for s in shape.split("x")) if shape else ()
            n = int(np.prod(shape))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise FormatError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(float)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after data")
    return arrays, lines[2], lines[3]
