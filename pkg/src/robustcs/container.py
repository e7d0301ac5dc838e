"""Binary container for operators, datasets, network weights, perturbations.

Layout (all integers little-endian):

    bytes 0..3    magic ``b"RXC1"``
    bytes 4..7    uint32, length H of the JSON header
    bytes 8..8+H  UTF-8 JSON header
    remainder     raw array payloads, concatenated in header order

The header is ``{"meta": {...}, "arrays": [{"name", "shape", "dtype"}]}``
where ``dtype`` is ``"f8"`` (float64) or ``"i8"`` (int64); payloads are
row-major (C order).  ``meta`` is free-form JSON describing what the
arrays are (dimensions, seeds, model kind), so experiments can be
replayed exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

__all__ = ["save_container", "load_container"]

MAGIC = b"RXC1"
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def save_container(path, arrays, meta=None):
    """Write named arrays plus a JSON metadata block to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype("<i8")
            code = "i8"
        else:
            arr = arr.astype("<f8")
            code = "f8"
        index.append({"name": str(name), "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps(
        {"meta": meta or {}, "arrays": index}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array(len(header), dtype="<u4").tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path):
    """Read a container; returns ``(arrays, meta)``.

    Raises :class:`FormatError` with the byte offset of the first
    inconsistency for malformed files.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: file truncated at byte {len(data)} (need 8-byte preamble)")
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at byte 0")
    hlen = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if len(data) < 8 + hlen:
        raise FormatError(f"{path}: header truncated at byte {len(data)} (need {8 + hlen})")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON header at byte 8: {exc}") from exc
    if not isinstance(header, dict) or "arrays" not in header:
        raise FormatError(f"{path}: header missing 'arrays' index")
    arrays = {}
    offset = 8 + hlen
    for entry in header["arrays"]:
        try:
            name, shape, code = entry["name"], tuple(entry["shape"]), entry["dtype"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed array entry {entry!r}") from exc
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {code!r} for array {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(data):
            raise FormatError(
                f"{path}: payload for {name!r} truncated at byte {len(data)} "
                f"(need {offset + nbytes})"
            )
        arrays[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset).reshape(shape).copy()
        offset += nbytes
    return arrays, header.get("meta", {})
