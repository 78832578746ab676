"""
Binary tensor container for weights and datasets.

Layout:
  [4 bytes magic b"JQTC"]
  [uint32 LE header_len]
  [header_len bytes UTF-8 JSON header]
  [payload]

Header: {"version": 1, "compressed": bool, "payload_size": int,
         "entries": [{"name", "shape", "offset"}, ...], "meta": {...}}

The raw payload is every tensor as little-endian float64 in row-major
order, concatenated; ``offset`` is the byte offset into the raw payload.
A compressed payload is one LZ4 block of the raw payload (size in
``payload_size``).  Round trips are bit-exact.
"""
import json
import logging
import struct
from pathlib import Path

import lz4.block
import numpy as np

_MAGIC = b"JQTC"
_VERSION = 1
_MAX_HEADER = 16 * 1024 * 1024   # safety cap on the JSON header
_DTYPE = np.dtype("<f8")


def pack_container(arrays, meta=None, compress=False):
    """Serialize ``{name: array}`` (insertion order kept) into container bytes."""
    entries, chunks, offset = [], [], 0
    for name, array in arrays.items():
        data = np.asarray(array, dtype=_DTYPE, order="C")
        raw = data.tobytes(order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": _VERSION, "compressed": bool(compress), "payload_size": len(payload),
              "entries": entries, "meta": meta or {}}
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    if compress:
        payload = lz4.block.compress(payload, store_size=False)
    return _MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def _parse_header(blob):
    if len(blob) < 8 or blob[:4] != _MAGIC:
        raise ValueError("Not a tensor container (bad magic)")
    header_len = struct.unpack_from("<I", blob, 4)[0]
    if header_len > _MAX_HEADER or 8 + header_len > len(blob):
        raise ValueError(f"Invalid container header length {header_len}")
    try:
        header = json.loads(blob[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"Corrupt container header: {e}") from e
    if header.get("version") != _VERSION:
        raise ValueError(f"Unsupported container version {header.get('version')}")
    return header, 8 + header_len


def unpack_container(blob):
    """Inverse of ``pack_container``. Returns (arrays, meta)."""
    header, start = _parse_header(blob)
    payload = blob[start:]
    size = header["payload_size"]
    if header["compressed"]:
        try:
            payload = lz4.block.decompress(payload, uncompressed_size=size)
        except lz4.block.LZ4BlockError as e:
            raise ValueError(f"Corrupt compressed payload: {e}") from e
    if len(payload) != size:
        raise ValueError(f"Payload has {len(payload)} bytes, header says {size}")

    arrays = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = entry["offset"]
        end = offset + count * _DTYPE.itemsize
        if offset < 0 or end > size:
            raise ValueError(f"Entry {entry['name']!r} extends beyond payload")
        arrays[entry["name"]] = np.frombuffer(payload[offset:end], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})


def write_container(path, arrays, meta=None, compress=False):
    path = Path(path)
    blob = pack_container(arrays, meta, compress)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    logging.debug(f"Wrote {len(arrays)} tensor(s), {len(blob)} bytes to {path}")
    return path


def read_container(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tensor container not found: {path}")
    return unpack_container(path.read_bytes())


def is_container(path):
    """Quick sanity check: magic and header length readable."""
    try:
        with open(path, "rb") as f:
            head = f.read(8)
        return len(head) == 8 and head[:4] == _MAGIC
    except OSError:
        return False
