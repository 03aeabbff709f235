"""Array persistence: manifest + raw blob datasets, single-file containers.

Blobs are always little-endian regardless of host. A dataset is a directory
holding manifest.json plus one .bin file per array; a container packs the
same content into one file (JSON header + concatenated blobs) for
checkpoints. Both validate byte lengths against the manifest, and neither
ever overwrites an existing path.
"""

from __future__ import annotations

import json
import re
import struct
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

DATASET_FORMAT = "cyclecast-dataset-1"
CONTAINER_MAGIC = b"CYCBOX1\n"

# on-disk dtype codes, all fixed little-endian
DTYPE_CODES = {"float32": "<f4", "float64": "<f8",
               "uint8": "|u1", "int64": "<i8"}

_NAME_RE = re.compile(r"^[A-Za-z0-9_.][A-Za-z0-9_.-]*$")


class DataError(Exception):
    """A dataset or container on disk is unusable as found."""


def _check_names(arrays):
    for name in arrays:
        if not _NAME_RE.match(name) or ".." in name or "/" in name:
            raise ValueError(f"bad array name {name!r}")


def _dtype_code(arr, name):
    key = str(arr.dtype)
    if key not in DTYPE_CODES:
        raise ValueError(f"array {name!r} has unsupported dtype {key}")
    return key


def _entry(name, arr):
    return {"shape": list(arr.shape), "dtype": _dtype_code(arr, name)}


def _expected_bytes(entry):
    code = entry["dtype"]
    if code not in DTYPE_CODES:
        raise DataError(f"manifest names unknown dtype {code!r}")
    itemsize = np.dtype(DTYPE_CODES[code]).itemsize
    n = 1
    for d in entry["shape"]:
        n *= int(d)
    return n * itemsize


def _decode(buf, entry, name):
    want = _expected_bytes(entry)
    if len(buf) != want:
        raise ValueError(f"array {name!r}: blob holds {len(buf)} bytes, "
                         f"manifest claims {want}")
    arr = np.frombuffer(buf, dtype=DTYPE_CODES[entry["dtype"]])
    return arr.reshape(entry["shape"]).astype(entry["dtype"])


def write_dataset(path, arrays, meta=None, timestamp=True):
    """Write a directory of blobs; `path` must not already exist."""
    path = Path(path)
    if path.exists():
        raise DataError(f"dataset path {path} already exists; runs are "
                        f"immutable, write a fresh directory")
    _check_names(arrays)
    manifest = {"format": DATASET_FORMAT,
                "meta": dict(meta or {}),
                "arrays": {}}
    if timestamp:
        manifest["created"] = datetime.now(timezone.utc).isoformat()
    path.mkdir(parents=True)
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        entry = _entry(name, arr)
        entry["file"] = f"{name}.bin"
        manifest["arrays"][name] = entry
        (path / entry["file"]).write_bytes(
            np.ascontiguousarray(arr).astype(DTYPE_CODES[entry["dtype"]])
            .tobytes())
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(path):
    """-> (arrays dict, meta dict), validating lengths against the manifest."""
    path = Path(path)
    man_path = path / "manifest.json"
    if not man_path.is_file():
        raise DataError(f"no manifest.json under {path}")
    manifest = json.loads(man_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"unrecognized dataset format "
                        f"{manifest.get('format')!r} in {man_path}")
    arrays = {}
    for name, entry in manifest["arrays"].items():
        blob_path = path / entry["file"]
        if not blob_path.is_file():
            raise DataError(f"missing blob {entry['file']} in {path}")
        arrays[name] = _decode(blob_path.read_bytes(), entry, name)
    return arrays, manifest.get("meta", {})


def write_container(path, arrays, meta=None):
    """One-file variant: magic, u64 header length, JSON header, blobs."""
    path = Path(path)
    if path.exists():
        raise DataError(f"container {path} already exists")
    _check_names(arrays)
    order = list(arrays)
    header = {"meta": dict(meta or {}),
              "arrays": {n: _entry(n, np.asarray(arrays[n])) for n in order},
              "order": order}
    blob = b"".join(
        np.ascontiguousarray(np.asarray(arrays[n]))
        .astype(DTYPE_CODES[header["arrays"][n]["dtype"]]).tobytes()
        for n in order)
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)


def read_container(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CONTAINER_MAGIC) + 8 \
            or raw[:len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise DataError(f"{path} is not a container file")
    off = len(CONTAINER_MAGIC)
    (head_len,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    if len(raw) < off + head_len:
        raise DataError(f"{path} is truncated inside the header")
    header = json.loads(raw[off:off + head_len])
    off += head_len
    arrays = {}
    for name in header["order"]:
        entry = header["arrays"][name]
        want = _expected_bytes(entry)
        if len(raw) < off + want:
            raise DataError(f"{path} is truncated inside array {name!r}")
        arrays[name] = _decode(raw[off:off + want], entry, name)
        off += want
    if off != len(raw):
        raise DataError(f"{path} has {len(raw) - off} trailing bytes")
    return arrays, header.get("meta", {})
