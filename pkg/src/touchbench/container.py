"""Chunked hierarchical keyed-array container (``.tbc``).

Layout, little-endian::

    offset 0   magic      8 bytes  b"TBCHUNK\\x00"
    offset 8   version    uint32   (currently 1)
    offset 12  dir_offset uint64   byte offset of the directory
    offset 20  dir_length uint64   byte length of the directory
    offset 28  chunk data, written in dataset creation order
    dir_offset directory: UTF-8 JSON, keys sorted, no whitespace

The directory is ``{"attrs": {...}, "groups": {name: {"attrs": {...},
"datasets": {name: {"dtype", "shape", "chunk_rows", "codec", "chunks",
"attrs"}}}}}``. ``chunks`` lists ``[offset, length]`` pairs; each chunk holds
``chunk_rows`` consecutive rows along axis 0 in C order, stored raw
(``codec`` "raw") or zlib-deflated (``"deflate"`` with a ``level``).
Nothing time-dependent is written, so identical input gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TBCHUNK\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIQQ")


class ContainerError(ValueError):
    pass


def _jsonable(v: Any) -> Any:
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (set, frozenset)):
        return sorted(v)
    if isinstance(v, Mapping):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _split(path: str) -> tuple[str, str]:
    group, _, name = path.partition("/")
    if not group or not name or "/" in name:
        raise ContainerError(f"dataset path must be 'group/name', got {path!r}")
    return group, name


class ContainerWriter:
    """Single-writer builder. Use as a context manager or call :meth:`close`.

    The file is assembled under a temporary name and renamed on close.
    """

    def __init__(self, path: str | Path, level: int | None = 4):
        self.path = Path(path)
        self.level = level
        self._tmp = self.path.with_name(self.path.name + ".partial")
        self._f = open(self._tmp, "wb")
        self._f.write(b"\x00" * _HEADER.size)
        self._dir: dict[str, Any] = {"attrs": {}, "groups": {}}

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._f.close()
            self._tmp.unlink(missing_ok=True)

    def _group(self, name: str) -> dict:
        return self._dir["groups"].setdefault(name, {"attrs": {}, "datasets": {}})

    def create_group(self, name: str, attrs: Mapping | None = None) -> None:
        self._group(name)["attrs"].update(_jsonable(dict(attrs or {})))

    def set_attrs(self, attrs: Mapping) -> None:
        self._dir["attrs"].update(_jsonable(dict(attrs)))

    def write(self, path: str, array: np.ndarray, chunk_rows: int | None = 1,
              attrs: Mapping | None = None) -> None:
        """Store ``array``; ``chunk_rows=None`` keeps it as one chunk."""
        group, name = _split(path)
        arr = np.ascontiguousarray(array)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        if arr.dtype == object:
            raise ContainerError(f"{path}: object arrays are not storable")
        rows = arr.shape[0] if arr.ndim else 1
        step = rows if (chunk_rows is None or arr.ndim == 0) else max(1, chunk_rows)
        chunks = []
        flat = arr.reshape((rows,) + arr.shape[1:]) if arr.ndim else arr.reshape(1)
        for lo in range(0, max(rows, 1), max(step, 1)):
            data = flat[lo : lo + step].tobytes() if rows else b""
            if self.level is not None:
                data = zlib.compress(data, self.level)
            off = self._f.tell()
            self._f.write(data)
            chunks.append([off, len(data)])
            if rows == 0:
                break
        codec = {"codec": "raw"} if self.level is None else {"codec": "deflate", "level": self.level}
        self._group(group)["datasets"][name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "chunk_rows": step,
            "chunks": chunks,
            "attrs": _jsonable(dict(attrs or {})),
            **codec,
        }

    def close(self) -> None:
        if self._f.closed:
            return
        directory = json.dumps(self._dir, sort_keys=True, separators=(",", ":")).encode()
        off = self._f.tell()
        self._f.write(directory)
        self._f.seek(0)
        self._f.write(_HEADER.pack(MAGIC, VERSION, off, len(directory)))
        self._f.close()
        os.replace(self._tmp, self.path)


class ContainerReader:
    """Random-access reader. ``bytes_read`` and ``reads`` account chunk I/O."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._f = open(self.path, "rb")
        head = self._f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            self._f.close()
            raise ContainerError(f"{self.path}: truncated header")
        magic, version, off, length = _HEADER.unpack(head)
        if magic != MAGIC:
            self._f.close()
            raise ContainerError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            self._f.close()
            raise ContainerError(f"{self.path}: unsupported version {version}")
        self._f.seek(off)
        raw = self._f.read(length)
        try:
            self._dir = json.loads(raw)
        except json.JSONDecodeError as e:
            self._f.close()
            raise ContainerError(f"{self.path}: corrupt directory") from e
        self.bytes_read = 0
        self.reads: list[tuple[str, int]] = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._f.close()

    @property
    def attrs(self) -> dict:
        return self._dir["attrs"]

    def groups(self) -> list[str]:
        return sorted(self._dir["groups"])

    def has_group(self, name: str) -> bool:
        return name in self._dir["groups"]

    def group_attrs(self, name: str) -> dict:
        return self._dir["groups"][name]["attrs"]

    def datasets(self, group: str) -> list[str]:
        return sorted(self._dir["groups"][group]["datasets"])

    def has(self, path: str) -> bool:
        g, n = _split(path)
        return g in self._dir["groups"] and n in self._dir["groups"][g]["datasets"]

    def _entry(self, path: str) -> dict:
        g, n = _split(path)
        try:
            return self._dir["groups"][g]["datasets"][n]
        except KeyError:
            raise ContainerError(f"{self.path}: no dataset {path!r}") from None

    def shape(self, path: str) -> tuple[int, ...]:
        return tuple(self._entry(path)["shape"])

    def dataset_attrs(self, path: str) -> dict:
        return self._entry(path)["attrs"]

    def _chunk(self, path: str, entry: dict, k: int) -> np.ndarray:
        off, length = entry["chunks"][k]
        self._f.seek(off)
        data = self._f.read(length)
        self.bytes_read += length
        self.reads.append((path, k))
        if entry["codec"] == "deflate":
            data = zlib.decompress(data)
        shape = entry["shape"]
        rows_total = shape[0] if shape else 1
        lo = k * entry["chunk_rows"]
        n = min(entry["chunk_rows"], rows_total - lo)
        return np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape((n,) + tuple(shape[1:]))

    def read(self, path: str) -> np.ndarray:
        entry = self._entry(path)
        shape = tuple(entry["shape"])
        if not shape:
            return self._chunk(path, entry, 0).reshape(()).copy()
        if shape[0] == 0:
            return np.zeros(shape, dtype=np.dtype(entry["dtype"]))
        parts = [self._chunk(path, entry, k) for k in range(len(entry["chunks"]))]
        return np.concatenate(parts).reshape(shape)

    def read_rows(self, path: str, start: int, stop: int | None = None) -> np.ndarray:
        """Rows ``[start, stop)`` along axis 0, touching only the chunks involved."""
        entry = self._entry(path)
        shape = tuple(entry["shape"])
        stop = start + 1 if stop is None else stop
        if not shape or not 0 <= start < stop <= shape[0]:
            raise IndexError(f"{path}: rows [{start},{stop}) outside {shape}")
        cr = entry["chunk_rows"]
        parts = []
        for k in range(start // cr, (stop - 1) // cr + 1):
            chunk = self._chunk(path, entry, k)
            lo = k * cr
            parts.append(chunk[max(start - lo, 0) : stop - lo])
        return np.concatenate(parts)
