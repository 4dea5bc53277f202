"""Cell/face field containers and the ROMF snapshot file format.

A snapshot set lives in a directory holding one payload file per field name
(``<name>.romf``: the magic bytes ``ROMF``, a little-endian uint32 format
version, then raw little-endian float64 records) and a single
``manifest.jsonl`` with one JSON object per record::

    {"name": "u_p", "kind": "cell-vector", "time": 0.1, "offset": 8, "length": 24}

``offset`` is the byte offset of the record inside the payload file and
``length`` the number of float64 values.  The manifest is the only source of
record ordering.

Vector fields are flattened component-blocked, i.e. all x components, then
all y, then all z, which is the layout the discrete operators act on.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CellScalarField",
    "CellVectorField",
    "FaceVectorField",
    "SnapshotRecord",
    "SnapshotSet",
    "write_snapshot",
    "read_snapshot_matrix",
    "write_array",
    "read_array",
    "read_meta",
]

MAGIC = b"ROMF"
FORMAT_VERSION = 1
_HEADER = MAGIC + struct.pack("<I", FORMAT_VERSION)
_F8 = np.dtype("<f8")

KINDS = ("cell-scalar", "cell-vector", "face-vector", "array")


class _Field:
    kind: str
    values: np.ndarray

    def __len__(self):
        return self.values.shape[0]

    def to_vector(self) -> np.ndarray:
        """Flat float64 vector (component-blocked for vector fields)."""
        if self.values.ndim == 1:
            return self.values.copy()
        return self.values.T.reshape(-1).copy()


@dataclass(eq=False)
class CellScalarField(_Field):
    """Per-cell scalar such as pressure or eddy viscosity."""

    values: np.ndarray
    non_negative: bool = False
    kind = "cell-scalar"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("cell scalar field must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cell scalar field has non-finite entries")
        if self.non_negative and np.any(self.values < 0):
            raise ValueError("field must be non-negative")

    @classmethod
    def from_vector(cls, vec, **kw):
        return cls(np.asarray(vec, dtype=float), **kw)


@dataclass(eq=False)
class CellVectorField(_Field):
    """Per-cell 3-vector, stored as an (h, 3) array."""

    values: np.ndarray
    kind = "cell-vector"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != 3:
            raise ValueError("vector field must have shape (n, 3)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("vector field has non-finite entries")

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=float)
        return cls(vec.reshape(3, -1).T)


class FaceVectorField(CellVectorField):
    """Per-face 3-vector, interior faces then boundary faces."""

    kind = "face-vector"


_KIND_TO_CLASS = {
    "cell-scalar": CellScalarField,
    "cell-vector": CellVectorField,
    "face-vector": FaceVectorField,
}


@dataclass(frozen=True)
class SnapshotRecord:
    name: str
    kind: str
    time: float
    offset: int
    length: int
    shape: tuple | None = None
    meta: dict | None = None

    def to_json(self) -> str:
        obj = {"name": self.name, "kind": self.kind, "time": self.time,
               "offset": self.offset, "length": self.length}
        if self.shape is not None:
            obj["shape"] = list(self.shape)
        if self.meta:
            obj["meta"] = self.meta
        return json.dumps(obj)


class SnapshotSet:
    """A directory of ROMF payload files indexed by ``manifest.jsonl``.

    Opening an existing directory loads its manifest; records are appended
    with :func:`write_snapshot` and read back with
    :func:`read_snapshot_matrix`.
    """

    MANIFEST = "manifest.jsonl"

    def __init__(self, directory):
        self.directory = Path(directory)
        self.records: list[SnapshotRecord] = []
        manifest = self.directory / self.MANIFEST
        if manifest.exists():
            with open(manifest, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        shape = obj.get("shape")
                        self.records.append(SnapshotRecord(
                            obj["name"], obj["kind"], float(obj["time"]),
                            int(obj["offset"]), int(obj["length"]),
                            tuple(shape) if shape is not None else None,
                            obj.get("meta")))
                    except (ValueError, KeyError) as exc:
                        raise ValueError(f"{manifest}:{lineno}: malformed manifest entry") from exc

    def __repr__(self):
        return f"SnapshotSet({str(self.directory)!r}, {len(self.records)} records)"

    @property
    def names(self) -> list[str]:
        seen = []
        for rec in self.records:
            if rec.name not in seen:
                seen.append(rec.name)
        return seen

    def entries(self, name: str) -> list[SnapshotRecord]:
        recs = [r for r in self.records if r.name == name]
        if not recs:
            raise KeyError(f"no records named {name!r} in {self.directory}")
        return sorted(recs, key=lambda r: r.time)

    def times(self, name: str) -> np.ndarray:
        return np.array([r.time for r in self.entries(name)])

    def payload_path(self, name: str) -> Path:
        return self.directory / f"{name}.romf"

    def __len__(self):
        return len(self.records)


def _append_record(sset: SnapshotSet, name, kind, time, data, shape=None,
                   meta=None) -> SnapshotSet:
    if not name or "/" in name or name.startswith("."):
        raise ValueError(f"invalid record name {name!r}")
    sset.directory.mkdir(parents=True, exist_ok=True)
    path = sset.payload_path(name)
    payload = np.ascontiguousarray(data, dtype=_F8).reshape(-1)
    try:
        new = not path.exists()
        with open(path, "ab") as fh:
            if new:
                fh.write(_HEADER)
            offset = fh.tell()
            fh.write(payload.tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        rec = SnapshotRecord(name, kind, float(time), offset, payload.size, shape, meta)
        with open(sset.directory / SnapshotSet.MANIFEST, "a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise OSError(f"failed writing snapshot {name!r} to {path}: {exc}") from exc
    sset.records.append(rec)
    return sset


def write_snapshot(sset: SnapshotSet, name: str, time: float, field, n_expected=None) -> SnapshotSet:
    """Append ``field`` as the record of ``name`` at ``time``.

    ``time`` must be strictly greater than the last time stored for ``name``.
    If ``n_expected`` is given, the field length must equal it (cell or face
    count of the mesh the set belongs to).
    """
    if not isinstance(field, _Field):
        raise TypeError("field must be a CellScalarField, CellVectorField or FaceVectorField")
    if n_expected is not None and len(field) != n_expected:
        raise ValueError(f"field length {len(field)} does not match mesh size {n_expected}")
    previous = [r.time for r in sset.records if r.name == name]
    if previous and not time > max(previous):
        raise ValueError(
            f"snapshot times for {name!r} must increase: {time} after {max(previous)}")
    kinds = {r.kind for r in sset.records if r.name == name}
    if kinds and kinds != {field.kind}:
        raise ValueError(f"record {name!r} already holds {kinds.pop()} data")
    return _append_record(sset, name, field.kind, time, field.to_vector())


def _read_payload(sset: SnapshotSet, rec: SnapshotRecord) -> np.ndarray:
    path = sset.payload_path(rec.name)
    with open(path, "rb") as fh:
        head = fh.read(len(_HEADER))
        if head[:4] != MAGIC:
            raise ValueError(f"{path}: not a ROMF file")
        (version,) = struct.unpack("<I", head[4:8])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported ROMF version {version}")
        fh.seek(rec.offset)
        raw = fh.read(rec.length * 8)
    if len(raw) != rec.length * 8:
        raise ValueError(f"{path}: truncated record at offset {rec.offset}")
    return np.frombuffer(raw, dtype=_F8).astype(float)


def read_snapshot_matrix(sset: SnapshotSet, name: str) -> np.ndarray:
    """Snapshot matrix of ``name`` with one column per record, in time order."""
    recs = sset.entries(name)
    lengths = {r.length for r in recs}
    if len(lengths) != 1:
        raise ValueError(f"records of {name!r} have inconsistent lengths {sorted(lengths)}")
    return np.column_stack([_read_payload(sset, r) for r in recs])


def read_snapshot(sset: SnapshotSet, name: str, index: int):
    """Return the ``index``-th record of ``name`` as a field object."""
    rec = sset.entries(name)[index]
    vec = _read_payload(sset, rec)
    return _KIND_TO_CLASS[rec.kind].from_vector(vec)


def write_array(sset: SnapshotSet, name: str, array, meta: dict | None = None) -> SnapshotSet:
    """Store a generic float array (any shape) as a single record.

    ``meta`` is an optional JSON-serialisable dict kept in the manifest.
    """
    array = np.asarray(array, dtype=float)
    if any(r.name == name for r in sset.records):
        raise ValueError(f"array {name!r} already stored")
    return _append_record(sset, name, "array", 0.0, array, shape=array.shape, meta=meta)


def read_meta(sset: SnapshotSet, name: str) -> dict:
    return dict(sset.entries(name)[-1].meta or {})


def read_array(sset: SnapshotSet, name: str) -> np.ndarray:
    rec = sset.entries(name)[-1]
    data = _read_payload(sset, rec)
    return data.reshape(rec.shape) if rec.shape is not None else data
