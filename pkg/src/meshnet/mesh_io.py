"""Mesh file parsing (ASCII OFF and OBJ) and the binary ``.mnet`` dataset cache."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import FaceSet, TriMesh

log = logging.getLogger(__name__)

CACHE_MAGIC = b"MNET"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


class MeshParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CacheFormatError(ValueError):
    pass


def _fan(poly: Sequence[int]) -> list[tuple[int, int, int]]:
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _finish(vertices: list, polys: list[tuple[int, list[int]]]) -> TriMesh:
    nv = len(vertices)
    tris: list[tuple[int, int, int]] = []
    dropped = 0
    for lineno, poly in polys:
        for i in poly:
            if i < 0 or i >= nv:
                raise MeshParseError(f"vertex index {i} out of range for {nv} vertices", lineno)
        for tri in _fan(poly):
            if len(set(tri)) < 3:
                dropped += 1
            else:
                tris.append(tri)
    if dropped:
        log.warning("dropped %d degenerate faces", dropped)
    if nv < 3:
        raise MeshParseError(f"need at least 3 vertices, got {nv}")
    if not tris:
        raise MeshParseError("no valid triangular faces")
    return TriMesh(np.array(vertices, dtype=np.float64), np.array(tris, dtype=np.int64), dropped)


def _decode(data: bytes | str) -> str:
    if isinstance(data, str):
        return data
    try:
        return data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshParseError(f"not ASCII text (byte offset {exc.start})") from None


def _float(tok: str, lineno: int) -> float:
    try:
        x = float(tok)
    except ValueError:
        raise MeshParseError(f"bad coordinate {tok!r}", lineno) from None
    if not math.isfinite(x):
        raise MeshParseError(f"non-finite coordinate {tok!r}", lineno)
    return x


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise MeshParseError(f"bad integer {tok!r}", lineno) from None


def parse_off(data: bytes | str) -> TriMesh:
    """Parse an ASCII OFF file.

    Accepts the ModelNet40 variant where the counts follow ``OFF`` on the
    header line (``OFF490 518 0``). Polygons are fan-triangulated from their
    first vertex; triangles with repeated indices are dropped.
    """
    text = _decode(data)
    lines = [
        (n, ln.split("#", 1)[0].split())
        for n, ln in enumerate(text.splitlines(), start=1)
    ]
    lines = [(n, toks) for n, toks in lines if toks]
    if not lines:
        raise MeshParseError("empty file")
    it = iter(lines)
    lineno, toks = next(it)
    head = toks[0]
    if not head.startswith("OFF"):
        raise MeshParseError(f"expected OFF header, got {head!r}", lineno)
    rest = head[3:]
    counts = ([rest] if rest else []) + toks[1:]
    if not counts:
        try:
            lineno, counts = next(it)
        except StopIteration:
            raise MeshParseError("missing counts line", lineno) from None
    if len(counts) < 2:
        raise MeshParseError("counts line needs vertex and face counts", lineno)
    nv, nf = _int(counts[0], lineno), _int(counts[1], lineno)
    if nv < 0 or nf < 0:
        raise MeshParseError("negative element count", lineno)

    vertices = []
    for _ in range(nv):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise MeshParseError(f"unexpected end of file after {len(vertices)} of {nv} vertices") from None
        if len(toks) < 3:
            raise MeshParseError("vertex line needs 3 coordinates", lineno)
        vertices.append([_float(t, lineno) for t in toks[:3]])

    polys = []
    for _ in range(nf):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise MeshParseError(f"unexpected end of file after {len(polys)} of {nf} faces") from None
        k = _int(toks[0], lineno)
        if k < 3:
            raise MeshParseError(f"face with {k} vertices", lineno)
        if len(toks) < k + 1:
            raise MeshParseError(f"face declares {k} vertices but lists {len(toks) - 1}", lineno)
        polys.append((lineno, [_int(t, lineno) for t in toks[1:k + 1]]))
    return _finish(vertices, polys)


def parse_obj(data: bytes | str) -> TriMesh:
    """Parse the ``v`` and ``f`` records of an ASCII OBJ file.

    ``f`` entries may carry ``/vt/vn`` suffixes. Negative indices are relative
    to the number of vertices read so far.
    """
    text = _decode(data)
    vertices = []
    polys = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        if toks[0] == "v":
            if len(toks) < 4:
                raise MeshParseError("vertex record needs 3 coordinates", lineno)
            vertices.append([_float(t, lineno) for t in toks[1:4]])
        elif toks[0] == "f":
            if len(toks) < 4:
                raise MeshParseError("face record needs at least 3 vertices", lineno)
            poly = []
            for tok in toks[1:]:
                i = _int(tok.split("/", 1)[0], lineno)
                if i == 0:
                    raise MeshParseError("OBJ indices are 1-based; got 0", lineno)
                poly.append(len(vertices) + i if i < 0 else i - 1)
            polys.append((lineno, poly))
    return _finish(vertices, polys)


def load_mesh(path: str | Path) -> TriMesh:
    path = Path(path)
    data = path.read_bytes()
    suffix = path.suffix.lower()
    if suffix == ".off":
        return parse_off(data)
    if suffix == ".obj":
        return parse_obj(data)
    raise MeshParseError(f"unsupported mesh format {suffix!r}")


@dataclass(eq=False)
class DatasetRecord:
    face_set: FaceSet
    label: int
    face_count: int = -1
    source_path: str = field(default="", compare=False)

    def __post_init__(self):
        if self.face_count < 0:
            self.face_count = self.face_set.F

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            self.label == other.label
            and self.face_count == other.face_count
            and self.face_set == other.face_set
        )


def cache_size(n_records: int, faces: int) -> int:
    """Byte size of a cache file holding ``n_records`` of ``faces`` faces."""
    per_record = 8 + faces * 15 * 4 + faces * 3 * 8
    return _HEADER.size + n_records * per_record + 4


def write_cache(records: Sequence[DatasetRecord], path: str | Path, num_categories: int | None = None) -> None:
    """Write records to a ``.mnet`` file.

    The u32 after each label holds the record's pre-fill face count.
    """
    faces = records[0].face_set.F if records else 0
    if any(r.face_set.F != faces for r in records):
        raise ValueError("all records must share one face budget")
    if num_categories is None:
        num_categories = max((r.label for r in records), default=-1) + 1
    for r in records:
        if not 0 <= r.label < num_categories:
            raise ValueError(f"label {r.label} outside [0, {num_categories})")
    chunks = [_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(records), faces, num_categories)]
    for r in records:
        fs = r.face_set
        chunks.append(struct.pack("<II", r.label, r.face_count))
        chunks.append(np.ascontiguousarray(fs.centers, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(fs.corners, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(fs.normals, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(fs.neighbors, dtype="<u8").tobytes())
    payload = b"".join(chunks)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def read_cache(path: str | Path) -> tuple[list[DatasetRecord], int]:
    """Read a ``.mnet`` file; returns the records and the category count."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 4:
        raise CacheFormatError("truncated cache header")
    magic, version, count, faces, ncat = _HEADER.unpack_from(blob, 0)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    expected = cache_size(count, faces)
    if len(blob) != expected:
        raise CacheFormatError(f"truncated or oversized cache: {len(blob)} bytes, expected {expected}")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CacheFormatError("checksum mismatch")

    records = []
    off = _HEADER.size
    for _ in range(count):
        label, face_count = struct.unpack_from("<II", blob, off)
        off += 8
        arrays = []
        for width, dtype, size in ((3, "<f4", 4), (9, "<f4", 4), (3, "<f4", 4), (3, "<u8", 8)):
            n = faces * width
            arrays.append(np.frombuffer(blob, dtype=dtype, count=n, offset=off).reshape(faces, width))
            off += n * size
        centers, corners, normals, neighbors = arrays
        fs = FaceSet(
            centers.astype(np.float32),
            corners.astype(np.float32),
            normals.astype(np.float32),
            neighbors.astype(np.int64),
        )
        if label >= ncat:
            raise CacheFormatError(f"label {label} outside [0, {ncat})")
        records.append(DatasetRecord(fs, int(label), int(face_count)))
    return records, int(ncat)


def write_manifest(path: str | Path, categories: dict[str, int], splits: dict[str, Iterable[str]], **extra) -> None:
    doc = {"categories": dict(categories)}
    for name, files in splits.items():
        doc[name] = [str(f) for f in files]
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    cats = doc.get("categories")
    if not isinstance(cats, dict) or sorted(cats.values()) != list(range(len(cats))):
        raise ValueError("manifest categories must map names to labels 0..C-1")
    return doc
