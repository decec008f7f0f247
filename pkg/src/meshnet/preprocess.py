"""Turn a triangle mesh into the per-face input representation."""

from __future__ import annotations

import heapq
import logging
from typing import NamedTuple, Sequence

import numpy as np

from .geometry import FaceSet, TriMesh

log = logging.getLogger(__name__)

MIN_CROSS_NORM = 1e-12


class DecimationError(RuntimeError):
    def __init__(self, achieved: int, target: int):
        super().__init__(f"decimation stalled at {achieved} faces (target {target})")
        self.achieved = achieved
        self.target = target


def _plane_quadrics(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    p = v[f]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    plane = np.concatenate([n, -(n * p[:, 0]).sum(axis=1, keepdims=True)], axis=1)
    face_q = plane[:, :, None] * plane[:, None, :]
    q = np.zeros((len(v), 4, 4))
    for k in range(3):
        np.add.at(q, f[:, k], face_q)
    return q


def decimate(mesh: TriMesh, target_faces: int) -> TriMesh:
    """Reduce ``mesh`` to at most ``target_faces`` faces.

    Repeatedly collapses the shortest edge to its midpoint; equal lengths are
    ordered by the quadric error at the midpoint, then by vertex index.
    Meshes already within budget come back unchanged.
    """
    if target_faces < 4:
        raise ValueError(f"target_faces must be >= 4, got {target_faces}")
    if mesh.n_faces <= target_faces:
        return mesh

    verts = mesh.vertices.copy()
    faces = [list(map(int, f)) for f in mesh.faces]
    alive = [True] * len(faces)
    n_alive = len(faces)
    vert_faces: list[set[int]] = [set() for _ in range(len(verts))]
    for fi, f in enumerate(faces):
        for vi in f:
            vert_faces[vi].add(fi)
    quad = _plane_quadrics(verts, mesh.faces)
    version = [0] * len(verts)
    removed = [False] * len(verts)
    heap: list = []

    def push(u: int, w: int) -> None:
        d = verts[u] - verts[w]
        mid = np.append(0.5 * (verts[u] + verts[w]), 1.0)
        err = float(mid @ (quad[u] + quad[w]) @ mid)
        heapq.heappush(heap, (float(d @ d), err, u, w, version[u], version[w]))

    edges = set()
    for f in faces:
        for k in range(3):
            a, b = f[k], f[(k + 1) % 3]
            edges.add((min(a, b), max(a, b)))
    for a, b in sorted(edges):
        push(a, b)

    def kill(fi: int) -> None:
        nonlocal n_alive
        alive[fi] = False
        n_alive -= 1
        for vi in faces[fi]:
            vert_faces[vi].discard(fi)

    while n_alive > target_faces:
        if not heap:
            raise DecimationError(n_alive, target_faces)
        _, _, u, w, vu, vw = heapq.heappop(heap)
        if removed[u] or removed[w] or version[u] != vu or version[w] != vw:
            continue
        shared = vert_faces[u] & vert_faces[w]
        if not shared:
            continue
        verts[u] = 0.5 * (verts[u] + verts[w])
        quad[u] += quad[w]
        removed[w] = True
        version[u] += 1
        for fi in sorted(shared):
            kill(fi)
        for fi in sorted(vert_faces[w]):
            faces[fi] = [u if vi == w else vi for vi in faces[fi]]
            vert_faces[u].add(fi)
        vert_faces[w] = set()
        seen = set()
        for fi in sorted(vert_faces[u]):
            key = frozenset(faces[fi])
            if key in seen:
                kill(fi)
            else:
                seen.add(key)
        if n_alive < 1:
            raise DecimationError(n_alive, target_faces)
        ring = {vi for fi in vert_faces[u] for vi in faces[fi]} - {u}
        for x in sorted(ring):
            push(u, x)

    kept = np.array([faces[fi] for fi in range(len(faces)) if alive[fi]], dtype=np.int64)
    used = np.unique(kept)
    if len(used) < 3:
        raise DecimationError(len(kept), target_faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(verts[used], remap[kept])


def normalize(mesh: TriMesh) -> TriMesh:
    """Move the vertex mean to the origin and scale into the unit sphere."""
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    scale = np.linalg.norm(v, axis=1).max()
    if not scale > 1e-12:
        raise ValueError("cannot normalize: all vertices coincide (zero scale)")
    return TriMesh(v / scale, mesh.faces)


def jitter(mesh: TriMesh, sigma: float, rng: np.random.Generator) -> TriMesh:
    """Add independent N(0, sigma^2) noise to every vertex coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return mesh
    return TriMesh(mesh.vertices + rng.normal(0.0, sigma, mesh.vertices.shape), mesh.faces)


def valid_face_mask(mesh: TriMesh) -> np.ndarray:
    p = mesh.vertices[mesh.faces]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return np.linalg.norm(cross, axis=1) >= MIN_CROSS_NORM


def face_adjacency(faces: np.ndarray) -> np.ndarray:
    """Shared-edge neighbors, (F, 3), slot k across edge (f[k], f[k+1]).

    An edge shared by more than two faces links only the first two in face
    order; empty slots hold the face's own index.
    """
    nf = len(faces)
    a = faces
    b = np.roll(faces, -1, axis=1)
    lo = np.minimum(a, b).ravel()
    hi = np.maximum(a, b).ravel()
    face_id = np.repeat(np.arange(nf), 3)
    slot = np.tile(np.arange(3), nf)
    order = np.lexsort((slot, face_id, hi, lo))
    lo, hi, face_id, slot = lo[order], hi[order], face_id[order], slot[order]
    neighbors = np.repeat(np.arange(nf)[:, None], 3, axis=1)
    if len(lo) < 2:
        return neighbors
    same_next = (lo[:-1] == lo[1:]) & (hi[:-1] == hi[1:])
    starts = np.ones(len(lo), dtype=bool)
    starts[1:] = ~same_next
    pair = np.flatnonzero(starts[:-1] & same_next)
    i, j = pair, pair + 1
    neighbors[face_id[i], slot[i]] = face_id[j]
    neighbors[face_id[j], slot[j]] = face_id[i]
    return neighbors


def _face_geometry(p: np.ndarray):
    centers = p.mean(axis=1)
    corners = (p - centers[:, None, :]).reshape(-1, 9)
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    return centers, corners, cross, norm


def build_face_set(mesh: TriMesh) -> FaceSet:
    """Per-face centers, corners, normals and neighbor indices.

    Zero-area faces are dropped (with a logged warning) before adjacency is
    computed.
    """
    keep = valid_face_mask(mesh)
    if not keep.all():
        log.warning("dropped %d zero-area faces", int((~keep).sum()))
    faces = mesh.faces[keep]
    if len(faces) == 0:
        raise ValueError("mesh has no faces with nonzero area")
    centers, corners, cross, norm = _face_geometry(mesh.vertices[faces])
    return FaceSet(
        centers.astype(np.float32),
        corners.astype(np.float32),
        (cross / norm).astype(np.float32),
        face_adjacency(faces),
    )


def fill_to_budget(fs: FaceSet, faces: int, rng: np.random.Generator) -> FaceSet:
    """Pad to exactly ``faces`` faces with copies of randomly chosen faces."""
    if fs.F > faces:
        raise ValueError(f"face set has {fs.F} faces, more than the budget {faces}; decimate first")
    if fs.F == faces:
        return fs
    pick = np.concatenate([np.arange(fs.F), rng.integers(0, fs.F, faces - fs.F)])
    return FaceSet(fs.centers[pick], fs.corners[pick], fs.normals[pick], fs.neighbors[pick])


def jitter_face_set(fs: FaceSet, sigma: float, rng: np.random.Generator, merge_tol: float = 1e-6) -> FaceSet:
    """Vertex jitter applied to an already-built face set.

    Vertices are recovered from center + corner and merged on a ``merge_tol``
    grid so that faces sharing a vertex move together. Adjacency is kept.
    """
    if sigma == 0:
        return fs
    p = fs.vertex_positions().astype(np.float64).reshape(-1, 3)
    keys = np.round(p / merge_tol).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    noise = rng.normal(0.0, sigma, (inverse.max() + 1, 3))
    p = (p + noise[inverse]).reshape(-1, 3, 3)
    centers, corners, cross, norm = _face_geometry(p)
    ok = norm[:, 0] >= MIN_CROSS_NORM
    normals = np.where(ok[:, None], cross / np.where(ok[:, None], norm, 1.0), fs.normals)
    return FaceSet(
        centers.astype(np.float32),
        corners.astype(np.float32),
        normals.astype(np.float32),
        fs.neighbors,
    )


def prepare(mesh: TriMesh, faces: int = 1024) -> FaceSet:
    """Decimate, normalize and build the (unfilled) face set."""
    return build_face_set(normalize(decimate(mesh, faces)))


class FaceBatch(NamedTuple):
    centers: np.ndarray
    corners: np.ndarray
    normals: np.ndarray
    neighbors: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.centers.shape[:2]


def stack(face_sets: Sequence[FaceSet]) -> FaceBatch:
    """Stack equally sized face sets into (B, F, ...) arrays."""
    if len({fs.F for fs in face_sets}) != 1:
        raise ValueError("face sets in a batch must have equal face counts")
    return FaceBatch(
        np.stack([fs.centers for fs in face_sets]),
        np.stack([fs.corners for fs in face_sets]),
        np.stack([fs.normals for fs in face_sets]),
        np.stack([fs.neighbors for fs in face_sets]).astype(np.int64),
    )
