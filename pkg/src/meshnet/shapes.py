"""Small procedural meshes for tests, demos and the overfit harness."""

from __future__ import annotations

import numpy as np

from .geometry import TriMesh


def tetrahedron() -> TriMesh:
    v = [(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)]
    f = [(0, 1, 2), (0, 3, 1), (0, 2, 3), (1, 3, 2)]
    return TriMesh(np.array(v, float), np.array(f))


def octahedron() -> TriMesh:
    v = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    f = [(0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4), (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5)]
    return TriMesh(np.array(v, float), np.array(f))


CUBE_QUADS = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]


def cube_vertices(half: float = 1.0) -> np.ndarray:
    return half * np.array(
        [(-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1),
         (-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1)], float)


def cube(half: float = 1.0) -> TriMesh:
    f = [t for a, b, c, d in CUBE_QUADS for t in ((a, b, c), (a, c, d))]
    return TriMesh(cube_vertices(half), np.array(f))


def subdivide(mesh: TriMesh, times: int = 1) -> TriMesh:
    """Split every triangle into four through its edge midpoints."""
    v, f = mesh.vertices, mesh.faces
    for _ in range(times):
        verts = list(map(tuple, v))
        mid: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in mid:
                mid[key] = len(verts)
                verts.append(tuple((np.asarray(verts[a]) + np.asarray(verts[b])) / 2))
            return mid[key]

        faces = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        v, f = np.array(verts), np.array(faces)
    return TriMesh(v, f)


def icosahedron() -> TriMesh:
    t = (1 + 5 ** 0.5) / 2
    v = np.array([
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ], float)
    f = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ])
    return TriMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)


def icosphere(subdivisions: int = 2) -> TriMesh:
    """Unit sphere approximation with 20 * 4**subdivisions faces."""
    m = subdivide(icosahedron(), subdivisions)
    v = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    return TriMesh(v, m.faces)


def transformed(mesh: TriMesh, scale=(1.0, 1.0, 1.0), rotation: np.ndarray | None = None,
                offset=(0.0, 0.0, 0.0)) -> TriMesh:
    v = mesh.vertices * np.asarray(scale)
    if rotation is not None:
        v = v @ rotation.T
    return TriMesh(v + np.asarray(offset), mesh.faces)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def two_class_dataset(rng: np.random.Generator, per_class: int = 4) -> list[tuple[TriMesh, int]]:
    """Boxes (label 0) and rounded blobs (label 1) with random stretch and pose."""
    out = []
    for _ in range(per_class):
        box = subdivide(cube(), 1)
        out.append((transformed(box, rng.uniform(0.5, 1.5, 3), random_rotation(rng)), 0))
    for _ in range(per_class):
        blob = icosphere(1)
        out.append((transformed(blob, rng.uniform(0.5, 1.5, 3), random_rotation(rng)), 1))
    return out
