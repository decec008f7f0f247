"""Core mesh data types shared by parsing, preprocessing and the model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh: float64 vertices (V, 3), int64 faces (F, 3)."""

    vertices: np.ndarray
    faces: np.ndarray
    dropped_faces: int = field(default=0, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(v) < 3:
            raise ValueError(f"mesh needs at least 3 vertices, got {len(v)}")
        if len(f) < 1:
            raise ValueError("mesh has no faces")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh has non-finite vertex coordinates")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("face with repeated vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(self.faces, other.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())


@dataclass(eq=False)
class FaceSet:
    """Per-face network input.

    centers (F, 3), corners (F, 9) as the three center-to-vertex vectors in
    winding order, unit normals (F, 3), and neighbors (F, 3) holding the
    indices of the faces across each edge (a face's own index where there is
    no neighbor).
    """

    centers: np.ndarray
    corners: np.ndarray
    normals: np.ndarray
    neighbors: np.ndarray

    def __post_init__(self):
        n = len(self.centers)
        shapes = {
            "centers": (n, 3),
            "corners": (n, 9),
            "normals": (n, 3),
            "neighbors": (n, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def F(self) -> int:
        return len(self.centers)

    def __eq__(self, other):
        if not isinstance(other, FaceSet):
            return NotImplemented
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return self.centers, self.corners, self.normals, self.neighbors

    def vertex_positions(self) -> np.ndarray:
        """(F, 3, 3) vertex coordinates recovered as center + corner."""
        return self.centers[:, None, :] + self.corners.reshape(-1, 3, 3)

    def check(self, atol: float = 1e-5) -> None:
        """Raise ValueError if any structural invariant is violated."""
        corner_sum = self.corners.reshape(-1, 3, 3).sum(axis=1)
        if self.F and np.abs(corner_sum).max() > atol:
            raise ValueError("corner vectors do not sum to zero")
        if self.F and np.abs(np.linalg.norm(self.normals, axis=1) - 1).max() > atol:
            raise ValueError("normals are not unit length")
        if self.F and (self.neighbors.min() < 0 or self.neighbors.max() >= self.F):
            raise ValueError("neighbor index out of range")
