"""Per-face coloring of structural feature channels (PLY + CSV export)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import FaceSet, TriMesh
from .model import MeshNet
from .preprocess import build_face_set, decimate, normalize, stack, valid_face_mask

FEATURES = ("frc", "fkc")


def structural_features(model: MeshNet, fs: FaceSet, which: str) -> np.ndarray:
    """(F, channels) output of one structural descriptor, eval mode."""
    if which not in FEATURES:
        raise ValueError(f"which must be one of {FEATURES}")
    cfg = model.config
    if (which == "frc" and not cfg.use_frc) or (which == "fkc" and not cfg.use_fkc):
        raise ValueError(f"model was built without the {which} descriptor")
    batch = stack([fs])
    with T.no_grad():
        if which == "frc":
            out = model.face_rotate_conv(batch.corners)
        else:
            out = model.face_kernel_correlation(batch.normals, batch.neighbors)
    return out.data[0]


def channel_colors(values: np.ndarray) -> np.ndarray:
    """Linear blue (min) to red (max) ramp, uint8 (N, 3); constant input maps to blue."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min() if v.size else 0.0
    t = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    rgb = np.stack([255 * t, np.zeros_like(t), 255 * (1 - t)], axis=1)
    return np.rint(rgb).astype(np.uint8)


def write_ply(path, vertices: np.ndarray, faces: np.ndarray, face_rgb: np.ndarray) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{x:.7g} {y:.7g} {z:.7g}" for x, y, z in vertices]
    lines += [f"3 {a} {b} {c} {r} {g} {bl}" for (a, b, c), (r, g, bl) in zip(faces, face_rgb)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_feature_csv(path, values: np.ndarray) -> None:
    rows = ["face,value"] + [f"{i},{float(x)!r}" for i, x in enumerate(values)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_feature_csv(path) -> np.ndarray:
    rows = Path(path).read_text().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows], dtype=np.float32)


def visualize(model: MeshNet, mesh: TriMesh, channel: int, which: str, out_prefix,
              faces: int = 1024, render: bool = True) -> dict:
    """Color the faces of ``mesh`` by one structural-feature channel.

    Writes ``<prefix>.ply`` and ``<prefix>.csv`` (and ``<prefix>.png`` when
    ``render``); returns the paths and the channel values.
    """
    width = model.config.frc_k2 if which == "frc" else model.config.fkc_kernels
    if not 0 <= channel < width:
        raise ValueError(f"channel {channel} out of range for {which} width {width}")
    prepped = normalize(decimate(mesh, faces))
    fs = build_face_set(prepped)
    values = structural_features(model, fs, which)[:, channel]
    kept = prepped.faces[valid_face_mask(prepped)]
    rgb = channel_colors(values)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"ply": out_prefix.with_suffix(".ply"), "csv": out_prefix.with_suffix(".csv")}
    write_ply(paths["ply"], prepped.vertices, kept, rgb)
    write_feature_csv(paths["csv"], values)
    if render:
        from .plotting import render_colored_mesh

        paths["png"] = render_colored_mesh(
            prepped.vertices, kept, rgb, out_prefix.with_suffix(".png"), title=f"{which} channel {channel}")
    return {"paths": paths, "values": values, "faces": len(kept)}
