"""Central finite-difference checks for every network op.

An element passes when ``|analytic - numeric| <= 1e-4 * max(|analytic|,
|numeric|)`` or the absolute difference is at most 1e-6; equivalently the
reported error is ``|a - n| / max(|a|, |n|, 1e-2)`` and must stay below 1e-4.
Coordinates whose +/-h probes change a relu mask or a max pick are skipped,
since the function is not differentiable across that kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import MeshNet, gradcheck_config
from .preprocess import FaceBatch
from .tensor import Tensor

STEP = 1e-4
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    op: str
    max_error: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < REL_TOL and self.checked > 0


def element_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR / REL_TOL)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    op: str,
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    max_coords: int = 40,
    h: float = STEP,
) -> GradCheckResult:
    """Compare backward() against central differences of ``loss_fn``.

    At most ``max_coords`` randomly chosen coordinates of each tensor are
    probed.
    """
    start = time.perf_counter()
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    with T.record_branches() as base:
        loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst = 0.0
    checked = skipped = 0
    with T.no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if flat.size > max_coords:
                coords = rng.choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                with T.record_branches() as up:
                    fp = float(loss_fn().data)
                flat[i] = orig - h
                with T.record_branches() as down:
                    fm = float(loss_fn().data)
                flat[i] = orig
                if up != base or down != base:
                    skipped += 1
                    continue
                numeric = (fp - fm) / (2 * h)
                err = float(element_error(np.array(ga.reshape(-1)[i]), np.array(numeric)))
                worst = max(worst, err)
                checked += 1
    return GradCheckResult(op, worst, checked, skipped, time.perf_counter() - start)


def random_batch(rng: np.random.Generator, batch: int = 2, faces: int = 8) -> FaceBatch:
    """Random float64 face batch with a mix of real and self-filled neighbors."""
    centers = rng.uniform(-1, 1, (batch, faces, 3))
    corners = rng.normal(0, 0.3, (batch, faces, 3, 3))
    corners -= corners.mean(axis=2, keepdims=True)
    normals = rng.normal(size=(batch, faces, 3))
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    neighbors = rng.integers(0, faces, (batch, faces, 3))
    own = np.arange(faces)[None, :, None]
    neighbors = np.where(rng.random((batch, faces, 3)) < 0.25, own, neighbors)
    return FaceBatch(centers, corners.reshape(batch, faces, 9), normals, neighbors)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.reduce_sum(out * weights)


def _params(model: MeshNet, prefix: str) -> list[Tensor]:
    return [p for k, p in model.params.items() if k.startswith(prefix)]


def run_all(seed: int = 0, batch: int = 2, faces: int = 8, max_coords: int = 40) -> list[GradCheckResult]:
    """Finite-difference check of every layer op, in float64."""
    rng = np.random.default_rng(seed)
    results = []
    with T.precision(np.float64):
        fb = random_batch(rng, batch, faces)
        nets = {mode: MeshNet(gradcheck_config(aggregation_mode=mode), seed=seed) for mode in ("average", "max", "concat")}
        net = nets["concat"]
        cfg = net.config

        def probe(op, build, tensors):
            out_shape = build().shape
            w = rng.normal(size=out_shape)
            results.append(check_gradients(op, lambda: _weighted_sum(build(), w), tensors, rng, max_coords))

        centers = Tensor(fb.centers)
        probe("spatial_descriptor", lambda: net.spatial_descriptor(centers), [centers] + _params(net, "spatial."))

        corners = Tensor(fb.corners)
        probe("face_rotate_conv", lambda: net.face_rotate_conv(corners), [corners] + _params(net, "frc."))

        angles = net.params["fkc.angles"]
        probe("kernel_vectors", lambda: net.kernels(), [angles])
        probe("face_kernel_correlation", lambda: net.face_kernel_correlation(fb.normals, fb.neighbors), [angles])

        in1, in2, _, _ = cfg.mesh_conv[0]
        sp = Tensor(rng.normal(size=(batch, faces, in1)))
        st = Tensor(rng.normal(size=(batch, faces, in2)))
        for mode, m in nets.items():

            def build(m=m):
                new_sp, new_st = m.mesh_conv(0, sp, st, fb.neighbors)
                return T.concat([new_sp, new_st], axis=-1)

            probe(f"mesh_conv[{mode}]", build, [sp, st] + _params(m, "mesh_conv.0."))

        feats = [Tensor(rng.normal(size=(batch, faces, b[2]))) for b in cfg.mesh_conv]
        probe("global_feature", lambda: net.global_feature(feats), feats + _params(net, "fusion."))

        g = Tensor(rng.normal(size=(batch, cfg.fusion_width)))
        probe("classifier", lambda: net.classifier(g), [g] + _params(net, "classifier."))

        logits = Tensor(rng.normal(size=(batch, cfg.num_classes)))
        labels = rng.integers(0, cfg.num_classes, batch)
        results.append(check_gradients(
            "softmax_cross_entropy", lambda: T.softmax_cross_entropy(logits, labels), [logits], rng, max_coords))

        for mode, m in nets.items():
            results.append(check_gradients(
                f"network[{mode}]",
                lambda m=m: T.softmax_cross_entropy(m.forward(fb)[0], labels),
                list(m.params.values()), rng, max_coords=8,
            ))
    return results


OPS = (
    "spatial_descriptor", "face_rotate_conv", "kernel_vectors", "face_kernel_correlation",
    "mesh_conv[average]", "mesh_conv[max]", "mesh_conv[concat]", "global_feature", "classifier",
    "softmax_cross_entropy", "network[average]", "network[max]", "network[concat]",
)
