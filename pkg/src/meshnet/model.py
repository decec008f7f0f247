"""MeshNet: per-face descriptors, mesh convolution, pooling and classifier."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .preprocess import FaceBatch
from .tensor import Tensor

AGGREGATION_MODES = ("average", "max", "concat")
REFERENCE_PARAM_COUNT = 4.25e6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    frc_k1: int = 32
    frc_k2: int = 64
    fkc_kernels: int = 64
    fkc_vectors_per_kernel: int = 4
    fkc_sigma: float = 0.2
    spatial_widths: tuple[int, ...] = (64, 64)
    mesh_conv: tuple[tuple[int, int, int, int], ...] = ((64, 131, 256, 256), (256, 256, 512, 512))
    fusion_width: int = 1024
    classifier_widths: tuple[int, ...] = (512, 256, 40)
    dropout_p: float = 0.5
    batch_norm: bool = True
    use_spatial: bool = True
    use_frc: bool = True
    use_fkc: bool = True
    use_mesh_conv: bool = True
    aggregation_mode: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "spatial_widths", tuple(int(w) for w in self.spatial_widths))
        object.__setattr__(self, "classifier_widths", tuple(int(w) for w in self.classifier_widths))
        object.__setattr__(self, "mesh_conv", tuple(tuple(int(c) for c in b) for b in self.mesh_conv))

    @property
    def num_classes(self) -> int:
        return self.classifier_widths[-1]

    @property
    def frc_f_widths(self) -> tuple[int, int]:
        return (self.frc_k1, self.frc_k1)

    @property
    def frc_g_widths(self) -> tuple[int, int]:
        return (self.frc_k2, self.frc_k2)

    def spatial_channels(self) -> int:
        return self.spatial_widths[-1] if self.use_spatial else 0

    def structural_channels(self) -> int:
        """Width of the initial structural feature: FRC + FKC + raw normal.

        With both structural descriptors off the spatial feature stands in
        for the structural stream.
        """
        if not (self.use_frc or self.use_fkc):
            return self.spatial_widths[-1]
        return self.frc_k2 * self.use_frc + self.fkc_kernels * self.use_fkc + 3

    def fusion_in(self) -> int:
        if self.use_mesh_conv:
            return sum(b[2] for b in self.mesh_conv)
        if not (self.use_frc or self.use_fkc):
            return self.spatial_channels()
        return self.spatial_channels() + self.structural_channels()

    def validate(self) -> "ModelConfig":
        widths = [
            self.frc_k1, self.frc_k2, self.fkc_kernels, self.fkc_vectors_per_kernel,
            self.fusion_width, *self.spatial_widths, *self.classifier_widths,
        ]
        if any(w <= 0 for w in widths) or not self.spatial_widths or len(self.classifier_widths) < 1:
            raise ConfigError("all widths must be positive")
        if not self.fkc_sigma > 0:
            raise ConfigError("fkc_sigma must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigError(f"aggregation_mode must be one of {AGGREGATION_MODES}")
        if not (self.use_spatial or self.use_frc or self.use_fkc):
            raise ConfigError("at least one descriptor must be enabled")
        if not (self.use_frc or self.use_fkc) and not self.use_spatial:
            raise ConfigError("no structural descriptor and no spatial descriptor")
        if self.use_mesh_conv:
            if not self.mesh_conv:
                raise ConfigError("use_mesh_conv needs at least one block")
            first = self.mesh_conv[0]
            if first[0] != self.spatial_channels():
                raise ConfigError(
                    f"first mesh-conv block expects {first[0]} spatial channels, "
                    f"descriptors give {self.spatial_channels()}"
                )
            if first[1] != self.structural_channels():
                raise ConfigError(
                    f"first mesh-conv block expects {first[1]} structural channels, "
                    f"descriptors give {self.structural_channels()}"
                )
            for k, (prev, nxt) in enumerate(zip(self.mesh_conv, self.mesh_conv[1:]), start=1):
                if nxt[0] != prev[2] or nxt[1] != prev[3]:
                    raise ConfigError(f"mesh-conv block {k + 1} inputs {nxt[:2]} != block {k} outputs {prev[2:]}")
            if any(c <= 0 for b in self.mesh_conv for c in b[2:]) or any(c <= 0 for b in self.mesh_conv[1:] for c in b):
                raise ConfigError("mesh-conv widths must be positive")
        return self

    def replace(self, **changes) -> "ModelConfig":
        """Copy with changes; the first mesh-conv block is refitted to the descriptors."""
        cfg = dataclasses.replace(self, **changes)
        if cfg.mesh_conv and "mesh_conv" not in changes:
            first = (cfg.spatial_channels(), cfg.structural_channels()) + cfg.mesh_conv[0][2:]
            cfg = dataclasses.replace(cfg, mesh_conv=(first,) + cfg.mesh_conv[1:])
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["spatial_widths"] = list(self.spatial_widths)
        d["classifier_widths"] = list(self.classifier_widths)
        d["mesh_conv"] = [list(b) for b in self.mesh_conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def ablation_configs(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    """The six descriptor/mesh-conv ablation settings, keyed by name."""
    base = base or ModelConfig()
    return {
        "no-spatial": base.replace(use_spatial=False),
        "no-structural": base.replace(use_frc=False, use_fkc=False, aggregation_mode="max"),
        "no-fkc": base.replace(use_fkc=False),
        "no-frc": base.replace(use_frc=False),
        "no-mesh-conv": base.replace(use_mesh_conv=False),
        "full": base.replace(),
    }


def aggregation_configs(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    base = base or ModelConfig()
    return {mode: base.replace(aggregation_mode=mode) for mode in AGGREGATION_MODES}


def gradcheck_config(num_classes: int = 3, aggregation_mode: str = "concat") -> ModelConfig:
    """Narrow network without batch norm or dropout, for finite differences."""
    return ModelConfig(
        frc_k1=4, frc_k2=5, fkc_kernels=4, fkc_vectors_per_kernel=2,
        spatial_widths=(6, 6), mesh_conv=((6, 12, 7, 8), (7, 8, 6, 5)),
        fusion_width=9, classifier_widths=(8, 6, num_classes), dropout_p=0.0,
        batch_norm=False, aggregation_mode=aggregation_mode,
    ).validate()


class SharedMLP:
    """Stack of per-element linear layers, each with optional BN and ReLU.

    ``plain_last`` leaves the final layer as a bare affine map (classifier
    output).
    """

    def __init__(self, model: "MeshNet", name: str, in_ch: int, widths: Sequence[int],
                 plain_last: bool = False, dropout_before: Sequence[int] = ()):
        self.model = model
        self.name = name
        self.widths = tuple(widths)
        self.plain_last = plain_last
        self.dropout_before = set(dropout_before)
        self.layers = []
        for k, w in enumerate(self.widths):
            prefix = f"{name}.{k}"
            model._linear(prefix, in_ch, w)
            has_bn = model.config.batch_norm and not (plain_last and k == len(self.widths) - 1)
            if has_bn:
                model._bn(prefix, w)
            self.layers.append((prefix, has_bn))
            in_ch = w

    def __call__(self, x: Tensor, training: bool, rng=None) -> Tensor:
        p = self.model.params
        last = len(self.layers) - 1
        for k, (prefix, has_bn) in enumerate(self.layers):
            if k in self.dropout_before:
                x = T.dropout(x, self.model.config.dropout_p, rng, training)
            x = x @ p[prefix + ".weight"] + p[prefix + ".bias"]
            if self.plain_last and k == last:
                break
            if has_bn:
                x = T.batch_norm(
                    x, p[prefix + ".bn.weight"], p[prefix + ".bn.bias"],
                    self.model.buffers[prefix + ".bn.running_mean"],
                    self.model.buffers[prefix + ".bn.running_var"],
                    training,
                )
            x = T.relu(x)
        return x


def kernel_vectors(angles: Tensor) -> Tensor:
    """Unit vectors (sin t cos p, sin t sin p, cos t) from (..., 2) angles."""
    theta, phi = angles[..., 0], angles[..., 1]
    st = T.sin(theta)
    out = [st * T.cos(phi), st * T.sin(phi), T.cos(theta)]
    return T.concat([c.reshape(c.shape + (1,)) for c in out], axis=-1)


def neighborhood_index(neighbors: np.ndarray) -> np.ndarray:
    """(B, F, 4) index of each face followed by its three neighbor slots."""
    b, f, _ = neighbors.shape
    own = np.broadcast_to(np.arange(f)[None, :, None], (b, f, 1))
    return np.concatenate([own, neighbors], axis=2)


def face_kernel_correlation(normals, neighbors: np.ndarray, kernels: Tensor, sigma: float) -> Tensor:
    """Gaussian kernel correlation between face neighborhoods and kernels.

    normals (B, F, 3), neighbors (B, F, 3), kernels (M, V, 3) -> (B, F, M):
    the mean over the 4 neighborhood normals n (own + 3 slots) and the V
    kernel vectors m of exp(-|n - m|^2 / (2 sigma^2)).
    """
    normals = T.as_tensor(normals)
    neighbors = np.asarray(neighbors)
    if normals.ndim != 3 or normals.shape[2] != 3 or neighbors.shape != normals.shape:
        raise T.ShapeError("face_kernel_correlation", normals.shape, neighbors.shape)
    if kernels.ndim != 3 or kernels.shape[2] != 3:
        raise T.ShapeError("face_kernel_correlation", kernels.shape, detail="kernels must be (M, V, 3)")
    b, f, _ = normals.shape
    m, v, _ = kernels.shape
    hood = T.gather(normals, neighborhood_index(neighbors), axis=1)
    n_flat = hood.reshape(b * f * 4, 3)
    k_flat = kernels.reshape(m * v, 3)
    n2 = T.reduce_sum(n_flat * n_flat, axis=1).reshape(b * f * 4, 1)
    k2 = T.reduce_sum(k_flat * k_flat, axis=1).reshape(1, m * v)
    d2 = n2 + k2 - 2.0 * (n_flat @ k_flat.T)
    aff = T.exp(d2 * (-1.0 / (2.0 * sigma * sigma)))
    aff = aff.reshape(b, f, 4, m, v)
    return T.reduce_mean(T.reduce_mean(aff, axis=4), axis=2)


class MeshNet:
    def __init__(self, config: ModelConfig | None = None, seed: int | np.random.Generator = 0):
        self.config = (config or ModelConfig()).validate()
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cfg = self.config

        if cfg.use_spatial:
            self.spatial = SharedMLP(self, "spatial", 3, cfg.spatial_widths)
        if cfg.use_frc:
            self.frc_f = SharedMLP(self, "frc.f", 6, cfg.frc_f_widths)
            self.frc_g = SharedMLP(self, "frc.g", cfg.frc_k1, cfg.frc_g_widths)
        if cfg.use_fkc:
            m, v = cfg.fkc_kernels, cfg.fkc_vectors_per_kernel
            angles = np.stack([
                self.rng.uniform(0.0, np.pi, (m, v)),
                self.rng.uniform(0.0, 2 * np.pi, (m, v)),
            ], axis=-1)
            self._param("fkc.angles", angles)

        self.blocks = []
        if cfg.use_mesh_conv:
            for k, (in1, in2, out1, out2) in enumerate(cfg.mesh_conv):
                name = f"mesh_conv.{k}"
                blk = {"combination": SharedMLP(self, name + ".combination", in1 + in2, (out1,))}
                if cfg.aggregation_mode == "concat":
                    blk["pair"] = SharedMLP(self, name + ".pair", 2 * in2, (in2,))
                blk["aggregation"] = SharedMLP(self, name + ".aggregation", in2, (out2,))
                self.blocks.append(blk)

        self.fusion = SharedMLP(self, "fusion", cfg.fusion_in(), (cfg.fusion_width,))
        self.classifier_mlp = SharedMLP(
            self, "classifier", cfg.fusion_width, cfg.classifier_widths,
            plain_last=True, dropout_before=range(max(1, len(cfg.classifier_widths) - 2), len(cfg.classifier_widths)),
        )

    # parameter bookkeeping
    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        t.name = name
        self.params[name] = t
        return t

    def _linear(self, prefix: str, fan_in: int, fan_out: int) -> None:
        bound = np.sqrt(6.0 / fan_in)
        self._param(prefix + ".weight", self.rng.uniform(-bound, bound, (fan_in, fan_out)))
        self._param(prefix + ".bias", np.zeros(fan_out))

    def _bn(self, prefix: str, width: int) -> None:
        self._param(prefix + ".bn.weight", np.ones(width))
        self._param(prefix + ".bn.bias", np.zeros(width))
        dtype = T.get_default_dtype()
        self.buffers[prefix + ".bn.running_mean"] = np.zeros(width, dtype=dtype)
        self.buffers[prefix + ".bn.running_var"] = np.ones(width, dtype=dtype)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # blocks
    def spatial_descriptor(self, centers, training: bool = False) -> Tensor:
        centers = T.as_tensor(centers)
        if centers.shape[-1] != 3:
            raise T.ShapeError("spatial_descriptor", centers.shape, detail="centers must be (..., 3)")
        return self.spatial(centers, training)

    def face_rotate_conv(self, corners, training: bool = False) -> Tensor:
        corners = T.as_tensor(corners)
        if corners.ndim != 3 or corners.shape[-1] != 9:
            raise T.ShapeError("face_rotate_conv", corners.shape, detail="corners must be (B, F, 9)")
        b, f, _ = corners.shape
        v = corners.reshape(b, f, 3, 3)
        pairs = v[:, :, [[0, 1], [1, 2], [2, 0]], :].reshape(b, f, 3, 6)
        h = self.frc_f(pairs, training)
        return self.frc_g(T.reduce_mean(h, axis=2), training)

    def kernels(self) -> Tensor:
        return kernel_vectors(self.params["fkc.angles"])

    def face_kernel_correlation(self, normals, neighbors) -> Tensor:
        return face_kernel_correlation(normals, neighbors, self.kernels(), self.config.fkc_sigma)

    def structural_descriptor(self, batch: FaceBatch, training: bool = False, spatial: Tensor | None = None) -> Tensor:
        cfg = self.config
        parts = []
        if cfg.use_frc:
            parts.append(self.face_rotate_conv(batch.corners, training))
        if cfg.use_fkc:
            parts.append(self.face_kernel_correlation(batch.normals, batch.neighbors))
        if not parts:
            if spatial is None:
                raise ConfigError("no structural descriptor enabled and no spatial feature given")
            return spatial
        parts.append(T.as_tensor(batch.normals))
        return T.concat(parts, axis=-1)

    def mesh_conv(self, k: int, spatial: Tensor | None, structural: Tensor, neighbors: np.ndarray,
                  training: bool = False) -> tuple[Tensor, Tensor]:
        """Mesh convolution block ``k``: returns (new spatial, new structural)."""
        in1, in2, _, _ = self.config.mesh_conv[k]
        blk = self.blocks[k]
        sp_ch = 0 if spatial is None else spatial.shape[-1]
        if structural.shape[-1] != in2 or sp_ch != in1:
            raise T.ShapeError(
                f"mesh_conv[{k}]", (sp_ch,), (structural.shape[-1],), detail=f"expected ({in1}, {in2})"
            )
        neighbors = np.asarray(neighbors)
        if neighbors.shape != structural.shape[:2] + (3,):
            raise T.ShapeError(f"mesh_conv[{k}]", structural.shape, neighbors.shape)
        comb_in = structural if spatial is None else T.concat([spatial, structural], axis=-1)
        new_spatial = blk["combination"](comb_in, training)

        mode = self.config.aggregation_mode
        if mode == "concat":
            b, f = neighbors.shape[:2]
            own_idx = np.broadcast_to(np.arange(f)[None, :, None], (b, f, 3))
            own = T.gather(structural, own_idx, axis=1)
            nbr = T.gather(structural, neighbors, axis=1)
            pair = blk["pair"](T.concat([own, nbr], axis=-1), training)
            agg = T.reduce_max(pair, axis=2)
        else:
            hood = T.gather(structural, neighborhood_index(neighbors), axis=1)
            agg = T.reduce_mean(hood, axis=2) if mode == "average" else T.reduce_max(hood, axis=2)
        return new_spatial, blk["aggregation"](agg, training)

    def global_feature(self, features: Sequence[Tensor], training: bool = False) -> Tensor:
        """Concatenate per-face features, fuse, and max-pool over faces."""
        x = T.concat(list(features), axis=-1) if len(features) > 1 else features[0]
        if x.shape[-1] != self.config.fusion_in():
            raise T.ShapeError("global_feature", x.shape, detail=f"expected {self.config.fusion_in()} channels")
        return T.reduce_max(self.fusion(x, training), axis=1)

    def classifier(self, g: Tensor, training: bool = False, rng=None) -> Tensor:
        if g.ndim != 2 or g.shape[1] != self.config.fusion_width:
            raise T.ShapeError("classifier", g.shape, detail=f"expected (B, {self.config.fusion_width})")
        return self.classifier_mlp(g, training, rng)

    def features(self, batch: FaceBatch, training: bool = False) -> Tensor:
        cfg = self.config
        spatial = self.spatial_descriptor(batch.centers, training) if cfg.use_spatial else None
        structural = self.structural_descriptor(batch, training, spatial)
        if not cfg.use_mesh_conv:
            if cfg.use_frc or cfg.use_fkc:
                outs = [t for t in (spatial, structural) if t is not None]
            else:
                outs = [spatial]
            return self.global_feature(outs, training)
        outs = []
        for k in range(len(self.blocks)):
            spatial, structural = self.mesh_conv(k, spatial, structural, batch.neighbors, training)
            outs.append(spatial)
        return self.global_feature(outs, training)

    def forward(self, batch: FaceBatch, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Returns (logits (B, C), global feature (B, fusion_width))."""
        if training and rng is None and self.config.dropout_p > 0:
            rng = self.rng
        g = self.features(batch, training)
        return self.classifier(g, training, rng), g

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ValueError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, arr in arrays.items():
            target = self.params[k].data if k in self.params else self.buffers[k]
            if target.shape != arr.shape:
                raise T.ShapeError("load_state", target.shape, arr.shape, detail=k)
            target[...] = arr


def _mlp_count(in_ch: int, widths: Iterable[int], bn: bool, plain_last: bool = False) -> int:
    widths = list(widths)
    total = 0
    for k, w in enumerate(widths):
        total += in_ch * w + w
        if bn and not (plain_last and k == len(widths) - 1):
            total += 2 * w
        in_ch = w
    return total


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    """Learnable scalar counts per network part (closed form)."""
    cfg = config.validate()
    bn = cfg.batch_norm
    parts: dict[str, int] = {}
    if cfg.use_spatial:
        parts["spatial_descriptor"] = _mlp_count(3, cfg.spatial_widths, bn)
    if cfg.use_frc:
        parts["face_rotate_conv"] = _mlp_count(6, cfg.frc_f_widths, bn) + _mlp_count(cfg.frc_k1, cfg.frc_g_widths, bn)
    if cfg.use_fkc:
        parts["face_kernel_correlation"] = cfg.fkc_kernels * cfg.fkc_vectors_per_kernel * 2
    if cfg.use_mesh_conv:
        for k, (in1, in2, out1, out2) in enumerate(cfg.mesh_conv):
            n = _mlp_count(in1 + in2, (out1,), bn) + _mlp_count(in2, (out2,), bn)
            if cfg.aggregation_mode == "concat":
                n += _mlp_count(2 * in2, (in2,), bn)
            parts[f"mesh_conv_{k + 1}"] = n
    parts["fusion"] = _mlp_count(cfg.fusion_in(), (cfg.fusion_width,), bn)
    parts["classifier"] = _mlp_count(cfg.fusion_width, cfg.classifier_widths, bn, plain_last=True)
    return parts


def param_count(config: ModelConfig) -> int:
    return sum(param_breakdown(config).values())


def mac_estimate(config: ModelConfig, faces: int = 1024) -> dict[str, int]:
    """Multiply-accumulate count per sample for each network part."""
    cfg = config.validate()

    def mlp(in_ch, widths, rows):
        total = 0
        for w in widths:
            total += rows * in_ch * w
            in_ch = w
        return total

    out: dict[str, int] = {}
    if cfg.use_spatial:
        out["spatial_descriptor"] = mlp(3, cfg.spatial_widths, faces)
    if cfg.use_frc:
        out["face_rotate_conv"] = mlp(6, cfg.frc_f_widths, 3 * faces) + mlp(cfg.frc_k1, cfg.frc_g_widths, faces)
    if cfg.use_fkc:
        out["face_kernel_correlation"] = faces * 4 * cfg.fkc_kernels * cfg.fkc_vectors_per_kernel * 3
    if cfg.use_mesh_conv:
        for k, (in1, in2, out1, out2) in enumerate(cfg.mesh_conv):
            n = mlp(in1 + in2, (out1,), faces) + mlp(in2, (out2,), faces)
            if cfg.aggregation_mode == "concat":
                n += mlp(2 * in2, (in2,), 3 * faces)
            out[f"mesh_conv_{k + 1}"] = n
    out["fusion"] = mlp(cfg.fusion_in(), (cfg.fusion_width,), faces)
    out["classifier"] = mlp(cfg.fusion_width, cfg.classifier_widths, 1)
    return out
