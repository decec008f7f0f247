import math

import numpy as np
import pytest

from meshnet import tensor as T
from meshnet.model import (
    ConfigError, MeshNet, ModelConfig, ablation_configs, aggregation_configs, face_kernel_correlation,
    kernel_vectors, mac_estimate, param_breakdown, param_count,
)
from meshnet.preprocess import build_face_set, decimate, fill_to_budget, normalize, stack
from meshnet.shapes import cube, icosphere, transformed
from meshnet.tensor import Tensor
from meshnet.train import TrainConfig, train

from conftest import small_config


def naive_fkc(normals, neighbors, kernels, sigma):
    """Per-face double loop over neighborhood normals and kernel vectors."""
    b, f, _ = normals.shape
    m, v, _ = kernels.shape
    out = np.zeros((b, f, m))
    for bi in range(b):
        for i in range(f):
            hood = [i] + list(neighbors[bi, i])
            for k in range(m):
                acc = 0.0
                for j in hood:
                    for q in range(v):
                        d = normals[bi, j] - kernels[k, q]
                        acc += math.exp(-float(d @ d) / (2 * sigma * sigma))
                out[bi, i, k] = acc / (len(hood) * v)
    return out


def random_unit(rng, shape):
    x = rng.normal(size=shape + (3,))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def permute_batch(batch, perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return batch._replace(
        centers=batch.centers[:, perm], corners=batch.corners[:, perm], normals=batch.normals[:, perm],
        neighbors=inv[batch.neighbors[:, perm]],
    )


@pytest.fixture(scope="module")
def trained():
    """Small model with non-trivial batch-norm statistics."""
    from conftest import make_records

    recs = make_records(np.random.default_rng(11), faces=64, per_class=2)
    model = MeshNet(small_config(), seed=2)
    train(recs, TrainConfig(epochs=2, batch_size=2), model)
    return model, recs


# ------------------------------------------------------------------ kernels and FKC

def test_kernel_vectors_poles_and_equator():
    out = kernel_vectors(Tensor(np.array([[[0.0, 1.3], [math.pi / 2, 0.0]]]))).data
    np.testing.assert_allclose(out[0, 0], [0, 0, 1], atol=1e-7)
    np.testing.assert_allclose(out[0, 1], [1, 0, 0], atol=1e-7)


def test_kernel_vectors_are_unit(rng):
    out = kernel_vectors(Tensor(rng.uniform(-10, 10, (8, 4, 2)))).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1, atol=1e-6)


def test_fkc_matches_naive_loops(rng):
    for _ in range(20):
        f, m, v = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        normals = random_unit(rng, (1, f))
        neighbors = rng.integers(0, f, (1, f, 3))
        kernels = random_unit(rng, (m, v))
        with T.precision(np.float64):
            got = face_kernel_correlation(normals, neighbors, Tensor(kernels), 0.2).data
        np.testing.assert_allclose(got, naive_fkc(normals, neighbors, kernels, 0.2), atol=1e-6)


def test_fkc_identical_vectors_give_one():
    n = np.array([[[0.0, 0.6, 0.8]]])
    with T.precision(np.float64):
        out = face_kernel_correlation(n, np.zeros((1, 1, 3), int), Tensor(np.tile(n[0, 0], (2, 3, 1))), 0.2)
    np.testing.assert_allclose(out.data, 1.0, rtol=1e-14)


def test_fkc_orthogonal_case_is_exp_minus_25():
    n = np.array([[[0.0, 0.0, 1.0]]])
    with T.precision(np.float64):
        out = face_kernel_correlation(n, np.zeros((1, 1, 3), int), Tensor(np.array([[[1.0, 0.0, 0.0]]])), 0.2)
    assert out.data[0, 0, 0] == pytest.approx(math.exp(-25), rel=1e-12)


def test_fkc_range_and_sigma_monotone(rng):
    normals = random_unit(rng, (1, 16))
    nb = rng.integers(0, 16, (1, 16, 3))
    kernels = Tensor(random_unit(rng, (6, 4)))
    with T.precision(np.float64):
        wide = face_kernel_correlation(normals, nb, kernels, 0.4).data
        narrow = face_kernel_correlation(normals, nb, kernels, 0.2).data
    assert (wide > 0).all() and (wide <= 1).all()
    assert (narrow <= wide).all()


def test_fkc_rejects_bad_shapes():
    with pytest.raises(T.ShapeError):
        face_kernel_correlation(np.zeros((1, 4, 3)), np.zeros((1, 4, 2), int), Tensor(np.zeros((2, 2, 3))), 0.2)


# ------------------------------------------------------------------ invariances

def test_face_permutation_invariance_of_logits(trained, rng):
    model, recs = trained
    batch = stack([r.face_set for r in recs[:2]])
    perm = rng.permutation(batch.shape[1])
    with T.no_grad():
        a, ga = model.forward(batch)
        b, gb = model.forward(permute_batch(batch, perm))
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(ga.data, gb.data)


def test_cyclic_corner_invariance_of_frc(trained):
    model, recs = trained
    batch = stack([recs[0].face_set])
    rolled = np.roll(batch.corners.reshape(1, -1, 3, 3), -1, axis=2).reshape(batch.corners.shape)
    with T.no_grad():
        a = model.face_rotate_conv(batch.corners).data
        b = model.face_rotate_conv(rolled).data
    assert np.array_equal(a, b)


def test_structural_descriptors_translation_invariant(trained):
    model, _ = trained
    mesh = normalize(transformed(icosphere(1), (1.0, 1.5, 0.7)))
    moved = transformed(mesh, offset=(0.3, -0.2, 0.25))
    b1, b2 = stack([build_face_set(mesh)]), stack([build_face_set(moved)])
    with T.no_grad():
        for fn in (lambda b: model.face_rotate_conv(b.corners), lambda b: model.face_kernel_correlation(b.normals, b.neighbors)):
            np.testing.assert_allclose(fn(b1).data, fn(b2).data, atol=1e-6, rtol=0)
        assert not np.allclose(model.spatial_descriptor(b1.centers).data, model.spatial_descriptor(b2.centers).data)


def test_duplicate_face_leaves_global_feature_unchanged(trained):
    model, recs = trained
    fs = recs[1].face_set
    batch = stack([fs])
    extra = np.concatenate([np.arange(fs.F), [3, 3, 17]])
    dup = batch._replace(centers=batch.centers[:, extra], corners=batch.corners[:, extra],
                         normals=batch.normals[:, extra], neighbors=batch.neighbors[:, extra])
    with T.no_grad():
        g1 = model.forward(batch)[1].data
        g2 = model.forward(dup)[1].data
    assert np.array_equal(g1, g2)


@pytest.mark.parametrize("mode", ["average", "max", "concat"])
def test_neighbor_slot_order_does_not_matter(rng, mode):
    model = MeshNet(small_config(aggregation_mode=mode), seed=4)
    sp = Tensor(rng.normal(size=(2, 10, 16)).astype(np.float32))
    st = Tensor(rng.normal(size=(2, 10, 27)).astype(np.float32))
    nb = rng.integers(0, 10, (2, 10, 3))
    shuffled = np.stack([row[:, rng.permutation(3)] for row in nb.reshape(-1, 1, 3)]).reshape(nb.shape)
    with T.no_grad():
        a = model.mesh_conv(0, sp, st, nb)
        b = model.mesh_conv(0, sp, st, shuffled)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


@pytest.mark.parametrize("mode", ["max", "average"])
def test_self_loop_aggregation_is_own_pathway(rng, mode):
    model = MeshNet(small_config(aggregation_mode=mode), seed=4)
    st = Tensor(rng.normal(size=(1, 6, 27)).astype(np.float32))
    sp = Tensor(rng.normal(size=(1, 6, 16)).astype(np.float32))
    self_nb = np.broadcast_to(np.arange(6)[None, :, None], (1, 6, 3)).copy()
    with T.no_grad():
        _, out = model.mesh_conv(0, sp, st, self_nb)
        expected = model.blocks[0]["aggregation"](st, False)
    np.testing.assert_allclose(out.data, expected.data, rtol=1e-6, atol=1e-6)


def test_average_of_identical_neighbors(rng):
    model = MeshNet(small_config(aggregation_mode="average"), seed=4)
    row = rng.normal(size=27).astype(np.float32)
    st = Tensor(np.tile(row, (1, 5, 1)))
    sp = Tensor(np.zeros((1, 5, 16), np.float32))
    nb = rng.integers(0, 5, (1, 5, 3))
    with T.no_grad():
        _, out = model.mesh_conv(0, sp, st, nb)
        expected = model.blocks[0]["aggregation"](Tensor(row[None, None]), False)
    np.testing.assert_allclose(out.data, np.broadcast_to(expected.data, out.shape), rtol=1e-6, atol=1e-6)


# ------------------------------------------------------------------ layer examples

def test_zero_spatial_weights_give_zero_output(rng):
    model = MeshNet(small_config(), seed=0)
    for k, p in model.params.items():
        if k.startswith("spatial.") and not k.endswith("bn.weight"):
            p.data[...] = 0
    out = model.spatial_descriptor(rng.normal(size=(1, 7, 3)).astype(np.float32)).data
    assert not out.any()


def test_spatial_descriptor_is_per_face(rng):
    model = MeshNet(small_config(), seed=0)
    c = rng.normal(size=(1, 9, 3)).astype(np.float32)
    perm = rng.permutation(9)
    with T.no_grad():
        a = model.spatial_descriptor(c).data
        b = model.spatial_descriptor(c[:, perm]).data
    assert np.array_equal(a[:, perm], b)


def test_frc_with_zero_f_is_constant(rng):
    model = MeshNet(small_config(), seed=0)
    for k, p in model.params.items():
        if k.startswith("frc.f."):
            p.data[...] = 0
    with T.no_grad():
        out = model.face_rotate_conv(rng.normal(size=(1, 6, 9)).astype(np.float32)).data
    assert np.array_equal(out, np.broadcast_to(out[:, :1], out.shape))


def test_single_face_global_feature_is_its_fused_feature(trained):
    model, recs = trained
    fs = recs[0].face_set
    batch = stack([fs])
    one = batch._replace(centers=batch.centers[:, :1], corners=batch.corners[:, :1],
                         normals=batch.normals[:, :1], neighbors=np.zeros((1, 1, 3), int))
    with T.no_grad():
        g = model.forward(one)[1].data
        spatial = model.spatial_descriptor(one.centers)
        structural = model.structural_descriptor(one, False, spatial)
        outs = []
        for k in range(len(model.blocks)):
            spatial, structural = model.mesh_conv(k, spatial, structural, one.neighbors)
            outs.append(spatial)
        fused = model.fusion(T.concat(outs, axis=-1), False).data
    assert np.array_equal(g, fused[:, 0])


def test_classifier_eval_and_seeded_training(trained, rng):
    model, _ = trained
    g = Tensor(rng.normal(size=(3, model.config.fusion_width)).astype(np.float32))
    with T.no_grad():
        assert np.array_equal(model.classifier(g).data, model.classifier(g).data)
        a = model.classifier(g, True, np.random.default_rng(9)).data
        b = model.classifier(g, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_zero_feature_and_zero_last_layer_give_uniform_logits():
    model = MeshNet(small_config(num_classes=5), seed=0)
    n = len(model.config.classifier_widths) - 1
    model.params[f"classifier.{n}.weight"].data[...] = 0
    with T.no_grad():
        logits = model.classifier(Tensor(np.zeros((2, model.config.fusion_width), np.float32))).data
    assert np.array_equal(logits, np.zeros_like(logits))


def test_full_config_shapes():
    model = MeshNet(ModelConfig(), seed=0)
    fs = build_face_set(normalize(decimate(icosphere(3), 1024)))
    batch = stack([fill_to_budget(fs, 1024, np.random.default_rng(0))])
    with T.no_grad():
        logits, g = model.forward(batch)
    assert logits.shape == (1, 40) and g.shape == (1, 1024)


def test_default_structural_width_is_131():
    cfg = ModelConfig()
    assert cfg.structural_channels() == 64 + 64 + 3 == 131
    assert cfg.mesh_conv[0] == (64, 131, 256, 256)


# ------------------------------------------------------------------ configs

@pytest.mark.parametrize("name", sorted(ablation_configs()))
def test_ablation_rows_run(name, rng):
    base = small_config()
    cfg = ablation_configs(base)[name]
    model = MeshNet(cfg, seed=0)
    fs = build_face_set(normalize(cube()))
    with T.no_grad():
        logits, g = model.forward(stack([fs, fs]))
    assert logits.shape == (2, 2) and g.shape == (2, cfg.fusion_width)
    assert param_count(cfg) == model.num_params()


@pytest.mark.parametrize("mode", ["average", "max", "concat"])
def test_aggregation_rows_run(mode):
    cfg = aggregation_configs(small_config())[mode]
    model = MeshNet(cfg, seed=0)
    with T.no_grad():
        logits, _ = model.forward(stack([build_face_set(normalize(cube()))]))
    assert logits.shape == (1, 2)
    assert param_count(cfg) == model.num_params()


def test_descriptor_ablation_widths():
    rows = ablation_configs()
    assert rows["no-fkc"].structural_channels() == 67
    assert rows["no-frc"].structural_channels() == 67
    assert rows["no-spatial"].mesh_conv[0][0] == 0


def test_config_json_round_trip():
    for cfg in list(ablation_configs().values()) + list(aggregation_configs().values()):
        assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_rejects_unknown_keys_and_bad_blocks():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"widht": 3})
    with pytest.raises(ConfigError):
        ModelConfig(mesh_conv=((64, 130, 256, 256),)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(aggregation_mode="sum").validate()


# ------------------------------------------------------------------ parameter counts

def test_spatial_descriptor_count_by_hand():
    expected = (3 * 64 + 64) + (64 * 64 + 64) + 2 * (64 + 64)
    assert param_breakdown(ModelConfig())["spatial_descriptor"] == expected == 4672


def test_fkc_angle_count():
    assert param_breakdown(ModelConfig())["face_kernel_correlation"] == 64 * 4 * 2 == 512


def test_no_fkc_total_is_full_minus_fkc_terms():
    full, no_fkc = ModelConfig(), ablation_configs()["no-fkc"]
    # First block input shrinks from 131 to 67 structural channels.
    d = 131 - 67
    combination = d * 256
    pair = (2 * 131 * 131 + 131 + 2 * 131) - (2 * 67 * 67 + 67 + 2 * 67)
    aggregation = d * 256
    assert param_count(full) - param_count(no_fkc) == 512 + combination + pair + aggregation


def test_param_count_matches_built_model():
    cfg = ModelConfig()
    assert param_count(cfg) == MeshNet(cfg).num_params() == 2_118_403
    assert 2e6 <= param_count(cfg) <= 6e6


def test_mac_estimate_covers_every_part():
    cfg = ModelConfig()
    assert set(mac_estimate(cfg)) == set(param_breakdown(cfg))
    assert mac_estimate(cfg, 512)["fusion"] * 2 == mac_estimate(cfg, 1024)["fusion"]


def test_forward_and_gradients_stay_float32():
    model = MeshNet(small_config(), seed=0)
    batch = stack([build_face_set(normalize(cube()))] * 2)
    logits, g = model.forward(batch, training=True)
    assert logits.dtype == np.float32 and g.dtype == np.float32
    T.softmax_cross_entropy(logits, np.array([0, 1])).backward()
    assert {p.grad.dtype for p in model.params.values() if p.grad is not None} == {np.dtype(np.float32)}
