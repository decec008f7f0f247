"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import io
import math
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from meshnet import cli
from meshnet import tensor as T
from meshnet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from meshnet.evaluation import evaluate, retrieval_map
from meshnet.geometry import TriMesh
from meshnet.gradcheck import OPS, REL_TOL, run_all
from meshnet.mesh_io import CacheFormatError, DatasetRecord, read_cache, write_cache
from meshnet.model import MeshNet, ModelConfig, ablation_configs, aggregation_configs, face_kernel_correlation
from meshnet.preprocess import build_face_set, face_adjacency, fill_to_budget, normalize, prepare, stack
from meshnet.shapes import cube, icosphere, tetrahedron, transformed, two_class_dataset
from meshnet.tensor import Tensor
from meshnet.train import TrainConfig, train

from test_evaluation import oracle_map
from test_model import naive_fkc, permute_batch, random_unit
from test_preprocess import brute_force_adjacency, random_faces


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line (outside capture) and assert the outcome."""

    def emit(name: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def _dataset(rng, faces):
    recs = []
    for mesh, label in two_class_dataset(rng, per_class=4):
        fs = prepare(mesh, faces)
        recs.append(DatasetRecord(fill_to_budget(fs, faces, rng), label, fs.F))
    return recs


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_all(seed=0)
    seconds = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    covered = {r.op for r in results} == set(OPS)
    ok = all(r.passed for r in results) and covered and seconds < 60
    verdict("gradient suite", ok,
            f"{len(results)} ops, max rel error {worst:.2e} (< {REL_TOL:g}), {seconds:.1f}s (< 60s)")


def test_fkc_oracle(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        f, m, v = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        normals = random_unit(rng, (1, f)).astype(np.float32)
        neighbors = rng.integers(0, f, (1, f, 3))
        kernels = random_unit(rng, (m, v)).astype(np.float32)
        got = face_kernel_correlation(normals, neighbors, Tensor(kernels), 0.2).data
        ref = naive_fkc(normals.astype(np.float64), neighbors, kernels.astype(np.float64), 0.2)
        worst = max(worst, float(np.abs(got - ref).max()))
    with T.precision(np.float64):
        hand = face_kernel_correlation(np.array([[[0.0, 0.0, 1.0]]]), np.zeros((1, 1, 3), int),
                                       Tensor(np.array([[[1.0, 0.0, 0.0]]])), 0.2).data[0, 0, 0]
    rel = abs(hand - math.exp(-25)) / math.exp(-25)
    verdict("FKC oracle", worst <= 1e-6 and rel <= 1e-12,
            f"100 instances max abs diff {worst:.1e} (<= 1e-6); exp(-25) case rel error {rel:.1e} (<= 1e-12)")


def test_exact_invariances(verdict):
    rng = np.random.default_rng(1)
    model = MeshNet(ModelConfig(classifier_widths=(512, 256, 2)), seed=0)
    recs = _dataset(np.random.default_rng(2), 128)
    train(recs, TrainConfig(epochs=1, batch_size=4), model)  # non-trivial BN statistics
    batch = stack([r.face_set for r in recs[:2]])
    with T.no_grad():
        logits, g = model.forward(batch)
        perm = rng.permutation(batch.shape[1])
        logits_p, _ = model.forward(permute_batch(batch, perm))
        permutation = np.array_equal(logits.data, logits_p.data)

        rolled = np.roll(batch.corners.reshape(2, -1, 3, 3), -1, axis=2).reshape(batch.corners.shape)
        cyclic = np.array_equal(model.face_rotate_conv(batch.corners).data, model.face_rotate_conv(rolled).data)

        mesh = normalize(transformed(icosphere(2), (1.0, 1.4, 0.8)))
        b1 = stack([build_face_set(mesh)])
        b2 = stack([build_face_set(transformed(mesh, offset=(0.4, -0.3, 0.2)))])
        shift = max(
            float(np.abs(model.face_rotate_conv(b1.corners).data - model.face_rotate_conv(b2.corners).data).max()),
            float(np.abs(model.face_kernel_correlation(b1.normals, b1.neighbors).data
                         - model.face_kernel_correlation(b2.normals, b2.neighbors).data).max()),
        )

        one = stack([recs[0].face_set])
        idx = np.concatenate([np.arange(one.shape[1]), rng.integers(0, one.shape[1], 9)])
        dup = one._replace(centers=one.centers[:, idx], corners=one.corners[:, idx],
                           normals=one.normals[:, idx], neighbors=one.neighbors[:, idx])
        duplicate = np.array_equal(model.forward(one)[1].data, model.forward(dup)[1].data)
    ok = permutation and cyclic and shift <= 1e-6 and duplicate
    verdict("exact invariances", ok,
            f"permutation={permutation} cyclic-corner={cyclic} translation max diff {shift:.1e} (<= 1e-6) "
            f"duplicate-face={duplicate}")


def test_adjacency_oracle(verdict):
    rng = np.random.default_rng(3)
    random_ok = all(
        np.array_equal(face_adjacency(f), brute_force_adjacency(f))
        for f in (random_faces(rng, 200) for _ in range(50))
    )
    closed_ok = True
    for mesh in (tetrahedron(), cube()):
        nb = build_face_set(mesh).neighbors
        closed_ok &= np.array_equal(nb, brute_force_adjacency(mesh.faces))
        closed_ok &= all(len(set(r)) == 3 and i not in r for i, r in enumerate(nb.tolist()))
    tri = TriMesh(np.eye(3), np.array([[0, 1, 2]]))
    isolated = build_face_set(tri).neighbors.tolist() == [[0, 0, 0]]
    verdict("adjacency oracle", random_ok and closed_ok and isolated,
            f"50 random meshes={random_ok} tetra/cube={closed_ok} isolated self-fill={isolated}")


def test_overfit_harness(verdict):
    recs = _dataset(np.random.default_rng(0), 128)
    model = MeshNet(ModelConfig(classifier_widths=(512, 256, 2)), seed=0)
    final = {}

    def stop(epoch, row):
        rep = evaluate(recs, model)
        final.update(epoch=epoch, acc=rep.overall_accuracy, loss=rep.loss)
        return rep.overall_accuracy == 1.0 and rep.loss < 0.01

    t0 = time.perf_counter()
    hist = train(recs, TrainConfig(epochs=200, seed=0), model, on_epoch=stop)
    seconds = time.perf_counter() - t0
    losses = [r["loss"] for r in hist]
    windows = [np.mean(losses[i:i + 10]) for i in range(0, len(losses), 10)]
    settling = all(b <= a for a, b in zip(windows, windows[1:]))
    ok = final["acc"] == 1.0 and final["loss"] < 0.01 and seconds < 300
    verdict("overfit harness", ok,
            f"epoch {final['epoch']}: train accuracy {final['acc']:.3f}, loss {final['loss']:.4f} (< 0.01), "
            f"{seconds:.0f}s (< 300s); 10-epoch training-loss means non-increasing={settling}")
    assert settling


def test_retrieval_oracle(verdict):
    rng = np.random.default_rng(4)
    exact = 0
    for trial in range(100):
        emb = rng.normal(size=(64, 6)) if trial % 2 else rng.integers(-2, 3, (64, 3)).astype(float)
        labels = rng.integers(0, 4, 64)
        exact += retrieval_map(emb, labels) == oracle_map(emb, labels)
    hand = retrieval_map(np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0]]), np.array([0, 0, 1]))
    verdict("retrieval oracle", exact == 100 and hand == 1.0,
            f"{exact}/100 sets equal the brute-force mAP exactly; 3-point example mAP={hand}")


def test_config_coverage(verdict):
    configs = {**{f"ablation:{k}": v for k, v in ablation_configs().items()},
               **{f"aggregation:{k}": v for k, v in aggregation_configs().items()}}
    fs = fill_to_budget(prepare(icosphere(2), 64), 64, np.random.default_rng(0))
    ran = []
    for name, cfg in configs.items():
        with T.no_grad():
            logits, g = MeshNet(cfg, seed=0).forward(stack([fs, fs]))
        if logits.shape == (2, 40) and g.shape == (2, 1024) and np.isfinite(logits.data).all():
            ran.append(name)
    verdict("config coverage", len(ran) == 9, f"{len(ran)}/9 configurations ran a forward pass: {', '.join(ran)}")


def test_structural_channels(verdict):
    cfg = ModelConfig()
    model = MeshNet(cfg, seed=0)
    batch = stack([build_face_set(normalize(icosphere(1)))])
    with T.no_grad():
        structural = model.structural_descriptor(batch, False, model.spatial_descriptor(batch.centers))
    w = model.params["mesh_conv.0.combination.0.weight"].shape
    ok = cfg.mesh_conv[0] == (64, 131, 256, 256) and structural.shape[-1] == 131 and w == (64 + 131, 256)
    verdict("structural channels", ok,
            f"first block {cfg.mesh_conv[0]}, structural tensor width {structural.shape[-1]}, "
            f"combination weight {w}")


def test_parameter_report(verdict):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["params"])
    out = buf.getvalue()
    total_line = next(line for line in out.splitlines() if line.startswith("total"))
    total = int(total_line.split()[1].replace(",", ""))
    delta_line = next(line for line in out.splitlines() if "delta" in line)
    notes = "4 vectors per kernel" in out and "768 -> 1024" in out
    ok = code == 0 and 2e6 <= total <= 6e6 and notes
    verdict("parameter report", ok, f"total {total:,} in [2M, 6M]; {delta_line.strip()}; notes present={notes}")


def test_format_round_trips(verdict, tmp_path):
    recs = _dataset(np.random.default_rng(5), 64)
    write_cache(recs, tmp_path / "a.mnet")
    back, _ = read_cache(tmp_path / "a.mnet")
    cache_ok = back == recs and all(
        a.face_set.corners.tobytes() == b.face_set.corners.tobytes() for a, b in zip(back, recs))

    model = MeshNet(ModelConfig(classifier_widths=(512, 256, 2)), seed=0)
    train(recs, TrainConfig(epochs=1, batch_size=8), model)
    save_checkpoint(tmp_path / "m.mnck", model)
    loaded, _, _ = load_checkpoint(tmp_path / "m.mnck")
    ckpt_ok = all(np.asarray(v).tobytes() == loaded.state_arrays()[k].tobytes()
                  for k, v in model.state_arrays().items())

    rejected = 0
    for path, reader, err in ((tmp_path / "a.mnet", read_cache, CacheFormatError),
                              (tmp_path / "m.mnck", load_checkpoint, CheckpointError)):
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 3] ^= 0x10
        path.write_bytes(bytes(blob))
        try:
            reader(path)
        except err as e:
            rejected += "checksum" in str(e)
    verdict("format round-trips", cache_ok and ckpt_ok and rejected == 2,
            f"cache bit-exact={cache_ok} checkpoint bit-exact={ckpt_ok} corrupted files rejected by checksum={rejected}/2")
