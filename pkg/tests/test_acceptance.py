"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (collected again in the terminal summary)
before asserting.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from _util import (
    brute_force_iou,
    finite_difference,
    permuted_scene,
    random_cloud_graph,
    rel_error,
    report,
    tiny_config,
)
from mugnet.bench import bench_batched, run_batch
from mugnet.embedding import ClusterEmbedder, EmbeddingConfig, embed_graph, point_inputs
from mugnet.model import ModelConfig, MuGNet, prepare_scene
from mugnet.partition import build_graph, compression_ratio, partition, purity
from mugnet.pointcloud import GeometricFeatures, PointCloud, geometric_features
from mugnet.synth import default_room, synth_scene
from mugnet.tensor import Tensor, backward, no_grad
from mugnet.training import (
    TrainConfig,
    cluster_accuracy,
    evaluate,
    evaluate_scenes,
    format_ablation,
    loss,
    run_ablation,
    ablation_grid,
    train,
)


def room_scene(seed, points=50_000, cfg=None):
    cfg = cfg or TrainConfig().model_config()
    cloud = synth_scene(default_room(points), seed=seed)
    feats = geometric_features(cloud)
    graph = partition(cloud, feats)
    return prepare_scene(graph, cloud, feats, cfg, f"room{seed}")


@pytest.fixture(scope="module")
def overfit():
    scene = room_scene(0)
    t0 = time.perf_counter()
    result = train([scene], TrainConfig())
    return scene, result, time.perf_counter() - t0


# -- 1 -----------------------------------------------------------------------


def test_c01_full_model_gradient_check():
    cfg = tiny_config(seed=0)
    graph, cloud, feats = random_cloud_graph(20, seed=0, n_classes=cfg.n_classes)
    scene = prepare_scene(graph, cloud, feats, cfg)
    model = MuGNet(cfg)
    # move 1-D parameters off their symmetric init so no relu sits on its kink
    rng = np.random.default_rng(0)
    for p in model.parameters():
        if p.ndim == 1:
            p.data = p.data + rng.uniform(-0.2, 0.2, p.shape)
    params = model.parameters()

    def objective():
        return loss(model(scene, "train"), scene.cluster_labels, graph.sizes)

    t0 = time.perf_counter()
    model.zero_grad()
    backward(objective())
    analytic = [p.grad.copy() for p in params]
    with no_grad():
        numeric = finite_difference(lambda: float(objective().data), params, step=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(rel_error(a, n).max() for a, n in zip(analytic, numeric))
    count = sum(p.data.size for p in params)
    ok = worst < 1e-4 and elapsed < 60
    report(
        "C1 gradient check",
        ok,
        f"{count} parameters, {graph.num_nodes} nodes, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)",
    )
    assert ok


# -- 2 -----------------------------------------------------------------------


def test_c02a_cluster_point_permutation():
    cfg = EmbeddingConfig()
    embedder = ClusterEmbedder(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for p in embedder.parameters():
        if p.ndim == 1:
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    graph, cloud, feats = random_cloud_graph(12, seed=2, max_points=120, min_points=1)
    pairs = graph.edges[graph.edges[:, 0] < graph.edges[:, 1]]
    pairs = np.array([[graph.members[i][0], graph.members[j][0]] for i, j in pairs])
    base = embed_graph(graph, point_inputs(graph, cloud, feats), cfg, embedder).data
    worst = 0.0
    for _ in range(100):
        perm = rng.permutation(len(cloud))
        inv = np.argsort(perm)
        pc = PointCloud(cloud.positions[perm], labels=cloud.labels[perm])
        pf = GeometricFeatures.from_array(feats.as_array()[perm])
        g = build_graph(pc, pf, graph.point_cluster[perm], inv[pairs])
        out = embed_graph(g, point_inputs(g, pc, pf), cfg, embedder).data
        # clusters are renumbered by smallest member, so map old ids to new rows
        rows = g.point_cluster[inv[[m[0] for m in graph.members]]]
        out = out[rows]
        worst = max(worst, float(np.abs(out - base).max()))
    ok = worst <= 1e-9
    report("C2a point permutation", ok, f"100 trials, max |delta| {worst:.2e} (<= 1e-9)")
    assert ok


def test_c02b_node_relabeling():
    cfg = ModelConfig(seed=3)
    model = MuGNet(cfg)
    graph, cloud, feats = random_cloud_graph(20, seed=4, max_points=80)
    scene = prepare_scene(graph, cloud, feats, cfg)
    base = model.infer(scene)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        perm = rng.permutation(graph.num_nodes)
        worst = max(worst, float(np.abs(model.infer(permuted_scene(scene, perm)) - base[perm]).max()))
    ok = worst <= 1e-9
    report("C2b node relabeling", ok, f"100 trials, max |delta| {worst:.2e} (<= 1e-9)")
    assert ok


# -- 3 -----------------------------------------------------------------------


def test_c03_overfit_single_room(overfit):
    scene, result, elapsed = overfit
    acc = cluster_accuracy(result.model, scene)
    oa = evaluate_scenes(result.model, [scene], 3).oa
    ok = acc >= 0.95 and oa >= 0.90 and elapsed < 300
    report(
        "C3 overfit",
        ok,
        f"{scene.num_nodes} clusters, cluster acc {acc:.4f} (>= 0.95), point OA {oa:.4f} (>= 0.90),"
        f" {elapsed:.0f}s (< 300s)",
    )
    assert ok


# -- 4 -----------------------------------------------------------------------


def test_c04_held_out_rooms():
    cfg = TrainConfig(epochs=60)
    scenes = [room_scene(s) for s in range(10)]
    result = train(scenes[:8], cfg)
    m = evaluate_scenes(result.model, scenes[8:], 3)
    ok = m.miou >= 0.6
    report("C4 held-out rooms", ok, f"train seeds 0-7, test 8-9, {cfg.epochs} epochs, mIoU {m.miou:.4f} (>= 0.6)")
    assert ok


# -- 5 -----------------------------------------------------------------------


def test_c05_partition_quality():
    cloud = synth_scene(default_room(100_000), seed=0)
    graph = partition(cloud, geometric_features(cloud))
    ratio = compression_ratio(graph)
    pur = purity(graph, cloud).mean_purity
    ok = ratio >= 100 and pur >= 0.9
    report("C5 partition", ok, f"{graph.num_nodes} clusters, compression {ratio:.1f} (>= 100), purity {pur:.4f} (>= 0.9)")
    assert ok


# -- 6 -----------------------------------------------------------------------


def test_c06_evaluate_matches_oracle():
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        c = int(rng.integers(1, 6))
        n = int(rng.integers(1, 10_001))
        pred, truth = rng.integers(0, c, n), rng.integers(0, c, n)
        m = evaluate(pred, truth, c)
        oa, ious, miou = brute_force_iou(pred, truth, c)
        same = m.oa == oa and m.miou == miou and set(np.flatnonzero(m.included)) == set(ious)
        same = same and all(m.iou[k] == v for k, v in ious.items())
        mismatches += not same
    ok = mismatches == 0
    report("C6 metric oracle", ok, f"1000 instances, {mismatches} mismatches (exact equality)")
    assert ok


# -- 7 -----------------------------------------------------------------------


def test_c07_zero_fusion_weights_are_finite():
    cfg = ModelConfig(seed=7)
    model = MuGNet(cfg)
    for name, p in model.named_parameters():
        if name.endswith(".weights"):
            p.data = np.zeros_like(p.data)
    graph, cloud, feats = random_cloud_graph(20, seed=7, max_points=60)
    scene = prepare_scene(graph, cloud, feats, cfg)
    logits = model(scene, "train")
    backward(loss(logits, scene.cluster_labels, graph.sizes))
    grads_ok = all(p.grad is not None and np.isfinite(p.grad).all() for p in model.parameters())
    ok = bool(np.isfinite(logits.data).all() and np.isfinite(model.infer(scene)).all() and grads_ok)
    report("C7 zero fusion weights", ok, f"forward finite and all {len(model.parameters())} gradients finite")
    assert ok


# -- 8 -----------------------------------------------------------------------


def _dense_conv(graph, layer):
    """Independent dense graph convolution built straight from the edge list."""
    n = graph.num_nodes
    adj = np.zeros((n, n))
    adj[graph.edges[:, 0], graph.edges[:, 1]] = 1.0
    deg = adj.sum(axis=1)
    e = graph.edge_features.copy()
    e[:, 4] = np.log(1.0 + e[:, 4])
    esum = np.zeros((n, e.shape[1]))
    for (i, _), row in zip(graph.edges, e):
        esum[i] += row
    safe = np.where(deg > 0, deg, 1.0)[:, None]
    a_mean, e_mean = adj / safe, esum / safe

    def apply(x):
        out = x @ layer.w_self.data + a_mean @ x @ layer.w_nbr.data + layer.bias.data
        return out + e_mean @ layer.w_edge.data

    return apply


def _fusion_setup(mode, seed):
    cfg = ModelConfig(seed=seed, fusion=mode)
    model = MuGNet(cfg)
    graph, cloud, feats = random_cloud_graph(15, seed=seed, max_points=60)
    scene = prepare_scene(graph, cloud, feats, cfg)
    with no_grad():
        taps, _ = model.backbone(model.embedder(scene.points), scene.op, "eval")
    return model.fusions[0], graph, scene.op, [t.data for t in taps]


def _fuse(fusion, op, ins):
    with no_grad():
        return [f.data for f in fusion([Tensor(x) for x in ins], op)]


def test_c08_fusion_reductions():
    # equal weights: w / (L w + eps) tends to 1 / L; at w = 1e7 the eps share is ~1e-12
    fusion, graph, op, ins = _fusion_setup("bidirectional", 8)
    for node in [m for m in fusion.mids if m is not None] + fusion.outs:
        node.weights.data = np.full(node.weights.shape, 1e7)
    got = _fuse(fusion, op, ins)
    L = len(ins)

    def node(mod, parts):
        return _dense_conv(graph, mod.conv)(sum(parts) / len(parts))

    mid = [None] * L
    mid[L - 1] = ins[L - 1]
    for i in range(L - 2, 0, -1):
        mid[i] = node(fusion.mids[i], [ins[i], mid[i + 1]])
    want = [None] * L
    want[0] = node(fusion.outs[0], [ins[0], mid[1]])
    for i in range(1, L - 1):
        want[i] = node(fusion.outs[i], [ins[i], mid[i], want[i - 1]])
    want[L - 1] = node(fusion.outs[L - 1], [ins[L - 1], want[L - 2]])
    eq_err = max(float(np.abs(g - w).max()) for g, w in zip(got, want))

    pfusion, pgraph, pop, pins = _fusion_setup("pyramid", 9)
    pgot = _fuse(pfusion, pop, pins)
    pwant = [None] * L
    pwant[L - 1] = _dense_conv(pgraph, pfusion.outs[L - 1].conv)(pins[L - 1])
    for i in range(L - 2, -1, -1):
        pwant[i] = _dense_conv(pgraph, pfusion.outs[i].conv)(pins[i] + pwant[i + 1])
    py_err = max(float(np.abs(g - w).max()) for g, w in zip(pgot, pwant))
    ok = eq_err <= 1e-9 and py_err <= 1e-9
    report("C8 fusion reductions", ok, f"equal-weight mean err {eq_err:.2e}, pyramid cascade err {py_err:.2e} (<= 1e-9)")
    assert ok


# -- 9 -----------------------------------------------------------------------


def test_c09_ablation_harness():
    base = TrainConfig(epochs=5)
    scenes = [room_scene(s, points=15_000) for s in range(4)]
    rows = run_ablation(ablation_grid(base), scenes, folds=2)
    table = format_ablation(rows)
    names = [r["name"] for r in rows]
    ok = names == [c.name for c in ablation_grid(base)] and all(0 <= r["mIoU"] <= 1 for r in rows)
    ok = ok and len(table.splitlines()) == len(rows) + 1
    report("C9 ablation harness", ok, "6 configurations trained; table follows")
    for line in table.splitlines():
        report("C9   ", ok, line)
    assert ok


# -- 10 ----------------------------------------------------------------------


def test_c10_batched_bench(overfit):
    scene, result, _ = overfit
    model = result.model
    scenes = [scene] * 8
    rep = bench_batched(scenes, [1, 2, 4, 8], model, repeats=10)
    single, batched = rep.rows[0].mean_s, rep.rows[-1].mean_s
    mems = [r.peak_mem_bytes for r in rep.rows]
    monotone = all(b >= a for a, b in zip(mems, mems[1:]))
    seq = [model.infer(s) for s in scenes]
    identical = all(np.array_equal(a, b) for a, b in zip(run_batch(model, scenes), seq))
    ok = batched < 8 * single and monotone and identical
    report(
        "C10 batched inference",
        ok,
        f"8 rooms {batched:.3f}s vs 8 x {single:.3f}s, peak MB {[round(m / 2**20, 1) for m in mems]},"
        f" bit-identical {identical}",
    )
    assert ok


# -- 11 ----------------------------------------------------------------------


def _pipeline(d):
    def run(*args):
        proc = subprocess.run([sys.executable, "-m", "mugnet", *map(str, args)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr

    run("synth", "--output", d / "room.ply", "--seed", 11, "--points", 20_000)
    run("cluster", "--input", d / "room.ply", "--output", d / "room.json")
    run("train", "--input", d / "room.json", "--output", d / "model.json", "--seed", 11, "--epochs", 10)
    run("infer", "--input", d / "room.json", "--checkpoint", d / "model.json", "--output", d / "pred.xyz")
    run("eval", "--input", d / "pred.xyz", "--truth", d / "room.json", "--output", d / "metrics.json")
    return [(d / name).read_bytes() for name in ("model.json", "model.history.json", "metrics.json")]


def test_c11_reproducible_pipeline(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same = [x == y for x, y in zip(a, b)]
    ok = all(same)
    report("C11 reproducibility", ok, f"checkpoint / history / metrics byte-identical: {same}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
