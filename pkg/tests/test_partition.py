import math

import numpy as np
import pytest

from mugnet.errors import ContractError, ParameterError, ParseError
from mugnet.partition import (
    GreedyPartitioner,
    build_graph,
    compression_ratio,
    connected_components_partition,
    load_graph,
    majority_labels,
    partition,
    purity,
    save_graph,
)
from mugnet.pointcloud import GeometricFeatures, PointCloud, geometric_features
from mugnet.synth import default_room, synth_scene


@pytest.fixture(scope="module")
def small_room():
    cloud = synth_scene(default_room(8000), seed=3)
    return cloud, geometric_features(cloud)


def two_planes(seed=0, n=400):
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.random((n, 2)) * 2, np.zeros(n)])
    b = np.column_stack([rng.random((n, 2)) * 2, np.full(n, 5.0)])
    pos = np.vstack([a, b]) + rng.normal(scale=1e-3, size=(2 * n, 3))
    cloud = PointCloud(pos, labels=np.repeat([0, 1], n))
    return cloud, geometric_features(cloud)


def set_partition(graph):
    return {frozenset(m.tolist()) for m in graph.members}


@pytest.mark.parametrize("lam", [1.0, math.inf])
def test_two_parallel_planes_match_components(lam):
    cloud, feats = two_planes()
    graph = partition(cloud, feats, knn=8, lam=lam)
    oracle = connected_components_partition(cloud, feats, knn=8)
    assert oracle.num_nodes == 2
    assert set_partition(graph) == set_partition(oracle)
    assert purity(graph, cloud).mean_purity == 1.0


def test_default_lambda_never_crosses_components():
    cloud, feats = two_planes(seed=1)
    graph = partition(cloud, feats, knn=8)
    assert graph.num_nodes >= 2
    assert purity(graph, cloud).mean_purity == 1.0
    side = np.array([cloud.labels[m[0]] for m in graph.members])
    assert np.all(side[graph.edges[:, 0]] == side[graph.edges[:, 1]])


def test_lambda_zero_gives_singletons(small_room):
    cloud, feats = small_room
    graph = partition(cloud, feats, lam=0.0)
    assert graph.num_nodes == len(cloud)
    assert compression_ratio(graph) == 1.0


def test_lambda_infinite_gives_one_cluster():
    cloud, feats = two_planes()
    # join the planes with a column of points so the k-NN graph is connected
    z = np.linspace(0, 5, 200)
    col = np.column_stack([np.full(200, 1.0), np.full(200, 1.0), z])
    joined = PointCloud(np.vstack([cloud.positions, col]))
    f = geometric_features(joined)
    assert connected_components_partition(joined, f).num_nodes == 1
    assert partition(joined, f, lam=math.inf).num_nodes == 1


def test_partition_invariants(small_room):
    cloud, feats = small_room
    graph = partition(cloud, feats)
    graph.validate()
    assert np.array_equal(np.sort(np.concatenate(graph.members)), np.arange(len(cloud)))
    a = graph.adjacency_matrix()
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 0)
    for c, m in enumerate(graph.members):
        assert np.allclose(graph.centroids[c], cloud.positions[m].mean(axis=0))
        assert graph.sizes[c] == len(m)
    assert np.array_equal(graph.point_cluster[graph.members[5]], np.full(graph.sizes[5], 5))


def test_edge_features(small_room):
    cloud, feats = small_room
    graph = partition(cloud, feats)
    i, j = graph.edges[0]
    e = graph.edge_features[0]
    assert np.allclose(e[:3], graph.centroids[j] - graph.centroids[i])
    assert np.isclose(e[3], np.log(graph.sizes[j] / graph.sizes[i]))
    assert e[4] >= 1 and float(e[4]).is_integer()
    # reverse edge carries the mirrored geometry and the same boundary count
    k = np.flatnonzero((graph.edges[:, 0] == j) & (graph.edges[:, 1] == i))[0]
    assert np.allclose(graph.edge_features[k, :4], -e[:4]) and graph.edge_features[k, 4] == e[4]


def test_deterministic(small_room):
    cloud, feats = small_room
    a, b = partition(cloud, feats), partition(cloud, feats)
    assert all(np.array_equal(x, y) for x, y in zip(a.members, b.members))
    assert np.array_equal(a.edges, b.edges)


def test_cluster_count_monotone_in_lambda(small_room):
    cloud, feats = small_room
    counts = [partition(cloud, feats, lam=lam).num_nodes for lam in (0, 0.02, 0.05, 0.1, 0.2, 0.5, 1, 5)]
    assert all(b <= a for a, b in zip(counts, counts[1:])), counts


def test_partition_errors(small_room):
    cloud, feats = small_room
    with pytest.raises(ParameterError):
        partition(cloud, feats, knn=2)
    with pytest.raises(ParameterError):
        partition(cloud, feats, lam=-1)
    tiny = PointCloud(np.random.default_rng(0).random((5, 3)))
    with pytest.raises(ParameterError):
        partition(tiny, geometric_features(tiny, 3), knn=8)


def test_partitioner_interface(small_room):
    cloud, feats = small_room
    g = GreedyPartitioner(lam=0.2)(cloud, feats)
    assert g.num_nodes == partition(cloud, feats, lam=0.2).num_nodes


def test_purity_definitions():
    cloud = PointCloud(np.random.default_rng(0).random((6, 3)), labels=[0, 0, 1, 1, 2, 2])
    feats = GeometricFeatures.from_array(np.zeros((6, 5)))
    pairs = np.array([[0, 1], [1, 2], [3, 4]])
    mixed = build_graph(cloud, feats, np.array([0, 0, 0, 0, 1, 1]), pairs)
    q = purity(mixed, cloud)
    assert q.purities.tolist() == [0.5, 1.0]
    assert q.mean_purity == pytest.approx((0.5 * 4 + 2) / 6)
    pure = build_graph(cloud, feats, np.array([0, 0, 1, 1, 2, 2]), pairs)
    assert purity(pure, cloud).mean_purity == 1.0
    assert majority_labels(mixed, cloud.labels).tolist() == [0, 2]
    with pytest.raises(ContractError):
        purity(pure, PointCloud(cloud.positions))


def test_single_cluster_compression():
    cloud = PointCloud(np.random.default_rng(1).random((50, 3)))
    feats = GeometricFeatures.from_array(np.zeros((50, 5)))
    g = build_graph(cloud, feats, np.zeros(50, dtype=int), np.zeros((0, 2), dtype=int))
    assert compression_ratio(g) == 50.0 and g.num_edges == 0


def test_permuted_graph_relabels_nodes(small_room):
    cloud, feats = small_room
    g = partition(cloud, feats)
    perm = np.random.default_rng(0).permutation(g.num_nodes)
    p = g.permuted(perm)
    p.validate()
    assert np.array_equal(p.centroids, g.centroids[perm])
    inv = np.argsort(perm)
    assert np.array_equal(p.adjacency_matrix(), g.adjacency_matrix()[np.ix_(perm, perm)])
    assert np.array_equal(p.point_cluster, inv[g.point_cluster])


def test_graph_file_round_trip(tmp_path, small_room):
    cloud, feats = small_room
    g = partition(cloud, feats)
    path = tmp_path / "g.json"
    save_graph(path, g, cloud, feats)
    g2, cloud2, feats2 = load_graph(path)
    assert all(np.array_equal(a, b) for a, b in zip(g.members, g2.members))
    for name in ("centroids", "sizes", "mean_features", "edges", "edge_features"):
        assert np.array_equal(getattr(g, name), getattr(g2, name))
    assert np.array_equal(cloud.positions, cloud2.positions)
    assert np.array_equal(cloud.labels, cloud2.labels)
    assert np.array_equal(feats.as_array(), feats2.as_array())
    save_graph(tmp_path / "g2.json", g2, cloud2, feats2)
    assert path.read_bytes() == (tmp_path / "g2.json").read_bytes()


def test_graph_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_graph(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(ParseError):
        load_graph(bad)
    bad.write_text("not json")
    with pytest.raises(ParseError):
        load_graph(bad)
