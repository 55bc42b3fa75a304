"""Superpoint partition of a point cloud and the cluster adjacency graph."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError, ParseError
from .pointcloud import GeometricFeatures, PointCloud, knn, require_labels
from .serialization import decode_array, dump_json, encode_array, load_json

GRAPH_FORMAT = "mugnet-superpoint-graph"
GRAPH_VERSION = 1

DEFAULT_KNN = 10
DEFAULT_LAMBDA = 0.2
DEFAULT_MIN_SIZE = 20
# columns of the point feature matrix used for similarity: linearity..verticality
PARTITION_FEATURES = (0, 1, 2, 3)
EDGE_FEATURE_NAMES = ("dx", "dy", "dz", "log_size_ratio", "boundary_pairs")


@dataclass
class SuperpointGraph:
    members: list
    centroids: np.ndarray
    sizes: np.ndarray
    mean_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray
    num_points: int
    _point_cluster: np.ndarray | None = field(default=None, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return len(self.members)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def point_cluster(self) -> np.ndarray:
        """Cluster id of every point."""
        if self._point_cluster is None:
            out = np.full(self.num_points, -1, dtype=np.int64)
            for c, idx in enumerate(self.members):
                out[idx] = c
            self._point_cluster = out
        return self._point_cluster

    def neighbors(self, i: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == i, 1]

    def adjacency_matrix(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int64)
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1
        return a

    def permuted(self, perm) -> "SuperpointGraph":
        """Relabel nodes so that old node ``perm[k]`` becomes node ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        edges = inv[self.edges] if self.num_edges else self.edges.copy()
        return SuperpointGraph(
            members=[self.members[p] for p in perm],
            centroids=self.centroids[perm],
            sizes=self.sizes[perm],
            mean_features=self.mean_features[perm],
            edges=edges,
            edge_features=self.edge_features.copy(),
            num_points=self.num_points,
        )

    def validate(self):
        """Check the partition, edge range, self-loop and symmetry invariants."""
        allidx = np.sort(np.concatenate(self.members)) if self.members else np.array([])
        if not np.array_equal(allidx, np.arange(self.num_points)):
            raise ContractError("clusters do not partition the point indices")
        if any(len(m) == 0 for m in self.members):
            raise ContractError("empty cluster")
        if self.num_edges:
            if self.edges.min() < 0 or self.edges.max() >= self.num_nodes:
                raise ContractError("edge endpoint out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ContractError("self edge stored")
        a = self.adjacency_matrix()
        if not np.array_equal(a, a.T):
            raise ContractError("edge set is not symmetric")


@dataclass
class PartitionQuality:
    cluster_count: int
    mean_cluster_size: float
    purities: np.ndarray
    mean_purity: float
    majority_labels: np.ndarray


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def _knn_pairs(positions, k):
    """Unique undirected k-NN pairs (i < j), sorted."""
    idx, _ = knn(positions, k, include_self=False)
    n = len(positions)
    rows = np.repeat(np.arange(n), k)
    cols = idx.reshape(-1)
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return pairs[pairs[:, 0] != pairs[:, 1]]


def build_graph(
    cloud: PointCloud,
    features: GeometricFeatures,
    assignment: np.ndarray,
    pairs: np.ndarray,
) -> SuperpointGraph:
    """Assemble a SuperpointGraph from a point->cluster map and point adjacency.

    Clusters are numbered by their smallest member index.  Two clusters are
    adjacent when at least one point pair of ``pairs`` straddles them.
    """
    assignment = np.asarray(assignment)
    n = len(cloud)
    _, first, inverse = np.unique(assignment, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    cid = rank[inverse.reshape(-1)]
    k = len(order)

    sort_idx = np.argsort(cid, kind="stable")
    sizes = np.bincount(cid, minlength=k)
    members = np.split(sort_idx, np.cumsum(sizes)[:-1])
    feats = features.as_array()
    centroids = np.zeros((k, 3))
    np.add.at(centroids, cid, cloud.positions)
    centroids /= sizes[:, None]
    mean_feats = np.zeros((k, feats.shape[1]))
    np.add.at(mean_feats, cid, feats)
    mean_feats /= sizes[:, None]

    if len(pairs):
        ca, cb = cid[pairs[:, 0]], cid[pairs[:, 1]]
        cross = ca != cb
        lo, hi = np.minimum(ca[cross], cb[cross]), np.maximum(ca[cross], cb[cross])
        uniq, counts = np.unique(np.stack([lo, hi], axis=1), axis=0, return_counts=True)
    else:
        uniq, counts = np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    both = np.concatenate([uniq, uniq[:, ::-1]], axis=0)
    both_counts = np.concatenate([counts, counts])
    order = np.lexsort((both[:, 1], both[:, 0])) if len(both) else np.zeros(0, dtype=np.int64)
    edges = both[order].astype(np.int64).reshape(-1, 2)
    bcount = both_counts[order]
    if len(edges):
        offset = centroids[edges[:, 1]] - centroids[edges[:, 0]]
        ratio = np.log(sizes[edges[:, 1]] / sizes[edges[:, 0]])
        efeat = np.column_stack([offset, ratio, bcount.astype(np.float64)])
    else:
        efeat = np.zeros((0, len(EDGE_FEATURE_NAMES)))
    graph = SuperpointGraph(
        members=members,
        centroids=centroids,
        sizes=sizes.astype(np.int64),
        mean_features=mean_feats,
        edges=edges,
        edge_features=efeat,
        num_points=n,
    )
    graph._point_cluster = cid.astype(np.int64)
    return graph


# ---------------------------------------------------------------------------
# partitioners
# ---------------------------------------------------------------------------


class Partitioner:
    """Interface: map a cloud and its features to a SuperpointGraph."""

    def __call__(self, cloud: PointCloud, features: GeometricFeatures) -> SuperpointGraph:
        raise NotImplementedError


@dataclass
class GreedyPartitioner(Partitioner):
    """Variance-bounded greedy merging over the k-NN graph.

    Point pairs are visited by decreasing similarity exp(-d^2 / sigma^2),
    where d is the feature distance and sigma^2 the mean squared distance
    over all pairs.  Two clusters merge when the total feature variance of
    their union stays strictly below ``lam * sigma^2``.
    """

    knn: int = DEFAULT_KNN
    lam: float = DEFAULT_LAMBDA
    min_size: int = DEFAULT_MIN_SIZE

    def __call__(self, cloud, features):
        return partition(cloud, features, self.knn, self.lam, self.min_size)


def partition(
    cloud: PointCloud,
    features: GeometricFeatures,
    knn: int = DEFAULT_KNN,
    lam: float = DEFAULT_LAMBDA,
    min_size: int = DEFAULT_MIN_SIZE,
) -> SuperpointGraph:
    """Greedy variance-bounded partition (see ``GreedyPartitioner``).

    Clusters left below ``min_size`` points are absorbed by the adjacent
    cluster with the closest mean feature.  With ``lam == 0`` no merge of any
    kind happens and every point is its own cluster.
    """
    n = len(cloud)
    if knn < 3:
        raise ParameterError(f"knn must be >= 3, got {knn}")
    if knn > n - 1:
        raise ParameterError(f"knn={knn} is too large for {n} points")
    if not lam >= 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    pairs = _knn_pairs(cloud.positions, knn)
    f = features.as_array()[:, PARTITION_FEATURES]
    diff = f[pairs[:, 0]] - f[pairs[:, 1]]
    d2 = (diff * diff).sum(axis=1)
    sigma2 = float(d2.mean()) if len(d2) else 0.0
    if sigma2 <= 0.0:
        sigma2 = 1.0
    # exp(-d2/sigma2) is monotone in d2, so sort by d2 directly; ties by index pair
    order = np.lexsort((pairs[:, 1], pairs[:, 0], d2))
    threshold = lam * sigma2 if math.isfinite(lam) else math.inf
    assignment = _greedy_merge(f, pairs[order], threshold, min_size)
    return build_graph(cloud, features, assignment, pairs)


def _greedy_merge(
    f: np.ndarray, pairs: np.ndarray, threshold: float, min_size: int = 1
) -> np.ndarray:
    n, dims = f.shape
    parent = list(range(n))
    count = [1] * n
    sums = [list(map(float, row)) for row in f]
    sq = [float(v) for v in (f * f).sum(axis=1)]

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    # an edge rejected while both sides were small may pass once one side has
    # grown, so sweep the sorted edges until a sweep makes no merge
    pending = pairs.tolist() if threshold > 0 else []
    while pending:
        rejected = []
        for a, b in pending:
            ra, rb = find(a), find(b)
            if ra == rb:
                continue
            nm = count[ra] + count[rb]
            sa, sb = sums[ra], sums[rb]
            merged = [sa[i] + sb[i] for i in range(dims)]
            mean_sq = sum(v * v for v in merged) / (nm * nm)
            var = (sq[ra] + sq[rb]) / nm - mean_sq
            if var < threshold:
                if count[ra] < count[rb]:
                    ra, rb = rb, ra
                parent[rb] = ra
                count[ra] = nm
                sums[ra] = merged
                sq[ra] += sq[rb]
            else:
                rejected.append((a, b))
        if len(rejected) == len(pending):
            break
        pending = rejected

    if threshold > 0 and min_size > 1:
        _absorb_small(pairs, find, parent, count, sums, sq, min_size)
    return np.array([find(i) for i in range(n)], dtype=np.int64)


def _absorb_small(pairs, find, parent, count, sums, sq, min_size):
    """Merge clusters below ``min_size`` into their most similar adjacent cluster."""
    adj: dict = {}
    for a, b in pairs.tolist():
        ra, rb = find(a), find(b)
        if ra != rb:
            adj.setdefault(ra, set()).add(rb)
            adj.setdefault(rb, set()).add(ra)
    small = sorted((count[r], r) for r in adj if count[r] < min_size)
    for _, r in small:
        if find(r) != r or count[r] >= min_size:
            continue
        nbrs = {find(x) for x in adj.get(r, ())} - {r}
        if not nbrs:
            continue
        mr = [v / count[r] for v in sums[r]]

        def dist(o):
            mo = [v / count[o] for v in sums[o]]
            return (sum((x - y) ** 2 for x, y in zip(mr, mo)), o)

        target = min(nbrs, key=dist)
        parent[r] = target
        count[target] += count[r]
        sums[target] = [x + y for x, y in zip(sums[target], sums[r])]
        sq[target] += sq[r]
        adj[target] = ({find(x) for x in adj.get(target, ())} | nbrs) - {target}


def connected_components_partition(cloud, features, knn=DEFAULT_KNN) -> SuperpointGraph:
    """Clusters = connected components of the k-NN graph (a test oracle)."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    pairs = _knn_pairs(cloud.positions, knn)
    n = len(cloud)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return build_graph(cloud, features, labels, pairs)


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def majority_labels(graph: SuperpointGraph, labels: np.ndarray) -> np.ndarray:
    """Most frequent label per cluster (lowest label on ties)."""
    labels = np.asarray(labels)
    out = np.empty(graph.num_nodes, dtype=np.int64)
    for c, idx in enumerate(graph.members):
        out[c] = int(np.argmax(np.bincount(labels[idx])))
    return out


def purity(graph: SuperpointGraph, cloud: PointCloud) -> PartitionQuality:
    require_labels(cloud, "purity")
    if len(cloud) != graph.num_points:
        raise ContractError("graph and cloud disagree on the number of points")
    pur = np.empty(graph.num_nodes)
    major = np.empty(graph.num_nodes, dtype=np.int64)
    for c, idx in enumerate(graph.members):
        counts = np.bincount(cloud.labels[idx])
        major[c] = int(np.argmax(counts))
        pur[c] = counts.max() / len(idx)
    sizes = graph.sizes.astype(np.float64)
    return PartitionQuality(
        cluster_count=graph.num_nodes,
        mean_cluster_size=float(sizes.mean()),
        purities=pur,
        mean_purity=float((pur * sizes).sum() / sizes.sum()),
        majority_labels=major,
    )


def compression_ratio(graph: SuperpointGraph) -> float:
    return graph.num_points / graph.num_nodes


# ---------------------------------------------------------------------------
# graph file
# ---------------------------------------------------------------------------


def save_graph(path, graph: SuperpointGraph, cloud: PointCloud, features: GeometricFeatures):
    """Write the graph together with the per-point data it was built from."""
    obj = {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "num_points": int(graph.num_points),
        "point_cluster": encode_array(graph.point_cluster),
        "centroids": encode_array(graph.centroids),
        "sizes": encode_array(graph.sizes),
        "mean_features": encode_array(graph.mean_features),
        "edges": encode_array(graph.edges),
        "edge_features": encode_array(graph.edge_features),
        "positions": encode_array(cloud.positions),
        "features": encode_array(features.as_array()),
        "colors": None if cloud.colors is None else encode_array(cloud.colors),
        "labels": None if cloud.labels is None else encode_array(cloud.labels),
        "class_names": cloud.class_names,
    }
    dump_json(path, obj)


def load_graph(path):
    """Inverse of ``save_graph``; returns ``(graph, cloud, features)``."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    try:
        obj = load_json(path)
    except ValueError as exc:
        raise ParseError(f"not a graph file ({exc})", path) from None
    if not isinstance(obj, dict) or obj.get("format") != GRAPH_FORMAT:
        raise ParseError("not a superpoint graph file", path)
    if obj.get("version") != GRAPH_VERSION:
        raise ParseError(f"unsupported graph version {obj.get('version')}", path)
    cid = decode_array(obj["point_cluster"])
    sizes = decode_array(obj["sizes"])
    order = np.argsort(cid, kind="stable")
    members = np.split(order, np.cumsum(sizes)[:-1])
    graph = SuperpointGraph(
        members=members,
        centroids=decode_array(obj["centroids"]),
        sizes=sizes,
        mean_features=decode_array(obj["mean_features"]),
        edges=decode_array(obj["edges"]).reshape(-1, 2),
        edge_features=decode_array(obj["edge_features"]).reshape(-1, len(EDGE_FEATURE_NAMES)),
        num_points=int(obj["num_points"]),
    )
    graph._point_cluster = cid
    cloud = PointCloud(
        decode_array(obj["positions"]),
        None if obj["colors"] is None else decode_array(obj["colors"]),
        None if obj["labels"] is None else decode_array(obj["labels"]),
        obj.get("class_names"),
    )
    return graph, cloud, GeometricFeatures.from_array(decode_array(obj["features"]))
