"""Cluster-feature embedding at three point resolutions.

The member points of a cluster are put into a canonical order (distance to
the centroid, then feature values), sampled or padded to ``n1`` rows, and
mixed down to ``n2`` and ``n3`` rows by learnable linear maps across the
point axis.  Every resolution runs its own shared per-point MLP followed by a
max-pool; the three pooled vectors are concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Linear, Module, xavier_uniform
from .partition import SuperpointGraph
from .pointcloud import GeometricFeatures, PointCloud
from .tensor import Tensor, concat, matmul, no_grad, relu, transpose

# rounding applied to ordering keys so that roundoff cannot reorder points
_KEY_DECIMALS = 9


@dataclass
class EmbeddingConfig:
    in_features: int = 8
    budgets: tuple = (64, 32, 16)
    mlp_widths: tuple = ((64, 64), (64, 64), (64, 64))

    def __post_init__(self):
        self.budgets = tuple(int(b) for b in self.budgets)
        self.mlp_widths = tuple(tuple(int(w) for w in ws) for ws in self.mlp_widths)
        n1, n2, n3 = self.budgets
        if not n1 >= n2 >= n3 >= 1:
            raise ConfigError(f"point budgets must satisfy n1 >= n2 >= n3 >= 1, got {self.budgets}")
        if len(self.mlp_widths) != 3 or any(len(ws) == 0 for ws in self.mlp_widths):
            raise ConfigError("need a non-empty MLP width list for each of the 3 resolutions")
        if self.in_features < 3:
            raise ConfigError("point inputs start with a 3D centroid offset")

    @property
    def out_features(self) -> int:
        return sum(ws[-1] for ws in self.mlp_widths)


def point_inputs(
    graph: SuperpointGraph,
    cloud: PointCloud,
    features: GeometricFeatures,
    use_colors: bool = False,
) -> np.ndarray:
    """Per-point network inputs: centroid offset, geometric features, optional rgb."""
    offsets = cloud.positions - graph.centroids[graph.point_cluster]
    cols = [offsets, features.as_array()]
    if use_colors:
        if cloud.colors is None:
            raise ContractError("use_colors requested but the cloud has no colors")
        cols.append(cloud.colors)
    return np.hstack(cols)


def canonical_points(points: np.ndarray, n1: int) -> np.ndarray:
    """Order-independent n1 x F sample of a cluster's point rows.

    Rows are sorted by distance of their offset (columns 0-2) to the centroid
    and then by their values.  Larger clusters are reduced by farthest-point
    sampling started from the first canonical row; smaller ones are padded by
    cycling through the canonical order.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if m < 1:
        raise ContractError("a cluster needs at least one point")
    rounded = np.round(points, _KEY_DECIMALS)
    dist = np.round(np.sqrt((points[:, :3] ** 2).sum(axis=1)), _KEY_DECIMALS)
    keys = [rounded[:, j] for j in range(points.shape[1] - 1, -1, -1)] + [dist]
    order = np.lexsort(keys)
    pts = points[order]
    if m > n1:
        xyz = pts[:, :3]
        chosen = np.zeros(n1, dtype=np.int64)
        mind = ((xyz - xyz[0]) ** 2).sum(axis=1)
        for i in range(1, n1):
            nxt = int(np.argmax(mind))
            chosen[i] = nxt
            mind = np.minimum(mind, ((xyz - xyz[nxt]) ** 2).sum(axis=1))
        return pts[np.sort(chosen)]
    return pts[np.arange(n1) % m]


def cluster_point_tensor(graph: SuperpointGraph, inputs: np.ndarray, n1: int) -> np.ndarray:
    """Stack canonical samples of every cluster into a K x n1 x F array."""
    return np.stack([canonical_points(inputs[idx], n1) for idx in graph.members])


class PointMLP(Module):
    def __init__(self, rng, fan_in: int, widths):
        self.layers = []
        for w in widths:
            self.layers.append(Linear(rng, fan_in, w))
            fan_in = w

    def __call__(self, x: Tensor) -> Tensor:
        """Shared MLP over K x n x F, then max over the point axis -> K x width."""
        k, n, f = x.shape
        h = x.reshape(k * n, f)
        for layer in self.layers:
            h = relu(layer(h))
        return h.reshape(k, n, h.shape[-1]).max(axis=1)


class ClusterEmbedder(Module):
    def __init__(self, cfg: EmbeddingConfig, rng):
        self.cfg = cfg
        n1, n2, n3 = cfg.budgets
        self.down1 = xavier_uniform(rng, n1, n2)
        self.down2 = xavier_uniform(rng, n2, n3)
        self.mlps = [PointMLP(rng, cfg.in_features, ws) for ws in cfg.mlp_widths]

    @staticmethod
    def _mix(x: Tensor, mixing: Tensor) -> Tensor:
        # K x n x F -> K x F x n -> (K*F) x n, mix along n, back to K x n' x F
        k, n, f = x.shape
        flat = transpose(x, (0, 2, 1)).reshape(k * f, n)
        mixed = matmul(flat, mixing)
        return transpose(mixed.reshape(k, f, mixing.shape[1]), (0, 2, 1))

    def __call__(self, x1) -> Tensor:
        x1 = x1 if isinstance(x1, Tensor) else Tensor(x1)
        if x1.ndim != 3 or x1.shape[1] != self.cfg.budgets[0]:
            raise ContractError(
                f"expected K x {self.cfg.budgets[0]} x F point tensor, got {x1.shape}"
            )
        if x1.shape[2] != self.cfg.in_features:
            raise ContractError(
                f"point inputs have {x1.shape[2]} features, embedder expects {self.cfg.in_features}"
            )
        x2 = self._mix(x1, self.down1)
        x3 = self._mix(x2, self.down2)
        pooled = [mlp(x) for mlp, x in zip(self.mlps, (x1, x2, x3))]
        return concat(pooled, axis=1)


def embed_cluster(points: np.ndarray, cfg: EmbeddingConfig, embedder: ClusterEmbedder) -> np.ndarray:
    """Embedding vector (length ``cfg.out_features``) of one cluster's point rows."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != cfg.in_features:
        raise ContractError(
            f"cluster points must be m x {cfg.in_features}, got {points.shape}"
        )
    x1 = canonical_points(points, cfg.budgets[0])[None]
    with no_grad():
        return embedder(x1).data[0]


def embed_graph(
    graph: SuperpointGraph,
    inputs: np.ndarray,
    cfg: EmbeddingConfig,
    embedder: ClusterEmbedder,
) -> Tensor:
    """K x F_emb embedding of every cluster (differentiable w.r.t. the embedder)."""
    if inputs.shape != (graph.num_points, cfg.in_features):
        raise ContractError(
            f"point inputs {inputs.shape} do not match graph ({graph.num_points} points,"
            f" {cfg.in_features} features)"
        )
    return embedder(cluster_point_tensor(graph, inputs, cfg.budgets[0]))
