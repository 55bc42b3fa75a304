"""Graph convolution, residual backbone, weighted bidirectional fusion and head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .embedding import ClusterEmbedder, EmbeddingConfig, cluster_point_tensor, point_inputs
from .errors import ConfigError, ContractError
from .nn import BatchNorm, Linear, Module, xavier_uniform
from .partition import EDGE_FEATURE_NAMES, SuperpointGraph, majority_labels
from .serialization import decode_array, dump_json, encode_array, load_json
from .tensor import Tensor, concat, is_grad_enabled, matmul, no_grad, relu, sparse_matmul

FUSION_MODES = ("bidirectional", "pyramid", "none")
EPSILON = 1e-4
EMBED_CHUNK = 128  # clusters per embedding block at inference


# ---------------------------------------------------------------------------
# graph operators
# ---------------------------------------------------------------------------


@dataclass
class GraphOperator:
    """Constant pieces of a graph convolution on one graph.

    ``mean`` is the row-normalized adjacency (rows of isolated nodes are
    zero) and ``edge_mean`` the per-node mean of the transformed edge features.
    """

    mean: sp.csr_matrix
    edge_mean: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.mean.shape[0]


def edge_inputs(edge_features: np.ndarray) -> np.ndarray:
    """Edge features as fed to the network (boundary count log-compressed)."""
    out = np.array(edge_features, dtype=np.float64, copy=True)
    if len(out):
        out[:, 4] = np.log1p(out[:, 4])
    return out


def graph_operator(graph: SuperpointGraph) -> GraphOperator:
    cached = graph._cache.get("operator")
    if cached is not None:
        return cached
    n = graph.num_nodes
    if graph.num_edges:
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        deg = np.bincount(src, minlength=n).astype(np.float64)
        vals = 1.0 / deg[src]
        mean = sp.csr_matrix((vals, (src, dst)), shape=(n, n))
        mean.sort_indices()
        e = edge_inputs(graph.edge_features)
        edge_mean = np.zeros((n, e.shape[1]))
        np.add.at(edge_mean, src, e)
        nz = deg > 0
        edge_mean[nz] /= deg[nz, None]
    else:
        mean = sp.csr_matrix((n, n))
        edge_mean = np.zeros((n, len(EDGE_FEATURE_NAMES)))
    op = GraphOperator(mean, edge_mean)
    graph._cache["operator"] = op
    return op


def union_operator(ops) -> GraphOperator:
    """Disjoint union of several graphs' operators (block diagonal)."""
    mean = sp.block_diag([op.mean for op in ops], format="csr")
    mean.sort_indices()
    return GraphOperator(mean, np.vstack([op.edge_mean for op in ops]))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class GraphConvLayer(Module):
    """out_i = h_i W_self + mean_j(h_j W_nbr + e_ij W_edge) + b over j in N(i) minus i."""

    def __init__(self, rng, fan_in, fan_out, edge_features: int = 0, bias: bool = True):
        self.w_self = xavier_uniform(rng, fan_in, fan_out)
        self.w_nbr = xavier_uniform(rng, fan_in, fan_out)
        self.w_edge = xavier_uniform(rng, edge_features, fan_out) if edge_features else None
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, h: Tensor, op: GraphOperator) -> Tensor:
        return graph_conv(h, op, self)


def graph_conv(h, graph, layer: GraphConvLayer) -> Tensor:
    """Mean-aggregation graph convolution; ``graph`` may be a graph or its operator."""
    op = graph if isinstance(graph, GraphOperator) else graph_operator(graph)
    h = h if isinstance(h, Tensor) else Tensor(h)
    if h.ndim != 2 or h.shape[0] != op.num_nodes:
        raise ContractError(f"graph_conv: features {h.shape} for a {op.num_nodes}-node graph")
    out = matmul(h, layer.w_self) + matmul(sparse_matmul(op.mean, h), layer.w_nbr)
    if layer.w_edge is not None:
        out = out + matmul(Tensor(op.edge_mean), layer.w_edge)
    if layer.bias is not None:
        out = out + layer.bias
    return out


@dataclass
class BackboneConfig:
    depth: int = 4
    width: int = 64
    taps: tuple | None = None  # 1-based block indices; default = last min(4, depth)

    def resolved_taps(self) -> tuple:
        if self.depth < 1:
            raise ConfigError(f"backbone depth must be >= 1, got {self.depth}")
        taps = self.taps
        if taps is None:
            taps = tuple(range(max(1, self.depth - 3), self.depth + 1))
        taps = tuple(int(t) for t in taps)
        if not taps or any(t < 1 or t > self.depth for t in taps):
            raise ConfigError(f"taps {taps} out of range for depth {self.depth}")
        if list(taps) != sorted(set(taps)):
            raise ConfigError(f"taps {taps} must be strictly increasing")
        return taps


class Backbone(Module):
    """Residual stack of relu(batchnorm(graph_conv(.))) blocks.

    Block i >= 2 adds the previous block's output; the final block also adds
    block 1's output when depth >= 3.  The convolutions carry no bias since
    batch norm follows them.
    """

    def __init__(self, rng, cfg: BackboneConfig, fan_in: int, edge_features: int):
        self.cfg = cfg
        self.taps = cfg.resolved_taps()
        self.convs = []
        self.norms = []
        for i in range(cfg.depth):
            self.convs.append(
                GraphConvLayer(rng, fan_in if i == 0 else cfg.width, cfg.width, edge_features, bias=False)
            )
            self.norms.append(BatchNorm(cfg.width))

    def __call__(self, h0: Tensor, op: GraphOperator, mode: str):
        outs = []
        h = h0
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            y = relu(norm(conv(h, op), mode))
            if i >= 1:
                y = y + outs[-1]
            if i == self.cfg.depth - 1 and i >= 2:
                y = y + outs[0]
            outs.append(y)
            h = y
        taps = [outs[t - 1] for t in self.taps]
        return taps, concat(taps, axis=1)


class FusionNode(Module):
    """graph_conv of the relu-weighted, (sum + eps)-normalized sum of its inputs."""

    def __init__(self, rng, n_inputs: int, width: int, edge_features: int, epsilon: float = EPSILON):
        self.weights = Tensor(np.ones(n_inputs), requires_grad=True)
        self.conv = GraphConvLayer(rng, width, width, edge_features, bias=True)
        self.epsilon = epsilon

    def fuse(self, inputs) -> Tensor:
        if len(inputs) != self.weights.shape[0]:
            raise ContractError(f"fusion node expects {self.weights.shape[0]} inputs, got {len(inputs)}")
        w = relu(self.weights)
        denom = w.sum() + self.epsilon
        total = None
        for k, h in enumerate(inputs):
            term = w[k] * h
            total = term if total is None else total + term
        return total / denom

    def __call__(self, inputs, op: GraphOperator) -> Tensor:
        return self.conv(self.fuse(inputs), op)


class PyramidNode(Module):
    """Unweighted top-down node: graph_conv of the plain sum of its inputs."""

    def __init__(self, rng, width: int, edge_features: int):
        self.conv = GraphConvLayer(rng, width, width, edge_features, bias=True)

    def __call__(self, inputs, op: GraphOperator) -> Tensor:
        total = inputs[0]
        for h in inputs[1:]:
            total = total + h
        return self.conv(total, op)


class BidirectionalFusion(Module):
    """Fusion over L equal-width levels (level 1 shallowest, level L deepest).

    bidirectional mode::

        mid_L = in_L
        mid_i = node(in_i, mid_{i+1})              i = L-1 .. 2
        out_1 = node(in_1, mid_2)
        out_i = node(in_i, mid_i, out_{i-1})       i = 2 .. L-1
        out_L = node(in_L, out_{L-1})

    pyramid mode: out_L = conv(in_L), out_i = conv(in_i + out_{i+1}).
    """

    def __init__(self, rng, levels: int, width: int, edge_features: int, mode: str, epsilon=EPSILON):
        if mode not in ("bidirectional", "pyramid"):
            raise ConfigError(f"unknown fusion mode {mode!r}")
        self.levels = levels
        self.mode = mode
        L = levels
        if mode == "pyramid":
            self.outs = [PyramidNode(rng, width, edge_features) for _ in range(L)]
            self.mids = []
            return
        # mids[i] serves level i + 1 (only levels 2..L-1 are used)
        self.mids = [
            FusionNode(rng, 2, width, edge_features, epsilon) if 2 <= lvl <= L - 1 else None
            for lvl in range(1, L + 1)
        ]
        outs = []
        for lvl in range(1, L + 1):
            if L == 1:
                n_in = 1
            elif lvl == 1 or lvl == L:
                n_in = 2
            else:
                n_in = 3
            outs.append(FusionNode(rng, n_in, width, edge_features, epsilon))
        self.outs = outs

    def named_parameters(self, prefix=""):
        # skip the None placeholders in ``mids``
        for i, node in enumerate(self.mids):
            if node is not None:
                yield from node.named_parameters(f"{prefix}mids.{i}.")
        for i, node in enumerate(self.outs):
            yield from node.named_parameters(f"{prefix}outs.{i}.")

    def __call__(self, levels, op: GraphOperator):
        L = self.levels
        if len(levels) != L:
            raise ContractError(f"fusion expects {L} levels, got {len(levels)}")
        shape = levels[0].shape
        if any(h.shape != shape for h in levels):
            raise ContractError(f"level shapes differ: {[h.shape for h in levels]}")
        ins = list(levels)
        out = [None] * L
        if self.mode == "pyramid":
            out[L - 1] = self.outs[L - 1]([ins[L - 1]], op)
            for i in range(L - 2, -1, -1):
                out[i] = self.outs[i]([ins[i], out[i + 1]], op)
            return out
        if L == 1:
            return [self.outs[0]([ins[0]], op)]
        mid = [None] * L
        mid[L - 1] = ins[L - 1]
        for i in range(L - 2, 0, -1):
            mid[i] = self.mids[i]([ins[i], mid[i + 1]], op)
        out[0] = self.outs[0]([ins[0], mid[1]], op)
        for i in range(1, L - 1):
            out[i] = self.outs[i]([ins[i], mid[i], out[i - 1]], op)
        out[L - 1] = self.outs[L - 1]([ins[L - 1], out[L - 2]], op)
        return out


def bidirectional_fuse(taps, graph, fusion: BidirectionalFusion):
    op = graph if isinstance(graph, GraphOperator) else graph_operator(graph)
    return fusion(taps, op)


class SegmentHead(Module):
    def __init__(self, rng, fan_in: int, hidden: int, n_classes: int):
        self.fc1 = Linear(rng, fan_in, hidden)
        self.fc2 = Linear(rng, hidden, n_classes)

    def __call__(self, concat_bb: Tensor, fused) -> Tensor:
        parts = [concat_bb] + list(fused)
        n = concat_bb.shape[0]
        if any(p.shape[0] != n for p in parts):
            raise ContractError(f"head inputs disagree on node count: {[p.shape for p in parts]}")
        return self.fc2(relu(self.fc1(concat(parts, axis=1))))


def segment_head(concat_bb, fused, head: SegmentHead) -> Tensor:
    return head(concat_bb, fused)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    n_classes: int = 3
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: str = "bidirectional"
    stacks: int = 1
    head_hidden: int = 64
    use_edge_features: bool = True
    use_colors: bool = False
    epsilon: float = EPSILON
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.embedding, dict):
            self.embedding = EmbeddingConfig(**self.embedding)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.stacks < 1:
            raise ConfigError("stacks must be >= 1")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        expected = 8 + (3 if self.use_colors else 0)
        if self.embedding.in_features != expected:
            raise ConfigError(
                f"embedding.in_features={self.embedding.in_features} but point inputs have"
                f" {expected} columns"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["embedding"]["budgets"] = list(self.embedding.budgets)
        d["embedding"]["mlp_widths"] = [list(w) for w in self.embedding.mlp_widths]
        if self.backbone.taps is not None:
            d["backbone"]["taps"] = list(self.backbone.taps)
        return d


@dataclass
class PreparedScene:
    """Everything the network needs for one scene, precomputed once."""

    graph: SuperpointGraph
    points: np.ndarray  # K x n1 x F canonical cluster samples
    op: GraphOperator
    cluster_labels: np.ndarray | None = None
    point_labels: np.ndarray | None = None
    name: str = ""

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes


def prepare_scene(graph, cloud, features, cfg: ModelConfig, name: str = "") -> PreparedScene:
    inputs = point_inputs(graph, cloud, features, cfg.use_colors)
    pts = cluster_point_tensor(graph, inputs, cfg.embedding.budgets[0])
    labels = majority_labels(graph, cloud.labels) if cloud.labels is not None else None
    if labels is not None and labels.size and labels.max() >= cfg.n_classes:
        from .errors import ValidationError

        raise ValidationError(f"label {labels.max()} >= class count {cfg.n_classes}")
    return PreparedScene(graph, pts, graph_operator(graph), labels, cloud.labels, name)


class MuGNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ef = len(EDGE_FEATURE_NAMES) if cfg.use_edge_features else 0
        self.embedder = ClusterEmbedder(cfg.embedding, rng)
        self.backbone = Backbone(rng, cfg.backbone, cfg.embedding.out_features, ef)
        levels = len(self.backbone.taps)
        width = cfg.backbone.width
        if cfg.fusion == "none":
            self.fusions = []
        else:
            self.fusions = [
                BidirectionalFusion(rng, levels, width, ef, cfg.fusion, cfg.epsilon)
                for _ in range(cfg.stacks)
            ]
        head_in = levels * width * (1 + (1 if self.fusions else 0))
        self.head = SegmentHead(rng, head_in, cfg.head_hidden, cfg.n_classes)

    def _embed(self, points) -> Tensor:
        if is_grad_enabled() or len(points) <= EMBED_CHUNK:
            return self.embedder(points)
        # without a tape, embed a cache-sized block of clusters at a time
        parts = [self.embedder(points[i : i + EMBED_CHUNK]) for i in range(0, len(points), EMBED_CHUNK)]
        return concat(parts, axis=0)

    def forward(self, points, op: GraphOperator, mode: str = "train") -> Tensor:
        h0 = self._embed(points)
        taps, concat_bb = self.backbone(h0, op, mode)
        fused = []
        levels = taps
        for fusion in self.fusions:
            levels = fusion(levels, op)
            fused = levels
        return self.head(concat_bb, fused)

    def __call__(self, scene: PreparedScene, mode: str = "train") -> Tensor:
        return self.forward(scene.points, scene.op, mode)

    def infer(self, scene: PreparedScene) -> np.ndarray:
        """Eval-mode logits without recording a tape."""
        from .tensor import row_stable_matmul

        with no_grad(), row_stable_matmul():
            return self.forward(scene.points, scene.op, "eval").data

    def infer_batch(self, scenes) -> list:
        """Logits for several scenes in one pass over their disjoint union."""
        from .tensor import row_stable_matmul

        scenes = list(scenes)
        op = union_operator([s.op for s in scenes])
        pts = np.concatenate([s.points for s in scenes], axis=0)
        with no_grad(), row_stable_matmul():
            logits = self.forward(pts, op, "eval").data
        bounds = np.cumsum([s.num_nodes for s in scenes])[:-1]
        return np.split(logits, bounds, axis=0)


def predict_points(logits, graph: SuperpointGraph) -> np.ndarray:
    """Per-cluster argmax (lowest class on ties) broadcast to member points."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.shape[0] != graph.num_nodes:
        raise ContractError(f"{arr.shape[0]} logit rows for {graph.num_nodes} clusters")
    return np.argmax(arr, axis=1)[graph.point_cluster]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "mugnet-checkpoint"
CHECKPOINT_VERSION = 1


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    emb = dict(d.pop("embedding"))
    emb["budgets"] = tuple(emb["budgets"])
    emb["mlp_widths"] = tuple(tuple(w) for w in emb["mlp_widths"])
    bb = dict(d.pop("backbone"))
    if bb.get("taps") is not None:
        bb["taps"] = tuple(bb["taps"])
    return ModelConfig(embedding=EmbeddingConfig(**emb), backbone=BackboneConfig(**bb), **d)


def save_checkpoint(path, model: MuGNet, extra: dict | None = None):
    state = model.state_dict()
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": [{"name": name, **encode_array(arr)} for name, arr in state.items()],
        "extra": extra or {},
    }
    dump_json(path, obj)


def load_checkpoint(path) -> MuGNet:
    import os

    from .errors import ParseError

    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        obj = load_json(path)
    except ValueError as exc:
        raise ParseError(f"not a checkpoint ({exc})", path) from None
    if not isinstance(obj, dict) or obj.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a MuGNet checkpoint", path)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {obj.get('version')}", path)
    model = MuGNet(config_from_dict(obj["config"]))
    model.load_state_dict({t["name"]: decode_array(t) for t in obj["tensors"]})
    return model
