"""Multi-resolution graph network for pointcloud semantic segmentation."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    MuGNetError,
    ParameterError,
    ParseError,
    TrainingDivergedError,
    ValidationError,
)
from .tensor import Tensor, backward, no_grad, tensor
from .pointcloud import PointCloud, GeometricFeatures, geometric_features, load_cloud, save_cloud
from .synth import default_room, parse_recipe, synth_scene
from .partition import (
    SuperpointGraph,
    compression_ratio,
    load_graph,
    partition,
    purity,
    save_graph,
)
from .embedding import EmbeddingConfig, embed_cluster, embed_graph
from .model import (
    BackboneConfig,
    ModelConfig,
    MuGNet,
    graph_conv,
    load_checkpoint,
    predict_points,
    prepare_scene,
    save_checkpoint,
)
from .training import TrainConfig, evaluate, loss, run_ablation, train
from .bench import BenchReport, bench_batched

__version__ = "0.1.0"
