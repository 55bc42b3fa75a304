"""Loss, Adam, the training loop, OA / IoU metrics and the ablation harness."""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingConfig
from .errors import ConfigError, ContractError, TrainingDivergedError, ValidationError
from .model import BackboneConfig, ModelConfig, MuGNet, PreparedScene, predict_points
from .tensor import Tensor, backward, log_softmax, mul

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def loss(logits: Tensor, cluster_labels, cluster_sizes, class_weights=None) -> Tensor:
    """Size-weighted softmax cross-entropy: sum_i s_i CE_i / sum_i s_i.

    Optional ``class_weights`` multiply each cluster's weight by the weight of
    its label.
    """
    labels = np.asarray(cluster_labels, dtype=np.int64)
    sizes = np.asarray(cluster_sizes, dtype=np.float64)
    n, c = logits.shape
    if labels.shape != (n,) or sizes.shape != (n,):
        raise ContractError(f"{n} logit rows but {labels.shape} labels / {sizes.shape} sizes")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"cluster labels must lie in [0, {c})")
    w = sizes.copy()
    if class_weights is not None:
        w = w * np.asarray(class_weights, dtype=np.float64)[labels]
    picked = np.zeros((n, c))
    picked[np.arange(n), labels] = -w / w.sum()
    return mul(log_softmax(logits, axis=1), Tensor(picked)).sum()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    name: str = "mugnet"
    epochs: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 1.0  # multiplied into lr after every epoch
    seed: int = 0
    class_weighting: str = "none"  # none | inverse-frequency
    loss_weighting: str = "cluster-size"
    miou_absent: str = "exclude"  # exclude | zero
    n_classes: int = 3
    # ablation switches
    depth: int = 4
    taps: tuple | None = None
    width: int = 64
    fusion: str = "bidirectional"  # bidirectional | pyramid | none
    stacks: int = 1
    epsilon: float = 1e-4
    head_hidden: int = 64
    budgets: tuple = (64, 32, 16)
    mlp_width: int = 64
    use_edge_features: bool = True
    use_colors: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.class_weighting not in ("none", "inverse-frequency"):
            raise ConfigError(f"unknown class_weighting {self.class_weighting!r}")
        if self.loss_weighting != "cluster-size":
            raise ConfigError("only loss_weighting = cluster-size is supported")
        if self.miou_absent not in ("exclude", "zero"):
            raise ConfigError(f"unknown miou_absent {self.miou_absent!r}")
        self.budgets = tuple(int(b) for b in self.budgets)
        if self.taps is not None:
            self.taps = tuple(int(t) for t in self.taps)

    def model_config(self) -> ModelConfig:
        w = self.mlp_width
        return ModelConfig(
            n_classes=self.n_classes,
            embedding=EmbeddingConfig(
                in_features=8 + (3 if self.use_colors else 0),
                budgets=self.budgets,
                mlp_widths=((w, w), (w, w), (w, w)),
            ),
            backbone=BackboneConfig(depth=self.depth, width=self.width, taps=self.taps),
            fusion=self.fusion,
            stacks=self.stacks,
            head_hidden=self.head_hidden,
            use_edge_features=self.use_edge_features,
            use_colors=self.use_colors,
            epsilon=self.epsilon,
            seed=self.seed,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("taps", "budgets"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


def _coerce(field_type, raw: str, key: str):
    raw = raw.strip()
    try:
        if key in ("taps", "budgets"):
            if raw.lower() in ("", "none", "default"):
                return None if key == "taps" else TrainConfig.budgets
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if field_type in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if field_type in ("int", int):
            return int(raw)
        if field_type in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_train_config(text: str, section: str = "train") -> TrainConfig:
    """Read ``key = value`` lines (an optional ``[train]`` header is accepted)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    body = text if text.lstrip().startswith("[") else f"[{section}]\n{text}"
    try:
        cp.read_string(body)
    except configparser.Error as exc:
        raise ConfigError(f"train config: {exc}") from None
    if not cp.has_section(section):
        raise ConfigError(f"train config has no [{section}] section")
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for key, raw in cp[section].items():
        if key not in types:
            raise ConfigError(f"unknown train config key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    return TrainConfig(**values)


def load_train_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_train_config(fh.read())


def format_train_config(cfg: TrainConfig) -> str:
    lines = ["[train]"]
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = " ".join(str(v) for v in value)
        elif value is None:
            value = "default"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MuGNet
    history: list = field(default_factory=list)


def _class_weights(scenes, cfg: TrainConfig):
    if cfg.class_weighting == "none":
        return None
    counts = np.zeros(cfg.n_classes)
    for s in scenes:
        counts += np.bincount(s.cluster_labels, weights=s.graph.sizes, minlength=cfg.n_classes)
    present = counts > 0
    w = np.zeros(cfg.n_classes)
    w[present] = counts[present].sum() / (present.sum() * counts[present])
    return w


def train(scenes, cfg: TrainConfig, model: MuGNet | None = None) -> TrainResult:
    """Adam over scenes, one optimizer step per scene, scenes shuffled per epoch."""
    scenes = list(scenes)
    if not scenes:
        raise ContractError("train needs at least one scene")
    for s in scenes:
        if s.cluster_labels is None:
            raise ContractError(f"scene {s.name or '?'} has no labels")
        if s.cluster_labels.max() >= cfg.n_classes:
            raise ValidationError(
                f"scene {s.name or '?'} has label {s.cluster_labels.max()} >= {cfg.n_classes}"
            )
    model = model or MuGNet(cfg.model_config())
    opt = Adam(
        model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay
    )
    rng = np.random.default_rng(cfg.seed)
    cw = _class_weights(scenes, cfg)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(scenes))
        total, weight, correct, nodes = 0.0, 0.0, 0, 0
        for idx in order:
            scene = scenes[idx]
            opt.zero_grad()
            logits = model(scene, "train")
            value = loss(logits, scene.cluster_labels, scene.graph.sizes, cw)
            lv = float(value.data)
            if not math.isfinite(lv):
                raise TrainingDivergedError(epoch, lv)
            backward(value)
            opt.step()
            if not all(np.isfinite(p.data).all() for p in opt.params):
                raise TrainingDivergedError(epoch, lv)
            total += lv * scene.num_nodes
            weight += scene.num_nodes
            correct += int((np.argmax(logits.data, axis=1) == scene.cluster_labels).sum())
            nodes += scene.num_nodes
        opt.lr *= cfg.lr_decay
        record = {"epoch": epoch, "loss": total / weight, "cluster_accuracy": correct / nodes}
        history.append(record)
        logger.debug("epoch %d loss %.5f acc %.4f", epoch, record["loss"], record["cluster_accuracy"])
    return TrainResult(model, history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    oa: float
    iou: np.ndarray
    miou: float
    confusion: np.ndarray
    included: np.ndarray

    def to_dict(self, class_names=None) -> dict:
        names = class_names or [f"class{i}" for i in range(len(self.iou))]
        return {
            "OA": self.oa,
            "mIoU": self.miou,
            "classes": [
                {"name": names[i], "IoU": None if not self.included[i] else float(self.iou[i])}
                for i in range(len(self.iou))
            ],
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(pred, truth, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction length {pred.shape} != truth length {truth.shape}")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValidationError(f"{name} labels must lie in [0, {n_classes})")
    flat = truth * n_classes + pred
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def evaluate(pred, truth, n_classes: int, absent: str = "exclude") -> Metrics:
    """OA, per-class IoU and mIoU from a truth x prediction confusion matrix.

    Classes absent from both truth and prediction are left out of the mIoU
    (``absent="exclude"``) or counted as IoU 0 (``absent="zero"``).
    """
    cm = confusion_matrix(pred, truth, n_classes)
    total = cm.sum()
    if total == 0:
        raise ContractError("nothing to evaluate")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    included = union > 0
    iou = np.zeros(n_classes)
    iou[included] = tp[included] / union[included]
    if absent == "zero":
        miou = float(iou.mean())
        included = np.ones(n_classes, dtype=bool)
    else:
        miou = float(iou[included].mean())
    return Metrics(float(tp.sum() / total), iou, miou, cm, included)


def evaluate_scenes(model: MuGNet, scenes, n_classes: int, absent="exclude") -> Metrics:
    preds, truths = [], []
    for scene in scenes:
        logits = model.infer(scene)
        preds.append(predict_points(logits, scene.graph))
        truths.append(scene.point_labels)
    return evaluate(np.concatenate(preds), np.concatenate(truths), n_classes, absent)


def cluster_accuracy(model: MuGNet, scene: PreparedScene) -> float:
    logits = model.infer(scene)
    return float((np.argmax(logits, axis=1) == scene.cluster_labels).mean())


def format_metrics(metrics: Metrics, class_names=None) -> str:
    names = class_names or [f"class{i}" for i in range(len(metrics.iou))]
    header = ["OA", "mIoU"] + list(names)
    cells = [f"{100 * metrics.oa:.1f}", f"{100 * metrics.miou:.1f}"]
    for i in range(len(metrics.iou)):
        cells.append(f"{100 * metrics.iou[i]:.1f}" if metrics.included[i] else "-")
    widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
    line1 = " | ".join(h.rjust(w) for h, w in zip(header, widths))
    line2 = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
    return f"{line1}\n{line2}\n"


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def ablation_grid(base: TrainConfig | None = None) -> list:
    """Ablation rows: backbone-only 7/14/28, stacked x2, 14-layer MuGNet, baseline."""
    base = base or TrainConfig()
    return [
        base.replace(name="backbone-7", depth=7, fusion="none"),
        base.replace(name="backbone-14", depth=14, fusion="none"),
        base.replace(name="backbone-28", depth=28, fusion="none"),
        base.replace(name="stacked-2", stacks=2),
        base.replace(name="mugnet-14", depth=14),
        base.replace(name="baseline"),
    ]


def kfold(n: int, folds: int):
    """Contiguous fold assignment: yields (train_idx, test_idx)."""
    if folds < 2:
        yield list(range(n)), list(range(n))
        return
    parts = np.array_split(np.arange(n), folds)
    for k in range(folds):
        test = parts[k].tolist()
        train_idx = [i for i in range(n) if i not in set(test)]
        yield train_idx, test


def run_ablation(grid, scenes, folds: int = 2) -> list:
    """Train and evaluate each config on identical folds.

    Returns one row per config (input order): name, mIoU, OA, config echo.
    Folds are pooled into one confusion matrix per config.
    """
    grid = list(grid)
    if not grid:
        raise ContractError("ablation grid is empty")
    scenes = list(scenes)
    rows = []
    for cfg in grid:
        cm = np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64)
        for train_idx, test_idx in kfold(len(scenes), folds):
            result = train([scenes[i] for i in train_idx], cfg)
            m = evaluate_scenes(result.model, [scenes[i] for i in test_idx], cfg.n_classes)
            cm += m.confusion
        metrics = metrics_from_confusion(cm, cfg.miou_absent)
        rows.append(
            {"name": cfg.name, "mIoU": metrics.miou, "OA": metrics.oa, "config": cfg.to_dict()}
        )
    return rows


def metrics_from_confusion(cm: np.ndarray, absent="exclude") -> Metrics:
    n = cm.shape[0]
    truth = np.repeat(np.arange(n), cm.sum(axis=1))
    pred = np.concatenate([np.repeat(np.arange(n), cm[i]) for i in range(n)])
    return evaluate(pred, truth, n, absent)


def format_ablation(rows) -> str:
    width = max(len(r["name"]) for r in rows)
    out = [f"{'configuration'.ljust(width)} | mIOU%"]
    for r in rows:
        out.append(f"{r['name'].ljust(width)} | {100 * r['mIoU']:.1f}")
    return "\n".join(out) + "\n"


def dump_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=1)
