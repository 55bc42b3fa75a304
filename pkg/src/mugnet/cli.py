"""Command-line entry point: synth, cluster, train, infer, eval, bench.

Exit status: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    ParameterError,
    ParseError,
    TrainingDivergedError,
    ValidationError,
)
from .model import load_checkpoint, predict_points, prepare_scene, save_checkpoint
from .partition import (
    DEFAULT_KNN,
    DEFAULT_LAMBDA,
    DEFAULT_MIN_SIZE,
    compression_ratio,
    load_graph,
    partition,
    purity,
    save_graph,
)
from .pointcloud import PointCloud, geometric_features, label_colors, load_cloud, save_cloud
from .synth import default_room, load_recipe, synth_scene
from .training import (
    TrainConfig,
    dump_history,
    evaluate,
    format_metrics,
    load_train_config,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("mugnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _classes(text):
    """``--classes``: a count (``3``) or names (``floor,wall,box``)."""
    text = text.strip()
    if text.isdigit():
        n = int(text)
        if n < 1:
            raise argparse.ArgumentTypeError("class count must be >= 1")
        return [f"class{i}" for i in range(n)]
    names = [t for t in text.replace(",", " ").split() if t]
    if not names:
        raise argparse.ArgumentTypeError("empty class list")
    return names


def _batch_sizes(text):
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad batch sizes {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mugnet", description="Superpoint-graph pointcloud segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    fmt = dict(choices=("xyz", "ply"), default=None, help="cloud file format (default: from extension)")

    p = sub.add_parser("synth", help="sample a labeled synthetic scene from a recipe")
    p.add_argument("--config", help="scene recipe (default: built-in room)")
    p.add_argument("--output", required=True, help="output cloud file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, help="override the recipe's point total")
    p.add_argument("--format", **fmt)

    p = sub.add_parser("cluster", help="partition a cloud into a superpoint graph file")
    p.add_argument("--input", required=True, help="input cloud (xyz or ply)")
    p.add_argument("--output", required=True, help="output graph file")
    p.add_argument("--config", help="INI with a [partition] section: knn, lambda, min_size, feature_k")
    p.add_argument("--classes", type=_classes, help="class count or names (validates labels)")
    p.add_argument("--format", **fmt)

    p = sub.add_parser("train", help="train on graph files, write a checkpoint and history")
    p.add_argument("--input", required=True, nargs="+", help="graph files with labels")
    p.add_argument("--output", required=True, help="checkpoint path (history goes next to it)")
    p.add_argument("--config", help="training config (key = value)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--classes", type=_classes, help="class count or names")
    p.add_argument("--epochs", type=int, help="override the config epoch count")

    p = sub.add_parser("infer", help="label a graph file's cloud with a trained model")
    p.add_argument("--input", required=True, help="graph file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True, help="labeled cloud (ply output is colorized)")
    p.add_argument("--format", **fmt)

    p = sub.add_parser("eval", help="compare predicted and true labels")
    p.add_argument("--input", required=True, help="predicted cloud (labels column)")
    p.add_argument("--truth", required=True, help="ground-truth cloud or graph file")
    p.add_argument("--output", help="metrics JSON")
    p.add_argument("--classes", type=_classes, help="class count or names")
    p.add_argument("--config", help="training config (reads miou_absent)")
    p.add_argument("--format", **fmt)

    p = sub.add_parser("bench", help="time batched inference over graph files")
    p.add_argument("--input", required=True, nargs="+", help="graph files (batch i uses the first i)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-sizes", type=_batch_sizes, default=[1])
    p.add_argument("--output", help="CSV report")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--copies", type=int, default=1, help="repeat the input list this many times")
    return parser


def _read_partition_config(path):
    settings = {"knn": DEFAULT_KNN, "lambda": DEFAULT_LAMBDA, "min_size": DEFAULT_MIN_SIZE, "feature_k": 10}
    if not path:
        return settings
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such config: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path, encoding="utf-8")
        if cp.has_section("partition"):
            for key, raw in cp["partition"].items():
                if key not in settings:
                    raise ConfigError(f"unknown partition key {key!r}")
                settings[key] = float(raw) if key == "lambda" else int(raw)
    except (configparser.Error, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return settings


def _is_graph_file(path):
    with open(path, "rb") as fh:
        return fh.read(1) == b"{"


def _truth_cloud(path, n_classes):
    if _is_graph_file(path):
        return load_graph(path)[1]
    return load_cloud(path, n_classes=n_classes)


def cmd_synth(args):
    recipe = load_recipe(args.config) if args.config else default_room()
    if args.points is not None:
        if args.points < 1:
            raise ParameterError("--points must be >= 1")
        recipe.points = args.points
    cloud = synth_scene(recipe, args.seed)
    save_cloud(args.output, cloud, args.format)
    print(f"wrote {len(cloud)} points to {args.output}")


def cmd_cluster(args):
    settings = _read_partition_config(args.config)
    n_classes = len(args.classes) if args.classes else None
    cloud = load_cloud(args.input, args.format, n_classes=n_classes)
    if args.classes and cloud.class_names is None:
        cloud.class_names = list(args.classes)
    feats = geometric_features(cloud, settings["feature_k"])
    graph = partition(cloud, feats, settings["knn"], settings["lambda"], settings["min_size"])
    save_graph(args.output, graph, cloud, feats)
    msg = f"{graph.num_nodes} clusters, {graph.num_edges} edges, ratio {compression_ratio(graph):.1f}"
    if cloud.labels is not None:
        msg += f", purity {purity(graph, cloud).mean_purity:.4f}"
    print(msg)


def _train_config(args, n_classes):
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if n_classes is not None:
        changes["n_classes"] = n_classes
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args):
    loaded = [load_graph(path) for path in args.input]
    names = args.classes or next((c.class_names for _, c, _ in loaded if c.class_names), None)
    n_classes = len(names) if names else None
    cfg = _train_config(args, n_classes)
    if n_classes is None:
        n_classes = cfg.n_classes
    scenes = []
    for path, (graph, cloud, feats) in zip(args.input, loaded):
        if cloud.labels is None:
            raise ContractError(f"{path}: graph file has no labels to train on")
        cloud.validate_labels(n_classes)
        scenes.append(prepare_scene(graph, cloud, feats, cfg.model_config(), os.path.basename(path)))
    result = train(scenes, cfg)
    extra = {"train_config": cfg.to_dict(), "class_names": list(names) if names else None}
    save_checkpoint(args.output, result.model, extra)
    hist = os.path.splitext(args.output)[0] + ".history.json"
    dump_history(hist, result.history)
    last = result.history[-1]
    print(
        f"trained {cfg.epochs} epochs: loss {last['loss']:.5f}, "
        f"cluster accuracy {last['cluster_accuracy']:.4f}; wrote {args.output} and {hist}"
    )


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint)
    graph, cloud, feats = load_graph(args.input)
    scene = prepare_scene(graph, cloud, feats, model.cfg)
    labels = predict_points(model.infer(scene), graph)
    fmt = args.format or ("ply" if args.output.lower().endswith(".ply") else "xyz")
    colors = label_colors(labels) if fmt == "ply" else cloud.colors
    out = PointCloud(cloud.positions, colors, labels, cloud.class_names)
    save_cloud(args.output, out, fmt)
    counts = np.bincount(labels, minlength=model.cfg.n_classes)
    print(f"labeled {len(labels)} points; per-class counts {counts.tolist()}")


def cmd_eval(args):
    n_classes = len(args.classes) if args.classes else None
    pred = load_cloud(args.input, args.format, n_classes=n_classes)
    truth = _truth_cloud(args.truth, n_classes)
    if pred.labels is None or truth.labels is None:
        raise ContractError("both prediction and truth need a label column")
    names = args.classes or truth.class_names or pred.class_names
    if n_classes is None:
        n_classes = len(names) if names else int(max(pred.labels.max(), truth.labels.max())) + 1
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    metrics = evaluate(pred.labels, truth.labels, n_classes, cfg.miou_absent)
    names = list(names) if names else None
    print(format_metrics(metrics, names), end="")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(metrics.to_dict(names), fh, indent=1, sort_keys=True)


def cmd_bench(args):
    model = load_checkpoint(args.checkpoint)
    if args.copies < 1:
        raise ParameterError("--copies must be >= 1")
    scenes = []
    for path in args.input:
        graph, cloud, feats = load_graph(path)
        scenes.append(prepare_scene(graph, cloud, feats, model.cfg, os.path.basename(path)))
    scenes = scenes * args.copies
    report = bench_mod.bench_batched(scenes, args.batch_sizes, model, repeats=args.repeats)
    print(report.format(), end="")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())


COMMANDS = {
    "synth": cmd_synth,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

_DATA_ERRORS = (
    OSError,
    ParseError,
    ValidationError,
    ConfigError,
    ContractError,
    DimensionError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        COMMANDS[args.command](args)
    except ParameterError as exc:
        print(f"mugnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"mugnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, Exception) as exc:  # noqa: BLE001
        print(f"mugnet {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
