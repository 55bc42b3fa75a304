"""Batched-inference timing and memory harness."""

from __future__ import annotations

import csv
import io
import statistics
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError
from .model import MuGNet

CSV_COLUMNS = ("batch_size", "scenes", "points", "mean_s", "median_s", "peak_mem_bytes")


@dataclass
class BenchRow:
    batch_size: int
    scenes: int
    points: int
    mean_s: float
    median_s: float
    peak_mem_bytes: int
    times: list = field(default_factory=list, repr=False)


@dataclass
class BenchReport:
    rows: list

    def __post_init__(self):
        sizes = [r.batch_size for r in self.rows]
        if any(b >= a for a, b in zip(sizes[1:], sizes)):
            raise ContractError(f"batch sizes must be strictly increasing, got {sizes}")

    def trend(self) -> dict:
        """Per-scene cost relative to batch size 1 (or the smallest batch)."""
        if not self.rows:
            return {}
        base = self.rows[0]
        per_scene = [r.mean_s / r.batch_size for r in self.rows]
        mems = [r.peak_mem_bytes for r in self.rows]
        return {
            "time_ratio": [r.mean_s / base.mean_s for r in self.rows],
            "per_scene_s": per_scene,
            "sublinear": all(
                r.mean_s < (r.batch_size / base.batch_size) * base.mean_s for r in self.rows[1:]
            ),
            "memory_monotone": all(b >= a for a, b in zip(mems, mems[1:])),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow(
                [r.batch_size, r.scenes, r.points, repr(r.mean_s), repr(r.median_s), r.peak_mem_bytes]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ContractError(f"bench CSV must have columns {CSV_COLUMNS}")
        rows = [
            BenchRow(
                int(d["batch_size"]),
                int(d["scenes"]),
                int(d["points"]),
                float(d["mean_s"]),
                float(d["median_s"]),
                int(d["peak_mem_bytes"]),
            )
            for d in reader
        ]
        return cls(rows)

    def format(self) -> str:
        lines = ["batch  scenes    points    mean_s  median_s   peak_mem_MB"]
        for r in self.rows:
            lines.append(
                f"{r.batch_size:5d}  {r.scenes:6d}  {r.points:8d}  {r.mean_s:8.4f}  "
                f"{r.median_s:8.4f}  {r.peak_mem_bytes / 2**20:12.2f}"
            )
        t = self.trend()
        if t:
            lines.append(f"sublinear time: {t['sublinear']}  monotone memory: {t['memory_monotone']}")
        return "\n".join(lines) + "\n"


def run_batch(model: MuGNet, scenes, workers: int = 1) -> list:
    """Logits for ``scenes``; with ``workers > 1`` contiguous chunks run in threads.

    Every chunk is a disjoint-union pass, and the row-stable matmul makes
    the per-scene logits independent of how scenes are grouped.
    """
    scenes = list(scenes)
    if workers <= 1 or len(scenes) <= 1:
        return model.infer_batch(scenes)
    chunks = [list(c) for c in np.array_split(np.arange(len(scenes)), min(workers, len(scenes)))]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda idx: model.infer_batch([scenes[i] for i in idx]), chunks))
    return [logits for part in parts for logits in part]


def _peak_memory(model, batch, workers) -> int:
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    run_batch(model, batch, workers)
    _, peak = tracemalloc.get_traced_memory()
    if not was_tracing:
        tracemalloc.stop()
    return int(peak - base)


def bench_batched(
    scenes,
    batch_sizes,
    model: MuGNet,
    repeats: int = 5,
    workers: int = 1,
) -> BenchReport:
    """Time batched inference for each batch size (first ``b`` scenes).

    One untimed warm-up per size precedes the timed repetitions, which cycle
    through the sizes.  Peak memory is the tracemalloc peak of a separate pass
    so tracing overhead stays out of the timings.
    """
    scenes = list(scenes)
    sizes = [int(b) for b in batch_sizes]
    if not sizes:
        raise ParameterError("no batch sizes given")
    if any(b < 1 for b in sizes):
        raise ParameterError(f"batch sizes must be >= 1, got {sizes}")
    if max(sizes) > len(scenes):
        raise ParameterError(f"batch size {max(sizes)} exceeds the {len(scenes)} available scenes")
    if repeats < 5:
        raise ParameterError("at least 5 timed repetitions are required")
    batches = [scenes[:b] for b in sizes]
    for batch in batches:
        run_batch(model, batch, workers)
    # round-robin over batch sizes so drifting machine load hits all of them alike
    times = [[] for _ in sizes]
    for _ in range(repeats):
        for i, batch in enumerate(batches):
            t0 = time.perf_counter()
            run_batch(model, batch, workers)
            times[i].append(time.perf_counter() - t0)
    rows = []
    for b, batch, ts in zip(sizes, batches, times):
        rows.append(
            BenchRow(
                batch_size=b,
                scenes=b,
                points=int(sum(s.graph.num_points for s in batch)),
                mean_s=statistics.fmean(ts),
                median_s=statistics.median(ts),
                peak_mem_bytes=_peak_memory(model, batch, workers),
                times=ts,
            )
        )
    return BenchReport(rows)
