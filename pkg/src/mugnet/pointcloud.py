"""Point clouds: text/PLY I/O, exact k-NN and eigen-based geometric features."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, ParameterError, ParseError, ValidationError

DEFAULT_FEATURE_K = 10


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    class_names: Optional[list] = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValidationError(f"positions must be N x 3, got {self.positions.shape}")
        if len(self.positions) < 1:
            raise ValidationError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions contain non-finite values")
        n = len(self.positions)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != (n, 3):
                raise ValidationError(f"colors must be {n} x 3, got {self.colors.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValidationError(f"labels must have length {n}, got {self.labels.shape}")
            if np.any(self.labels < 0):
                raise ValidationError("labels must be non-negative")

    def __len__(self):
        return len(self.positions)

    def validate_labels(self, n_classes: int):
        if self.labels is not None and len(self.labels) and self.labels.max() >= n_classes:
            bad = int(np.argmax(self.labels >= n_classes))
            raise ValidationError(
                f"label {int(self.labels[bad])} at point {bad} is >= class count {n_classes}"
            )


@dataclass
class GeometricFeatures:
    linearity: np.ndarray
    planarity: np.ndarray
    scattering: np.ndarray
    verticality: np.ndarray
    elevation: np.ndarray

    NAMES = ("linearity", "planarity", "scattering", "verticality", "elevation")

    def as_array(self) -> np.ndarray:
        """N x 5 matrix in ``NAMES`` order."""
        return np.column_stack([getattr(self, name) for name in self.NAMES])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "GeometricFeatures":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*(np.ascontiguousarray(arr[:, i]) for i in range(5)))

    def __len__(self):
        return len(self.linearity)


# ---------------------------------------------------------------------------
# neighbors and features
# ---------------------------------------------------------------------------


def knn(positions: np.ndarray, k: int, include_self: bool = True):
    """Exact k nearest neighbors via a kd-tree.

    Returns ``(indices, distances)`` of shape N x k sorted by distance.  With
    ``include_self`` the query point itself is the first neighbor.
    """
    n = len(positions)
    extra = 0 if include_self else 1
    if k < 1 or k + extra > n:
        raise ParameterError(f"k={k} is invalid for a cloud of {n} points")
    tree = cKDTree(positions)
    dist, idx = tree.query(positions, k=k + extra)
    dist = np.asarray(dist).reshape(n, k + extra)
    idx = np.asarray(idx).reshape(n, k + extra)
    if not include_self:
        # drop the query point, which is not always in column 0 when duplicates exist
        rows = np.arange(n)[:, None]
        keep = idx != rows
        first_keep = np.cumsum(keep, axis=1) <= k
        mask = keep & first_keep
        idx = idx[mask].reshape(n, k)
        dist = dist[mask].reshape(n, k)
    return idx, dist


def brute_force_knn(positions: np.ndarray, k: int):
    """O(N^2) reference for ``knn(include_self=True)``; returns sorted distances."""
    diff = positions[:, None, :] - positions[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


def geometric_features(cloud: PointCloud, k: int = DEFAULT_FEATURE_K) -> GeometricFeatures:
    """Per-point dimensionality features from the k-NN covariance spectrum.

    With eigenvalues l1 >= l2 >= l3 >= 0, linearity = (l1 - l2)/l1,
    planarity = (l2 - l3)/l1 and scattering = l3/l1.  Verticality is the
    absolute z component of the smallest-eigenvalue eigenvector and elevation
    is z minus the cloud's minimum z.  Coincident neighborhoods (l1 == 0) are
    classified as pure scattering.
    """
    n = len(cloud)
    if k < 3:
        raise ParameterError(f"k must be >= 3, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds the number of points ({n})")
    pos = cloud.positions
    idx, _ = knn(pos, k, include_self=True)
    nbrs = pos[idx]
    # center each neighborhood first; translation only enters through this difference
    local = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / k
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)  # descending
    l1, l2, l3 = evals[:, 0], evals[:, 1], evals[:, 2]

    degenerate = l1 <= 0.0
    safe = np.where(degenerate, 1.0, l1)
    lin = np.where(degenerate, 0.0, (l1 - l2) / safe)
    pla = np.where(degenerate, 0.0, (l2 - l3) / safe)
    sca = np.where(degenerate, 1.0, l3 / safe)
    total = lin + pla + sca
    lin, pla, sca = lin / total, pla / total, sca / total

    normal = evecs[:, :, 0]  # eigh sorts ascending, so column 0 is the smallest
    vert = np.abs(normal[:, 2])
    vert = np.where(degenerate, 0.0, vert)
    elev = pos[:, 2] - pos[:, 2].min()
    return GeometricFeatures(
        np.clip(lin, 0.0, 1.0),
        np.clip(pla, 0.0, 1.0),
        np.clip(sca, 0.0, 1.0),
        np.clip(vert, 0.0, 1.0),
        elev,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _infer_format(path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
        if fmt in ("xyz", "xyz-text", "txt"):
            return "xyz"
        if fmt in ("ply", "ply-ascii"):
            return "ply"
        raise ParameterError(f"unknown cloud format {fmt!r}")
    return "ply" if str(path).lower().endswith(".ply") else "xyz"


def load_cloud(path, format: str | None = None, n_classes: int | None = None) -> PointCloud:
    """Read an ``xyz`` text file or an ASCII PLY file.

    Raises FileNotFoundError for missing files, ParseError (with the 1-based
    line number) for malformed content and ValidationError when a label is
    not below ``n_classes``.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    fmt = _infer_format(path, format)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    cloud = _parse_ply(lines, path) if fmt == "ply" else _parse_xyz(lines, path)
    if n_classes is not None:
        cloud.validate_labels(n_classes)
    return cloud


def _parse_xyz(lines, path) -> PointCloud:
    rows = []
    width = None
    names = None
    for lineno, raw in enumerate(lines, start=1):
        if raw.startswith("# classes:"):
            names = raw.split(":", 1)[1].split() or None
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) not in (3, 4, 6, 7):
            raise ParseError(f"expected 3, 4, 6 or 7 columns, got {len(parts)}", path, lineno)
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise ParseError(f"expected {width} columns, got {len(parts)}", path, lineno)
        try:
            values = [float(p) for p in parts]
        except ValueError:
            bad = next(p for p in parts if not _is_float(p))
            raise ParseError(f"cannot parse {bad!r} as a number", path, lineno) from None
        if width in (4, 7) and not float(values[-1]).is_integer():
            raise ParseError(f"label {parts[-1]!r} is not an integer", path, lineno)
        rows.append(values)
    if not rows:
        raise ParseError("file contains no points", path)
    arr = np.array(rows, dtype=np.float64)
    colors = labels = None
    if width in (6, 7):
        colors = arr[:, 3:6]
        if colors.max(initial=0.0) > 1.0:
            colors = colors / 255.0
    if width in (4, 7):
        labels = arr[:, -1].astype(np.int64)
    return PointCloud(arr[:, :3], colors, labels, names)


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def _parse_ply(lines, path) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    count = None
    props: list[str] = []
    names = None
    in_vertex = False
    end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", path, lineno)
        elif key == "element":
            if len(parts) != 3:
                raise ParseError("malformed element line", path, lineno)
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    count = int(parts[2])
                except ValueError:
                    raise ParseError("vertex count is not an integer", path, lineno) from None
        elif key == "property":
            if in_vertex:
                if parts[1] == "list":
                    raise ParseError("list properties on vertices are unsupported", path, lineno)
                props.append(parts[-1])
        elif key == "end_header":
            end = lineno
            break
        elif key == "comment" and len(parts) > 2 and parts[1] == "classes:":
            names = parts[2:]
        elif key in ("comment", "obj_info"):
            continue
        else:
            raise ParseError(f"unexpected header keyword {key!r}", path, lineno)
    if end is None:
        raise ParseError("missing end_header", path)
    if count is None:
        raise ParseError("no vertex element", path)
    for axis in "xyz":
        if axis not in props:
            raise ParseError(f"vertex property {axis!r} missing", path)
    rows = []
    lineno = end
    for raw in lines[end:]:
        lineno += 1
        if len(rows) == count:
            break
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != len(props):
            raise ParseError(f"expected {len(props)} values, got {len(parts)}", path, lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError("non-numeric vertex value", path, lineno) from None
    if len(rows) != count:
        raise ParseError(f"expected {count} vertices, found {len(rows)}", path)
    arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
    col = {name: i for i, name in enumerate(props)}
    positions = arr[:, [col["x"], col["y"], col["z"]]]
    colors = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = arr[:, [col["red"], col["green"], col["blue"]]] / 255.0
    labels = None
    if "label" in col:
        labels = arr[:, col["label"]].astype(np.int64)
    return PointCloud(positions, colors, labels, names)


def save_cloud(path, cloud: PointCloud, format: str | None = None):
    """Write a cloud as ``xyz`` text (full float precision) or ASCII PLY."""
    fmt = _infer_format(path, format)
    if fmt == "ply":
        _write_ply(path, cloud)
    else:
        _write_xyz(path, cloud)


def _write_xyz(path, cloud: PointCloud):
    cols = [cloud.positions]
    if cloud.colors is not None:
        cols.append(cloud.colors)
    arr = np.hstack(cols)
    with open(path, "w", encoding="utf-8") as fh:
        if cloud.class_names:
            fh.write("# classes: " + " ".join(cloud.class_names) + "\n")
        for i, row in enumerate(arr):
            line = " ".join(repr(float(v)) for v in row)
            if cloud.labels is not None:
                line += f" {int(cloud.labels[i])}"
            fh.write(line + "\n")


def _write_ply(path, cloud: PointCloud):
    n = len(cloud)
    header = ["ply", "format ascii 1.0"]
    if cloud.class_names:
        header.append("comment classes: " + " ".join(cloud.class_names))
    header.append(f"element vertex {n}")
    header += [f"property double {a}" for a in "xyz"]
    if cloud.colors is not None:
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if cloud.labels is not None:
        header.append("property int label")
    header.append("end_header")
    rgb = None
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(n):
            parts = [repr(float(v)) for v in cloud.positions[i]]
            if rgb is not None:
                parts += [str(v) for v in rgb[i]]
            if cloud.labels is not None:
                parts.append(str(int(cloud.labels[i])))
            fh.write(" ".join(parts) + "\n")


def label_colors(labels: np.ndarray) -> np.ndarray:
    """Fixed palette for colorizing predicted labels in PLY output."""
    palette = np.array(
        [
            [0.65, 0.65, 0.65],
            [0.90, 0.30, 0.20],
            [0.20, 0.55, 0.90],
            [0.30, 0.80, 0.35],
            [0.95, 0.80, 0.20],
            [0.60, 0.35, 0.80],
            [0.10, 0.75, 0.75],
            [0.95, 0.55, 0.10],
        ]
    )
    return palette[np.asarray(labels) % len(palette)]


def require_labels(cloud: PointCloud, what: str = "operation"):
    if cloud.labels is None:
        raise ContractError(f"{what} requires a labeled point cloud")
