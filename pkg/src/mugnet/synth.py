"""Synthetic labeled scenes sampled from simple geometric primitives.

Recipes are INI-style key/value files.  The ``[scene]`` section holds global
settings; every other section is one primitive::

    [scene]
    points = 50000        ; optional total, split across primitives by area
    noise = 0.005         ; default gaussian noise sigma (meters)
    classes = floor wall box

    [floor]
    type = plane
    class = 0
    origin = 0 0 0
    u = 8 0 0
    v = 0 6 0

Primitive types: ``plane`` (origin, u, v), ``box`` (center of the base,
size, yaw in degrees, optional jitter / random_yaw), ``cylinder`` (center of
the base, radius, height) and ``blob`` (center, sigma).  Each accepts
``class``, ``density`` (points per square meter), ``noise`` and ``color``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParameterError
from .pointcloud import PointCloud

DEFAULT_DENSITY = 400.0
PRIMITIVE_TYPES = ("plane", "box", "cylinder", "blob")

DEFAULT_ROOM = """\
[scene]
points = 50000
noise = 0.005
classes = floor wall box

[floor]
type = plane
class = 0
origin = 0 0 0
u = 8 0 0
v = 0 6 0

[wall_south]
type = plane
class = 1
origin = 0 0 0
u = 8 0 0
v = 0 0 3

[wall_north]
type = plane
class = 1
origin = 0 6 0
u = 8 0 0
v = 0 0 3

[wall_west]
type = plane
class = 1
origin = 0 0 0
u = 0 6 0
v = 0 0 3

[wall_east]
type = plane
class = 1
origin = 8 0 0
u = 0 6 0
v = 0 0 3

[box_a]
type = box
class = 2
center = 2.5 2.0 0
size = 1.2 0.8 0.8
jitter = 0.6
random_yaw = true

[box_b]
type = box
class = 2
center = 5.5 4.0 0
size = 1.0 1.0 0.6
jitter = 0.6
random_yaw = true
"""


@dataclass
class Primitive:
    name: str
    kind: str
    class_id: int
    params: dict
    density: float = DEFAULT_DENSITY
    noise: float | None = None
    color: tuple | None = None


@dataclass
class SceneRecipe:
    primitives: list
    points: int | None = None
    noise: float = 0.005
    class_names: list | None = None
    extra: dict = field(default_factory=dict)


def _vec(text, n, key, section):
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {n} numbers, got {text!r}") from None
    if len(vals) != n:
        raise ConfigError(f"[{section}] {key}: expected {n} numbers, got {len(vals)}")
    return np.array(vals)


_REQUIRED = {
    "plane": ("origin", "u", "v"),
    "box": ("center", "size"),
    "cylinder": ("center", "radius", "height"),
    "blob": ("center", "sigma"),
}
_VECTORS = {"origin": 3, "u": 3, "v": 3, "center": 3, "size": 3}


def parse_recipe(text: str) -> SceneRecipe:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"recipe: {exc}") from None
    scene = cp["scene"] if cp.has_section("scene") else {}
    points = scene.get("points")
    prims = []
    for name in cp.sections():
        if name == "scene":
            continue
        sec = cp[name]
        kind = sec.get("type", "").strip()
        if kind not in PRIMITIVE_TYPES:
            raise ConfigError(f"[{name}] unknown primitive type {kind!r}")
        if "class" not in sec:
            raise ConfigError(f"[{name}] missing class")
        params = {}
        for key in _REQUIRED[kind]:
            if key not in sec:
                raise ConfigError(f"[{name}] missing {key}")
        for key, value in sec.items():
            if key in _VECTORS:
                params[key] = _vec(value, _VECTORS[key], key, name)
            elif key in ("radius", "height", "sigma", "yaw", "jitter"):
                params[key] = float(value)
            elif key == "random_yaw":
                params[key] = sec.getboolean(key)
        color = _vec(sec["color"], 3, "color", name) if "color" in sec else None
        prims.append(
            Primitive(
                name=name,
                kind=kind,
                class_id=sec.getint("class"),
                params=params,
                density=sec.getfloat("density", DEFAULT_DENSITY),
                noise=sec.getfloat("noise") if "noise" in sec else None,
                color=None if color is None else tuple(color),
            )
        )
    names = scene.get("classes")
    return SceneRecipe(
        primitives=prims,
        points=int(points) if points is not None else None,
        noise=float(scene.get("noise", 0.005)),
        class_names=names.split() if names else None,
    )


def load_recipe(path) -> SceneRecipe:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_recipe(fh.read())


def default_room(points: int | None = 50000) -> SceneRecipe:
    recipe = parse_recipe(DEFAULT_ROOM)
    recipe.points = points
    return recipe


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _faces(prim: Primitive, rng) -> list:
    """Resolve a primitive into sampleable faces: (kind, area, params)."""
    p = prim.params
    if prim.kind == "plane":
        u, v = p["u"], p["v"]
        area = float(np.linalg.norm(np.cross(u, v)))
        return [("quad", area, (p["origin"], u, v))]
    if prim.kind == "box":
        center = p["center"].copy()
        jitter = p.get("jitter", 0.0)
        if jitter > 0:
            center[:2] += rng.uniform(-jitter, jitter, size=2)
        yaw = math.radians(p.get("yaw", 0.0))
        if p.get("random_yaw", False):
            yaw = rng.uniform(0.0, 2.0 * math.pi)
        rot = _rotation_z(yaw)
        sx, sy, sz = p["size"]
        base = center + rot @ np.array([-sx / 2, -sy / 2, 0.0])
        ex, ey, ez = rot @ np.array([sx, 0, 0]), rot @ np.array([0, sy, 0]), np.array([0, 0, sz])
        quads = [
            (base + ez, ex, ey),  # top
            (base, ex, ez),
            (base + ey, ex, ez),
            (base, ey, ez),
            (base + ex, ey, ez),
        ]
        return [("quad", float(np.linalg.norm(np.cross(a, b))), (o, a, b)) for o, a, b in quads]
    if prim.kind == "cylinder":
        r, h = p["radius"], p["height"]
        return [
            ("tube", 2 * math.pi * r * h, (p["center"], r, h)),
            ("disc", math.pi * r * r, (p["center"] + np.array([0, 0, h]), r)),
        ]
    sigma = p["sigma"]
    return [("blob", 4 * math.pi * sigma * sigma, (p["center"], sigma))]


def _sample_face(kind, params, n, rng):
    if kind == "quad":
        o, u, v = params
        a, b = rng.random((n, 1)), rng.random((n, 1))
        return o + a * u + b * v
    if kind == "tube":
        c, r, h = params
        t = rng.uniform(0, 2 * math.pi, n)
        z = rng.uniform(0, h, n)
        return c + np.column_stack([r * np.cos(t), r * np.sin(t), z])
    if kind == "disc":
        c, r = params
        t = rng.uniform(0, 2 * math.pi, n)
        rad = r * np.sqrt(rng.random(n))
        return c + np.column_stack([rad * np.cos(t), rad * np.sin(t), np.zeros(n)])
    c, sigma = params
    return c + rng.normal(0.0, sigma, (n, 3))


def allocate(weights, total: int) -> np.ndarray:
    """Split ``total`` into integer counts proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ParameterError("cannot allocate points over zero total area")
    exact = w / w.sum() * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short:
        order = np.lexsort((np.arange(len(w)), -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def expected_class_fractions(recipe: SceneRecipe) -> dict:
    """Area share of every class (the oracle for sampled class histograms)."""
    rng = np.random.default_rng(0)  # poses don't change areas
    areas: dict = {}
    for prim in recipe.primitives:
        for _, area, _ in _faces(prim, rng):
            areas[prim.class_id] = areas.get(prim.class_id, 0.0) + area
    total = sum(areas.values())
    return {c: a / total for c, a in areas.items()}


def synth_scene(recipe: SceneRecipe, seed: int = 0) -> PointCloud:
    """Sample a labeled cloud from ``recipe``; identical seeds give identical clouds."""
    if recipe is None or not recipe.primitives:
        raise ParameterError("scene recipe lists no primitives")
    rng = np.random.default_rng(seed)
    faces = []
    for prim in recipe.primitives:
        for kind, area, params in _faces(prim, rng):
            faces.append((prim, kind, area, params))
    areas = np.array([f[2] for f in faces])
    if recipe.points is not None:
        if recipe.points < 1:
            raise ParameterError(f"points must be >= 1, got {recipe.points}")
        counts = allocate(areas, recipe.points)
    else:
        counts = np.array([int(round(f[0].density * f[2])) for f in faces])
        if counts.sum() < 1:
            raise ParameterError("recipe densities produce no points")

    any_color = any(p.color is not None for p in recipe.primitives)
    pos, lab, col = [], [], []
    for (prim, kind, _, params), n in zip(faces, counts):
        if n == 0:
            continue
        pts = _sample_face(kind, params, int(n), rng)
        sigma = recipe.noise if prim.noise is None else prim.noise
        if sigma > 0:
            pts = pts + rng.normal(0.0, sigma, pts.shape)
        pos.append(pts)
        lab.append(np.full(int(n), prim.class_id, dtype=np.int64))
        if any_color:
            c = np.array(prim.color if prim.color is not None else (0.5, 0.5, 0.5))
            col.append(np.tile(c, (int(n), 1)))
    return PointCloud(
        np.vstack(pos),
        np.vstack(col) if any_color else None,
        np.concatenate(lab),
        list(recipe.class_names) if recipe.class_names else None,
    )
