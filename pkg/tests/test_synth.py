import numpy as np
import pytest

from mugnet.errors import ConfigError, ParameterError
from mugnet.synth import allocate, default_room, parse_recipe, synth_scene

FLOOR_ONLY = """
[scene]
classes = floor

[floor]
type = plane
class = 0
origin = 0 0 0
u = 2 0 0
v = 0 2 0
density = 1000
"""


def test_floor_only_recipe():
    cloud = synth_scene(parse_recipe(FLOOR_ONLY), seed=1)
    assert len(cloud) == 4000  # 4 m^2 at 1000 points / m^2
    assert set(cloud.labels.tolist()) == {0}
    assert cloud.class_names == ["floor"]


def test_same_seed_identical():
    a = synth_scene(default_room(5000), seed=7)
    b = synth_scene(default_room(5000), seed=7)
    c = synth_scene(default_room(5000), seed=8)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.positions, c.positions)


def test_default_room_histogram_matches_areas():
    cloud = synth_scene(default_room(50_000), seed=0)
    assert len(cloud) == 50_000
    # hand areas: floor 8x6, walls 2(8x3)+2(6x3), boxes (top + four sides)
    floor = 48.0
    walls = 2 * 24.0 + 2 * 18.0
    boxes = (1.2 * 0.8 + 2 * 1.2 * 0.8 + 2 * 0.8 * 0.8) + (1.0 + 4 * 0.6)
    total = floor + walls + boxes
    hist = np.bincount(cloud.labels, minlength=3) / len(cloud)
    for got, want in zip(hist, [floor / total, walls / total, boxes / total]):
        assert abs(got - want) <= 0.1 * want


def test_empty_recipe():
    with pytest.raises(ParameterError):
        synth_scene(parse_recipe("[scene]\npoints = 10\n"), seed=0)


def test_recipe_errors():
    with pytest.raises(ConfigError):
        parse_recipe("[a]\ntype = sphere\nclass = 0\n")
    with pytest.raises(ConfigError):
        parse_recipe("[a]\ntype = plane\norigin = 0 0 0\nu = 1 0 0\nv = 0 1 0\n")
    with pytest.raises(ConfigError):
        parse_recipe("[a]\ntype = plane\nclass = 0\norigin = 0 0\nu = 1 0 0\nv = 0 1 0\n")


def test_other_primitives():
    text = """
[scene]
points = 3000
[post]
type = cylinder
class = 0
center = 0 0 0
radius = 0.2
height = 2
[bush]
type = blob
class = 1
center = 3 3 1
sigma = 0.3
"""
    cloud = synth_scene(parse_recipe(text), seed=0)
    assert len(cloud) == 3000
    post = cloud.positions[cloud.labels == 0]
    r = np.hypot(post[:, 0], post[:, 1])
    assert r.max() < 0.25 and post[:, 2].min() > -0.05


def test_allocate_largest_remainder():
    counts = allocate([1, 1, 1], 10)
    assert counts.sum() == 10 and sorted(counts.tolist()) == [3, 3, 4]
    assert allocate([2, 1], 3).tolist() == [2, 1]
