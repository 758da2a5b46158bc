import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from vitastar import gridmap as gm
from vitastar.gridmap import OccupancyMap, PathMap, PlanningProblem, ProbabilisticGrid


def write_gray(path, pixels):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


# occupancy conversion -----------------------------------------------------------

@pytest.mark.parametrize("p,t,expected", [(100, 50, 1), (0, 50, 0), (50, 50, 1), (49, 50, 0)])
def test_from_probabilistic_cases(p, t, expected):
    grid = ProbabilisticGrid(1, 1, np.array([p]))
    assert gm.from_probabilistic(grid, t).cells[0, 0] == expected


@pytest.mark.parametrize("t", [-1, 100.5])
def test_threshold_out_of_range(t):
    with pytest.raises(ValueError):
        gm.from_probabilistic(ProbabilisticGrid(1, 1, np.array([3])), t)


def test_probabilistic_grid_validation():
    with pytest.raises(gm.MapFormatError):
        ProbabilisticGrid(1, 2, np.array([0, 101]))
    with pytest.raises(gm.MapFormatError):
        ProbabilisticGrid(2, 2, np.array([0, 1, 2]))


@settings(max_examples=100, deadline=None)
@given(probs=arrays(np.int64, (4, 6), elements=st.integers(0, 100)),
       t1=st.integers(0, 100), t2=st.integers(0, 100))
def test_threshold_monotone(probs, t1, t2):
    lo, hi = sorted((t1, t2))
    grid = ProbabilisticGrid(4, 6, probs)
    a, b = gm.from_probabilistic(grid, lo).cells, gm.from_probabilistic(grid, hi).cells
    assert np.all(b <= a)  # raising t never adds obstacles


def test_grid_json_round_trip(tmp_path):
    grid = ProbabilisticGrid(2, 3, np.array([0, 10, 50, 51, 99, 100]))
    gm.save_grid_json(grid, tmp_path / "g.json")
    payload = json.loads((tmp_path / "g.json").read_text())
    assert payload == {"height": 2, "width": 3, "probs": [0, 10, 50, 51, 99, 100]}
    occ = gm.load_map(tmp_path / "g.json", threshold=50)
    assert occ.cells.tolist() == [[0, 0, 1], [1, 1, 1]]


# images ---------------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".pgm", ".png"])
def test_white_image_is_free(tmp_path, suffix):
    write_gray(tmp_path / f"w{suffix}", np.full((4, 4), 255))
    occ = gm.load_image(tmp_path / f"w{suffix}", 128)
    assert occ.shape == (4, 4) and occ.cells.sum() == 0


def test_black_image_is_blocked(tmp_path):
    write_gray(tmp_path / "b.png", np.zeros((3, 5)))
    assert gm.load_image(tmp_path / "b.png").cells.tolist() == [[1] * 5] * 3


def test_checkerboard(tmp_path):
    board = (np.indices((4, 4)).sum(axis=0) % 2) * 255
    write_gray(tmp_path / "c.pgm", board)
    occ = gm.load_image(tmp_path / "c.pgm")
    np.testing.assert_array_equal(occ.cells, (board == 0).astype(np.uint8))


def test_cutoff_is_strict(tmp_path):
    write_gray(tmp_path / "e.png", [[127, 128]])
    assert gm.load_image(tmp_path / "e.png", 128).cells.tolist() == [[1, 0]]


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(gm.MapFormatError):
        gm.load_image(tmp_path / "bad.png")


def test_sixteen_bit_image_rejected(tmp_path):
    Image.fromarray(np.full((2, 2), 40000, dtype=np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(gm.MapFormatError):
        gm.load_image(tmp_path / "deep.png")


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 1)))
def test_save_load_idempotent(tmp_path_factory, cells):
    d = tmp_path_factory.mktemp("img")
    occ = OccupancyMap(cells)
    gm.save_image(occ, d / "m.pgm")
    once = gm.load_image(d / "m.pgm")
    gm.save_image(once, d / "m2.png")
    assert once == occ and gm.load_image(d / "m2.png") == occ


# data model -----------------------------------------------------------------------

def test_occupancy_validation():
    with pytest.raises(gm.MapFormatError):
        OccupancyMap(np.array([[0, 2]]))
    with pytest.raises(gm.MapFormatError):
        OccupancyMap(np.zeros(4))
    occ = OccupancyMap(np.zeros((2, 3)))
    assert occ.cells.size == occ.height * occ.width
    with pytest.raises(ValueError):
        occ.cells[0, 0] = 1


def test_problem_validation():
    occ = OccupancyMap(np.array([[0, 1, 0]]))
    with pytest.raises(ValueError, match="obstacle"):
        PlanningProblem(occ, (0, 1), (0, 2))
    with pytest.raises(ValueError, match="outside"):
        PlanningProblem(occ, (0, 0), (1, 0))
    with pytest.raises(ValueError, match="differ"):
        PlanningProblem(occ, (0, 0), (0, 0))


def test_pathmap_connectivity():
    pm = PathMap.from_path([(0, 0), (1, 1), (2, 1)], (3, 3))
    assert pm.count() == 3 and pm.connects((0, 0), (2, 1))
    gap = PathMap.from_path([(0, 0), (2, 2)], (3, 3))
    assert not gap.connects((0, 0), (2, 2))


def test_problem_file_round_trip(tmp_path):
    occ = OccupancyMap(np.zeros((3, 4)))
    gm.save_image(occ, tmp_path / "m.pgm")
    p = PlanningProblem(occ, (0, 0), (2, 3)).with_truth([(0, 0), (1, 1), (2, 2), (2, 3)])
    gm.save_problem(p, tmp_path / "p.json", "m.pgm")
    q = gm.load_problem(tmp_path / "p.json")
    assert q == p and q.truth_path == p.truth_path and q.truth == p.truth


# sampling ---------------------------------------------------------------------------

def test_sample_separation_on_empty_map():
    occ = OccupancyMap.empty(100, 100)
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = gm.sample_problem(occ, 0.5, rng)
        assert math.dist(p.start, p.goal) >= 70.71


def test_sample_forced_pair():
    p = gm.sample_problem(OccupancyMap.empty(1, 2), 0.0, np.random.default_rng(3))
    assert {p.start, p.goal} == {(0, 0), (0, 1)}


def test_sample_deterministic():
    occ = gm.random_map(20, 20, 0.25, np.random.default_rng(1))
    a = gm.sample_problem(occ, 0.5, np.random.default_rng(42))
    b = gm.sample_problem(occ, 0.5, np.random.default_rng(42))
    assert (a.start, a.goal) == (b.start, b.goal)


def test_sample_exhausted():
    occ = OccupancyMap(np.array([[0, 1, 0]]))  # the two free cells are disconnected
    with pytest.raises(gm.GenerationExhaustedError):
        gm.sample_problem(occ, 0.0, np.random.default_rng(0), max_retries=50)
    with pytest.raises(gm.GenerationExhaustedError):
        gm.sample_problem(OccupancyMap.empty(1, 1), 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), density=st.floats(0.0, 0.4), style=st.sampled_from(["noise", "blocks"]))
def test_sampled_endpoints_free_and_connected(seed, density, style):
    rng = np.random.default_rng(seed)
    occ = gm.random_map(12, 12, density, rng, style)
    try:
        p = gm.sample_problem(occ, 0.3, rng, max_retries=500)
    except gm.GenerationExhaustedError:
        return
    assert occ.is_free(p.start) and occ.is_free(p.goal)
    labels = occ.components()
    assert labels[p.start] == labels[p.goal]
