import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitbench.geometry import Phantom, build_mesh, rasterize_phantom_to_image
from mitbench.metrics import (EmptyMaskError, as_mask, cd, centroid, iou, smooth_tri,
                              write_metric_rows)


def iou_oracle(r, g):
    inter = union = 0
    for a, b in zip(r.ravel().tolist(), g.ravel().tolist()):
        inter += a and b
        union += a or b
    return 100.0 if union == 0 else 100.0 * inter / union


def centroid_oracle(m):
    xs, ys, k = 0, 0, 0
    for y in range(m.shape[0]):
        for x in range(m.shape[1]):
            if m[y, x]:
                xs, ys, k = xs + x, ys + y, k + 1
    return xs / k, ys / k


def random_masks(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(8, 40)
    density = rng.uniform(0.05, 0.6)
    r = rng.uniform(size=(n, n)) < density
    g = rng.uniform(size=(n, n)) < density
    r[rng.integers(n), rng.integers(n)] = True
    g[rng.integers(n), rng.integers(n)] = True
    return r, g


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_brute_force(seed):
    r, g = random_masks(seed)
    assert iou(r, g) == iou_oracle(r, g)
    (x1, y1), (x2, y2) = centroid_oracle(r), centroid_oracle(g)
    assert centroid(r) == pytest.approx((x1, y1), abs=1e-12)
    assert cd(r, g) == pytest.approx(math.hypot(x1 - x2, y1 - y2), abs=1e-12)


def test_shifted_square_iou():
    a = np.zeros((32, 32), bool)
    b = np.zeros((32, 32), bool)
    a[5:15, 5:15] = True
    b[5:15, 10:20] = True
    assert iou(a, b) == pytest.approx(100 * 50 / 150)
    assert iou(a, b) == iou_oracle(a, b)


def test_shift_three_four_gives_five():
    a = np.zeros((40, 40), bool)
    a[10:20, 8:15] = True
    b = np.roll(a, (4, 3), axis=(0, 1))
    assert cd(a, b) == pytest.approx(5.0, abs=1e-12)


def test_iou_edge_cases():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    assert iou(a, b) == 100.0
    a[0, 0] = True
    b[3, 3] = True
    assert iou(a, b) == 0.0
    assert iou(a, a) == 100.0
    with pytest.raises(ValueError):
        iou(a, np.zeros((4, 5), bool))


def test_centroid_examples():
    m = np.zeros((10, 10), bool)
    m[3, 7] = True
    assert centroid(m) == (7.0, 3.0)
    m = np.zeros((5, 12), bool)
    m[0, 0] = m[0, 10] = True
    assert centroid(m) == (5.0, 0.0)
    with pytest.raises(EmptyMaskError):
        centroid(np.zeros((3, 3), bool))
    with pytest.raises(EmptyMaskError):
        cd(np.zeros((3, 3), bool), np.ones((3, 3), bool))


def test_centred_disk_centroid():
    m = rasterize_phantom_to_image(Phantom("cylinder", 35, 2.0))
    x, y = centroid(m)
    assert abs(x - 127.5) <= 0.5 and abs(y - 127.5) <= 0.5


def test_metrics_reject_non_binary():
    with pytest.raises(ValueError):
        as_mask(np.array([0.0, 0.5]))
    assert as_mask(np.array([0, 1])).dtype == bool


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_properties(seed):
    r, g = random_masks(seed)
    h = random_masks(seed + 1)[0][:r.shape[0], :r.shape[1]]
    if h.shape != r.shape or not h.any():
        return
    assert 0 <= iou(r, g) <= 100
    assert iou(r, g) == iou(g, r)
    assert (iou(r, g) == 100) == np.array_equal(r, g)
    assert cd(r, g) == pytest.approx(cd(g, r))
    assert cd(r, h) <= cd(r, g) + cd(g, h) + 1e-12


def test_smooth_constant_and_impulse():
    mesh = build_mesh()
    assert np.allclose(smooth_tri(np.full(512, 0.7)), 0.7, atol=1e-15)
    i = 100
    v = np.zeros(512)
    v[i] = 1
    out = smooth_tri(v)
    assert out[i] == pytest.approx(1 / (1 + len(mesh.neighbors[i])))
    for j in mesh.neighbors[i]:
        assert out[j] == pytest.approx(1 / (1 + len(mesh.neighbors[j])))
    others = np.setdiff1d(np.arange(512), [i, *mesh.neighbors[i]])
    assert (out[others] == 0).all()


def test_smooth_matches_loop_oracle():
    mesh = build_mesh()
    v = np.random.default_rng(4).uniform(size=512)
    oracle = np.array([np.mean([v[i], *[v[j] for j in mesh.neighbors[i]]]) for i in range(512)])
    assert np.abs(smooth_tri(v) - oracle).max() <= 1e-12


def test_smooth_bounds_sum_and_batch():
    rng = np.random.default_rng(5)
    v = rng.uniform(size=(6, 512))
    out = smooth_tri(v)
    assert out.shape == v.shape
    assert (out.min(axis=1) >= v.min(axis=1) - 1e-15).all()
    assert (out.max(axis=1) <= v.max(axis=1) + 1e-15).all()
    assert np.all(np.abs(out.sum(axis=1) - v.sum(axis=1)) <= 0.05 * v.sum(axis=1))
    assert np.allclose(out[2], smooth_tri(v[2]))
    with pytest.raises(ValueError):
        smooth_tri(np.zeros(500))


def test_metric_csv(tmp_path):
    rows = [{"sample_id": 3, "method": "fcn", "shape_class": "PR", "enhanced": False, "iou": 50.0, "cd": 1.5}]
    write_metric_rows(tmp_path / "m.csv", rows)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "sample_id,method,shape_class,enhanced,iou,cd"
    assert lines[1] == "3,fcn,PR,False,50.0,1.5"
