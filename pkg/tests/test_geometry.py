import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mitbench.dataset import enumerate_positions
from mitbench.geometry import (FIELD_RADIUS_MM, IMAGE_SIZE, N_TRIANGLES, PIXEL_MM, Phantom,
                               build_coil_array, build_mesh, disk_mask, locate_points,
                               pixel_centers, pixel_triangle_map, rasterize_phantom_to_image,
                               rasterize_phantom_to_tri, tri_vector_to_image)
from mitbench.metrics import iou


@pytest.fixture(scope="module")
def mesh():
    return build_mesh()


def _point_in_triangle(p, a, b, c):
    def side(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])
    s1, s2, s3 = side(a, b, p), side(b, c, p), side(c, a, p)
    return (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0)


def test_mesh_has_512_triangles(mesh):
    assert mesh.n_triangles == N_TRIANGLES == 512


def test_mesh_area_close_to_disk(mesh):
    assert abs(mesh.areas.sum() - math.pi * 100 ** 2) / (math.pi * 100 ** 2) < 0.02
    assert (mesh.areas > 0).all()


def test_interior_edges_shared_by_two(mesh):
    count = {}
    for t in mesh.triangles:
        for i in range(3):
            e = tuple(sorted((t[i], t[(i + 1) % 3])))
            count[e] = count.get(e, 0) + 1
    assert set(count.values()) <= {1, 2}
    r = np.hypot(*mesh.nodes.T)
    boundary = [e for e, n in count.items() if n == 1]
    # edges used once all lie on the outer circle
    assert all(abs(r[a] - FIELD_RADIUS_MM) < 1e-9 and abs(r[b] - FIELD_RADIUS_MM) < 1e-9 for a, b in boundary)


def test_rotation_maps_triangle_set_onto_itself(mesh):
    ang = 2 * math.pi / 16
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    moved = mesh.nodes @ rot.T
    tri_sets = {frozenset(map(tuple, np.round(mesh.nodes[t], 6))) for t in mesh.triangles}
    moved_sets = {frozenset(map(tuple, np.round(moved[t], 6))) for t in mesh.triangles}
    assert tri_sets == moved_sets


def test_symmetry_permutation_has_order_16(mesh):
    p1 = mesh.rotation_permutation(1)
    assert sorted(p1) == list(range(512))
    assert (mesh.rotation_permutation(16) == np.arange(512)).all()
    assert not (mesh.rotation_permutation(8) == np.arange(512)).all()


def test_neighbors_share_an_edge(mesh):
    for i, nb in enumerate(mesh.neighbors):
        assert 1 <= len(nb) <= 3
        for j in nb:
            assert len(set(mesh.triangles[i]) & set(mesh.triangles[j])) == 2
            assert i in mesh.neighbors[j]


def test_coil_array():
    coils = build_coil_array()
    assert coils.count == 16
    assert coils.angles[0] == 0
    assert coils.angles[4] == pytest.approx(math.pi / 2)
    assert np.allclose(np.hypot(*coils.positions.T), 100.0)
    assert np.allclose(np.diff(coils.angles), 2 * math.pi / 16)


def test_cylinder_label_matches_centroid_oracle(mesh):
    ph = Phantom("cylinder", 30, 2.0)
    lab = rasterize_phantom_to_tri(ph, mesh)
    oracle = sum(1 for x, y in mesh.centroids if x * x + y * y <= 15 ** 2)
    assert lab.sum() == oracle == 16   # frozen; the central fan of this mesh
    assert set(np.unique(lab)) <= {0.0, 1.0}


def test_phantom_missing_every_centroid_gives_zeros(mesh):
    # tiny cylinder between centroids: pick a point far from all of them
    lab = rasterize_phantom_to_tri(Phantom("cylinder", 0.5, 1.0, (0.0, 0.0)), mesh)
    assert lab.sum() == 0


@pytest.mark.parametrize("k", [1, 3, 7])
def test_label_rotates_with_mesh_symmetry(mesh, k):
    ph = Phantom("prism", 40, 2.0, (30.0, -12.0), 0.2)
    lab = rasterize_phantom_to_tri(ph, mesh)
    rot = rasterize_phantom_to_tri(ph.rotated(2 * math.pi * k / 16), mesh)
    perm = mesh.rotation_permutation(k)
    expected = np.zeros(512)
    expected[perm] = lab
    assert (rot == expected).all()


def test_phantom_outside_field_rejected(mesh):
    with pytest.raises(ValueError):
        rasterize_phantom_to_tri(Phantom("cylinder", 30, 2.0, (90.0, 0.0)), mesh)
    with pytest.raises(ValueError):
        rasterize_phantom_to_image(Phantom("prism", 40, 2.0, (0.0, 90.0)))


def test_cylinder_image_area():
    img = rasterize_phantom_to_image(Phantom("cylinder", 30, 2.0))
    assert img.shape == (IMAGE_SIZE, IMAGE_SIZE)
    assert abs(img.sum() - math.pi * (15 / PIXEL_MM) ** 2) / (math.pi * (15 / PIXEL_MM) ** 2) < 0.01


def test_prism_image_area_and_orientation():
    ph = Phantom("prism", 40, 2.0)
    img = rasterize_phantom_to_image(ph)
    analytic = math.sqrt(3) / 4 * 40 ** 2 / PIXEL_MM ** 2
    assert abs(img.sum() - analytic) / analytic < 0.01
    # vertex towards +y: the top rows of the shape are narrower than the bottom ones
    rows = np.nonzero(img.any(axis=1))[0]
    assert img[rows[0]].sum() < img[rows[-1]].sum()


def test_degenerate_phantom_image_is_empty():
    assert rasterize_phantom_to_image(Phantom("cylinder", 0.0, 1.0)).sum() == 0


def test_tri_vector_to_image_constants(mesh):
    ones = tri_vector_to_image(np.ones(512), mesh)
    assert (ones == disk_mask()).all()
    assert tri_vector_to_image(np.zeros(512), mesh).sum() == 0
    with pytest.raises(ValueError):
        tri_vector_to_image(np.ones(500), mesh)


def test_pixel_map_against_brute_force(mesh):
    pmap = pixel_triangle_map(mesh)
    centres = pixel_centers()
    rng = np.random.default_rng(3)
    inside = np.argwhere(disk_mask())
    for r, c in inside[rng.choice(len(inside), 60, replace=False)]:
        p = centres[r, c]
        hits = [i for i, t in enumerate(mesh.triangles) if _point_in_triangle(p, *mesh.nodes[t])]
        if hits:
            assert pmap[r, c] == min(hits)
    assert (pmap[~disk_mask()] == -1).all()
    assert (pmap[disk_mask()] >= 0).all()


def test_point_location_tie_goes_to_lowest_index(mesh):
    # a shared node belongs to several triangles; the lowest index wins
    node = 0
    owners = [i for i, t in enumerate(mesh.triangles) if node in t]
    assert locate_points(mesh, mesh.nodes[[node]])[0] == min(owners)


def test_export_text(mesh, tmp_path):
    path = tmp_path / "mesh.txt"
    mesh.export_text(path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(mesh.nodes) + 512
    assert [int(v) for v in lines[len(mesh.nodes)].split()] == list(mesh.triangles[0])


def test_centred_rendering_iou_oracle(mesh):
    # measured discretisation error of the rendering for centred phantoms
    expected = {"CY-30": 73.9795918367347, "CY-35": 100.0, "PR": 62.45353159851301}
    for ph in (Phantom("cylinder", 30, 2.0), Phantom("cylinder", 35, 3.0), Phantom("prism", 40, 2.0)):
        got = iou(tri_vector_to_image(rasterize_phantom_to_tri(ph, mesh), mesh),
                  rasterize_phantom_to_image(ph))
        assert got == pytest.approx(expected[ph.shape_class], abs=1e-9)


@pytest.mark.xfail(strict=True, reason="512 near-uniform triangles (about 61 mm^2 each) cannot "
                   "resolve a 30-40 mm phantom to IoU 0.8; measured 0.55-0.76 on the desk grid")
def test_rendering_iou_at_least_point_eight_for_all_in_field_phantoms(mesh):
    worst = 100.0
    for shape, size in (("cylinder", 30), ("cylinder", 35), ("prism", 40)):
        for pos in enumerate_positions(size, 12.0, shape):
            ph = Phantom(shape, size, 2.0, pos)
            worst = min(worst, iou(tri_vector_to_image(rasterize_phantom_to_tri(ph, mesh), mesh),
                                   rasterize_phantom_to_image(ph)))
    assert worst >= 80.0


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-60, 60), y=st.floats(-60, 60), k=st.integers(0, 15))
def test_rotated_cylinder_label_is_permutation(x, y, k):
    mesh = build_mesh()
    ph = Phantom("cylinder", 30, 2.0, (x, y))
    if not ph.inside_field():
        return
    a = rasterize_phantom_to_tri(ph, mesh)
    b = rasterize_phantom_to_tri(ph.rotated(2 * math.pi * k / 16), mesh)
    assert a.sum() == b.sum()
