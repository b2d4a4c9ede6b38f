"""Sensing field, coil array, the 512-triangle mesh, phantoms and rasterization.

All lengths are millimetres. The mesh is built from concentric node circles
around the field centre; node counts are multiples of 16 so the triangulation
is exactly invariant under a rotation by one coil pitch (2*pi/16).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

FIELD_DIAMETER_MM = 200.0
FIELD_RADIUS_MM = FIELD_DIAMETER_MM / 2
N_COILS = 16
N_TRIANGLES = 512
IMAGE_SIZE = 256
PIXEL_MM = FIELD_DIAMETER_MM / IMAGE_SIZE

# Node counts per circle, innermost first. Triangles between circles with
# n_a and n_b nodes: n_a + n_b; central fan: n_0.
# 16 + 48 + 80 + 112 + 128 + 128 = 512.
RING_NODES = (16, 32, 48, 64, 64, 64)
# Angular offset of each circle in half node-pitches (0 or 1). The outer
# circle is unshifted so coils at 2*pi*k/16 sit exactly on nodes.
RING_SHIFT = (1, 0, 1, 0, 1, 0)


@dataclass(frozen=True)
class SensingField:
    diameter: float = FIELD_DIAMETER_MM
    center: tuple[float, float] = (0.0, 0.0)

    @property
    def radius(self) -> float:
        return self.diameter / 2


@dataclass(frozen=True)
class CoilArray:
    count: int
    angles: np.ndarray
    radius: float
    coil_diameter: float = 18.0
    turns: int = 13

    @property
    def positions(self) -> np.ndarray:
        return self.radius * np.stack([np.cos(self.angles), np.sin(self.angles)], axis=1)

    @property
    def loop_length_mm(self) -> float:
        """Effective sensing loop length: turns x coil circumference."""
        return self.turns * math.pi * self.coil_diameter


@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray          # (n_nodes, 2) mm
    triangles: np.ndarray      # (n_tri, 3) int, counter-clockwise
    neighbors: tuple[tuple[int, ...], ...]
    node_perm: np.ndarray = field(repr=False)   # node index after one symmetry step
    tri_perm: np.ndarray = field(repr=False)    # triangle index after one symmetry step

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def areas(self) -> np.ndarray:
        return triangle_areas(self.nodes, self.triangles)

    def rotation_permutation(self, steps: int = 1) -> np.ndarray:
        """Triangle permutation for a rotation by ``steps`` coil pitches.

        Triangle ``i`` rotated lands on triangle ``perm[i]``.
        """
        perm = np.arange(self.n_triangles)
        for _ in range(steps % N_COILS):
            perm = self.tri_perm[perm]
        return perm

    def export_text(self, path: str | Path) -> None:
        """Write nodes ("x y") then triangles ("i j k", zero-based)."""
        lines = [f"{x:.9g} {y:.9g}" for x, y in self.nodes]
        lines += [f"{i} {j} {k}" for i, j, k in self.triangles]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class Phantom:
    shape: str                 # "cylinder" or "prism"
    size: float                # cylinder diameter / prism side, mm
    conductivity: float        # S/m
    position: tuple[float, float] = (0.0, 0.0)
    orientation: float = 0.0   # radians, prism only; 0 = vertex towards +y

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown phantom shape {self.shape!r}")
        if self.conductivity <= 0:
            raise ValueError("phantom conductivity must be positive")
        if self.size < 0:
            raise ValueError("phantom size must be non-negative")

    @property
    def shape_class(self) -> str:
        if self.shape == "cylinder":
            return f"CY-{self.size:g}"
        return "PR"

    @property
    def extent(self) -> float:
        """Largest distance from the phantom centre to its boundary."""
        if self.shape == "cylinder":
            return self.size / 2
        return self.size / math.sqrt(3)

    def vertices(self) -> np.ndarray:
        """Prism corners, counter-clockwise."""
        if self.shape != "prism":
            raise ValueError("only prisms have vertices")
        ang = math.pi / 2 + self.orientation + 2 * math.pi * np.arange(3) / 3
        r = self.extent
        return np.stack([self.position[0] + r * np.cos(ang),
                         self.position[1] + r * np.sin(ang)], axis=1)

    def rotated(self, angle: float) -> "Phantom":
        c, s = math.cos(angle), math.sin(angle)
        x, y = self.position
        return Phantom(self.shape, self.size, self.conductivity,
                       (c * x - s * y, s * x + c * y), self.orientation + angle)

    def inside_field(self, radius: float = FIELD_RADIUS_MM) -> bool:
        if self.shape == "cylinder":
            return math.hypot(*self.position) + self.extent <= radius + 1e-9
        return bool(np.all(np.hypot(*self.vertices().T) <= radius + 1e-9))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean membership for an array of points (..., 2)."""
        pts = np.asarray(pts, dtype=float)
        dx = pts[..., 0] - self.position[0]
        dy = pts[..., 1] - self.position[1]
        if self.size == 0:
            return np.zeros(pts.shape[:-1], dtype=bool)
        if self.shape == "cylinder":
            return dx * dx + dy * dy <= (self.size / 2) ** 2
        v = self.vertices()
        inside = np.ones(pts.shape[:-1], dtype=bool)
        for a, b in ((v[0], v[1]), (v[1], v[2]), (v[2], v[0])):
            cross = (b[0] - a[0]) * (pts[..., 1] - a[1]) - (b[1] - a[1]) * (pts[..., 0] - a[0])
            inside &= cross >= 0
        return inside


SHAPES = ("cylinder", "prism")
SHAPE_IDS = {name: i for i, name in enumerate(SHAPES)}


def triangle_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = nodes[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _stitch_ring(inner: list[int], inner_pos: list[int], outer: list[int],
                 outer_pos: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate the annulus between two closed node circles.

    Positions are integer angles, so the merged angular order (inner first on
    ties) is exact and identical in every symmetry sector. Each node, in that
    order, closes one triangle with the latest node seen on the other circle.
    """
    order = sorted([(p, 0, n) for p, n in zip(inner_pos, inner)]
                   + [(p, 1, n) for p, n in zip(outer_pos, outer)])
    last = {0: None, 1: None}
    for _, side, n in order:  # cyclic predecessors
        last[side] = n
    tris = []
    for _, side, n in order:
        tris.append((last[0], last[1], n))
        last[side] = n
    return tris


def _circle_layout(counts, shifts, radii):
    nodes = [(0.0, 0.0)]
    circles = []
    for n, s, r in zip(counts, shifts, radii):
        idx = list(range(len(nodes), len(nodes) + n))
        ang = 2 * math.pi * (np.arange(n) + 0.5 * s) / n
        nodes += [(r * math.cos(a), r * math.sin(a)) for a in ang]
        circles.append((idx, n, s))
    return nodes, circles


def build_annulus_mesh(counts, shifts, radii):
    """Centre node, a fan to the first circle, then stitched annuli."""
    nodes, circles = _circle_layout(counts, shifts, radii)
    tris = []
    idx0, n0, _ = circles[0]
    for k in range(n0):
        tris.append((0, idx0[k], idx0[(k + 1) % n0]))
    for (ia, na, sa), (ib, nb, sb) in zip(circles[:-1], circles[1:]):
        # angle in units of 1/(2*na*nb) turn
        pa = [(2 * k + sa) * nb for k in range(na)]
        pb = [(2 * k + sb) * na for k in range(nb)]
        tris += _stitch_ring(ia, pa, ib, pb)
    nodes = np.asarray(nodes)
    tris = np.asarray(tris, dtype=np.int64)
    # orient counter-clockwise
    flip = triangle_areas(nodes, tris) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return nodes, tris


def edge_neighbors(triangles: np.ndarray) -> tuple[tuple[int, ...], ...]:
    owners: dict[tuple[int, int], list[int]] = {}
    for t, tri in enumerate(triangles):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            owners.setdefault((min(a, b), max(a, b)), []).append(t)
    nbrs: list[list[int]] = [[] for _ in range(len(triangles))]
    for ts in owners.values():
        if len(ts) > 2:
            raise ValueError("non-manifold edge in triangulation")
        if len(ts) == 2:
            nbrs[ts[0]].append(ts[1])
            nbrs[ts[1]].append(ts[0])
    return tuple(tuple(sorted(n)) for n in nbrs)


def _match_rotation(points: np.ndarray, angle: float) -> np.ndarray:
    from scipy.spatial import cKDTree

    c, s = math.cos(angle), math.sin(angle)
    rot = points @ np.array([[c, s], [-s, c]])
    dist, idx = cKDTree(points).query(rot)
    if dist.max() > 1e-6:
        raise ValueError("point set is not rotation symmetric")
    return idx


def equal_area_radii(counts, outer_radius: float) -> list[float]:
    """Circle radii giving every triangle roughly the same area."""
    per_ring = [counts[0]] + [a + b for a, b in zip(counts[:-1], counts[1:])]
    cum = np.cumsum(per_ring)
    return list(outer_radius * np.sqrt(cum / cum[-1]))


@lru_cache(maxsize=None)
def build_mesh() -> TriMesh:
    """The canonical 512-triangle, 16-fold symmetric mesh of the sensing disk."""
    radii = equal_area_radii(RING_NODES, FIELD_RADIUS_MM)
    nodes, tris = build_annulus_mesh(RING_NODES, RING_SHIFT, radii)
    if len(tris) != N_TRIANGLES:
        raise AssertionError(f"mesh has {len(tris)} triangles")
    node_perm = _match_rotation(nodes, 2 * math.pi / N_COILS)
    key = {tuple(sorted(t)): i for i, t in enumerate(tris.tolist())}
    tri_perm = np.array([key[tuple(sorted(node_perm[t]))] for t in tris])
    for arr in (nodes, tris, node_perm, tri_perm):
        arr.setflags(write=False)
    return TriMesh(nodes, tris, edge_neighbors(tris), node_perm, tri_perm)


def build_coil_array(radius: float = FIELD_RADIUS_MM) -> CoilArray:
    angles = 2 * math.pi * np.arange(N_COILS) / N_COILS
    angles.setflags(write=False)
    return CoilArray(N_COILS, angles, radius)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def pixel_centers(size: int = IMAGE_SIZE) -> np.ndarray:
    """(size, size, 2) pixel-centre coordinates in mm; row 0 is the top (+y)."""
    scale = FIELD_DIAMETER_MM / size
    c = (np.arange(size) + 0.5) * scale - FIELD_RADIUS_MM
    xx, yy = np.meshgrid(c, -c)
    return np.stack([xx, yy], axis=-1)


@lru_cache(maxsize=None)
def disk_mask(size: int = IMAGE_SIZE) -> np.ndarray:
    p = pixel_centers(size)
    m = np.hypot(p[..., 0], p[..., 1]) <= FIELD_RADIUS_MM
    m.setflags(write=False)
    return m


def _check_phantom(phantom: Phantom) -> None:
    if not phantom.inside_field():
        raise ValueError(f"phantom at {phantom.position} leaves the sensing field")


def rasterize_phantom_to_tri(phantom: Phantom, mesh: TriMesh | None = None) -> np.ndarray:
    """Binary triangle vector: 1 where the triangle centroid is inside the phantom."""
    mesh = mesh or build_mesh()
    _check_phantom(phantom)
    return phantom.contains(mesh.centroids).astype(np.float64)


def rasterize_phantom_to_image(phantom: Phantom, size: int = IMAGE_SIZE) -> np.ndarray:
    _check_phantom(phantom)
    img = phantom.contains(pixel_centers(size)) & disk_mask(size)
    return img.astype(np.float64)


def locate_points(mesh: TriMesh, pts: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Triangle index holding each point; ties go to the lowest index.

    Points in the thin slivers between the polygonal mesh boundary and the
    true circle go to the triangle they are least outside of.
    """
    p = mesh.nodes[mesh.triangles]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    out = np.empty(len(pts), dtype=np.int64)
    for s in range(0, len(pts), chunk):
        q = pts[s:s + chunk, None, :]
        l1 = ((b[:, 1] - c[:, 1]) * (q[..., 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (q[..., 1] - c[:, 1])) / det
        l2 = ((c[:, 1] - a[:, 1]) * (q[..., 0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (q[..., 1] - c[:, 1])) / det
        score = np.minimum(np.minimum(l1, l2), 1 - l1 - l2)
        hit = score >= -1e-12
        first = np.argmax(hit, axis=1)
        out[s:s + chunk] = np.where(hit.any(axis=1), first, np.argmax(score, axis=1))
    return out


@lru_cache(maxsize=4)
def _pixel_map(size: int = IMAGE_SIZE) -> np.ndarray:
    mesh = build_mesh()
    inside = disk_mask(size)
    tri = np.full(size * size, -1, dtype=np.int64)
    flat = inside.ravel()
    tri[flat] = locate_points(mesh, pixel_centers(size).reshape(-1, 2)[flat])
    tri = tri.reshape(size, size)
    tri.setflags(write=False)
    return tri


def pixel_triangle_map(mesh: TriMesh | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Triangle index for every pixel, -1 outside the sensing disk."""
    if mesh is not None and mesh is not build_mesh():
        tri = np.full(size * size, -1, dtype=np.int64)
        flat = disk_mask(size).ravel()
        tri[flat] = locate_points(mesh, pixel_centers(size).reshape(-1, 2)[flat])
        return tri.reshape(size, size)
    return _pixel_map(size)


def tri_vector_to_image(v: np.ndarray, mesh: TriMesh | None = None, size: int = IMAGE_SIZE) -> np.ndarray:
    """Paint each pixel with the value of the triangle containing its centre."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != N_TRIANGLES:
        raise ValueError(f"expected {N_TRIANGLES} triangle values, got {v.shape[-1]}")
    pmap = pixel_triangle_map(mesh, size)
    padded = np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)
    return padded[..., pmap]
