"""2D eddy-current forward model on linear triangles.

Solves  -div(mu^-1 grad A) + j*omega*sigma*A = J0  for the nodal vector
potential A with A = 0 on an outer boundary well beyond the coil circle.
The sensing disk uses the 512-triangle reconstruction mesh; a few
non-conducting exterior rings carry the field out to the Dirichlet boundary.

Coils are point sources/sensors at their mesh node, so a frame entry is
``-j*omega*L*A_e(node_s)`` and the frame is ``-j*omega*L`` times the coil
block of the inverse system matrix. That makes reciprocity exact up to
round-off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (FIELD_RADIUS_MM, N_COILS, N_TRIANGLES, CoilArray, Phantom,
                       TriMesh, build_annulus_mesh, build_coil_array, build_mesh,
                       equal_area_radii, rasterize_phantom_to_tri, RING_NODES, RING_SHIFT)

MU0 = 4e-7 * math.pi
DEFAULT_FREQUENCY_HZ = 1e6
BACKGROUND_SIGMA = 0.1
DEFAULT_SNR_DB = 62.0

# Exterior air rings beyond the coil circle, radii in mm.
EXTERIOR_RADII = (125.0, 156.25, 195.3125, 244.140625, 305.17578125)
EXTERIOR_NODES = 64


class SolverError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (relative residual {residual:.3e})")
        self.residual = residual


class SnrUnmeasurable(ValueError):
    """Raised when samples have zero variance, so Eq.-style SNR is undefined."""


@dataclass(frozen=True, eq=False)
class FemMesh:
    nodes_m: np.ndarray        # (n, 2) metres
    triangles: np.ndarray      # (n_tri, 3); first 512 are the sensing mesh
    boundary: np.ndarray       # Dirichlet nodes
    coil_nodes: np.ndarray     # (16,)
    n_sensing: int = N_TRIANGLES
    # per-triangle local matrices (geometry only)
    grad_grad: np.ndarray = field(repr=False, default=None)   # (n_tri, 3, 3)
    mass: np.ndarray = field(repr=False, default=None)        # (n_tri, 3, 3)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes_m)


@dataclass(frozen=True)
class MaterialMap:
    sigma: np.ndarray                     # (512,) S/m on sensing triangles
    mu: float = MU0
    omega: float = 2 * math.pi * DEFAULT_FREQUENCY_HZ

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (N_TRIANGLES,):
            raise ValueError(f"sigma must have {N_TRIANGLES} entries, got {sigma.shape}")
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be finite and non-negative")
        if not self.mu > 0:
            raise ValueError("permeability must be positive")
        if not self.omega > 0:
            raise ValueError("angular frequency must be positive")
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def uniform(cls, sigma: float = BACKGROUND_SIGMA, **kw) -> "MaterialMap":
        return cls(np.full(N_TRIANGLES, float(sigma)), **kw)

    @classmethod
    def with_phantom(cls, phantom: Phantom, background: float = BACKGROUND_SIGMA,
                     mesh: TriMesh | None = None, **kw) -> "MaterialMap":
        label = rasterize_phantom_to_tri(phantom, mesh)
        return cls(np.where(label > 0, phantom.conductivity, background), **kw)

    def same_setup(self, other: "MaterialMap") -> bool:
        return self.mu == other.mu and self.omega == other.omega


@dataclass(frozen=True, eq=False)
class FemSystem:
    matrix: sp.csc_matrix      # K + j*omega*M, Dirichlet rows/cols eliminated
    free: np.ndarray           # node indices kept in the reduced system
    excitation: np.ndarray     # (n_free, 16) unit currents at the coil nodes
    mat: MaterialMap
    fem: FemMesh

    @property
    def n_nodes(self) -> int:
        return self.fem.n_nodes


def _local_matrices(nodes: np.ndarray, tris: np.ndarray):
    p = nodes[tris]
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    gg = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4 * area[:, None, None])
    mass = (np.ones((3, 3)) + np.eye(3)) * (area / 12)[:, None, None]
    return gg, mass


@lru_cache(maxsize=None)
def build_fem_mesh() -> FemMesh:
    """Sensing mesh plus exterior rings out to the Dirichlet boundary."""
    counts = RING_NODES + (EXTERIOR_NODES,) * len(EXTERIOR_RADII)
    shifts = RING_SHIFT + tuple((k + 1) % 2 for k in range(len(EXTERIOR_RADII)))
    radii = equal_area_radii(RING_NODES, FIELD_RADIUS_MM) + list(EXTERIOR_RADII)
    nodes, tris = build_annulus_mesh(counts, shifts, radii)
    mesh = build_mesh()
    if not (np.array_equal(tris[:N_TRIANGLES], mesh.triangles)
            and np.allclose(nodes[:len(mesh.nodes)], mesh.nodes)):
        raise AssertionError("FEM mesh does not extend the reconstruction mesh")
    nodes_m = nodes * 1e-3
    boundary = np.arange(len(nodes) - EXTERIOR_NODES, len(nodes))
    coils = build_coil_array()
    d = np.linalg.norm(nodes[:, None, :] - coils.positions[None], axis=2)
    coil_nodes = np.argmin(d, axis=0)
    gg, mass = _local_matrices(nodes_m, tris)
    for arr in (nodes_m, tris, boundary, coil_nodes, gg, mass):
        arr.setflags(write=False)
    return FemMesh(nodes_m, tris, boundary, coil_nodes, N_TRIANGLES, gg, mass)


def _scatter(fem: FemMesh, local: np.ndarray) -> sp.csr_matrix:
    t = fem.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = fem.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble(mat: MaterialMap, fem: FemMesh | None = None) -> FemSystem:
    """Assemble S = K + j*omega*M with homogeneous Dirichlet outer boundary."""
    fem = fem or build_fem_mesh()
    sigma_all = np.zeros(len(fem.triangles))
    sigma_all[:fem.n_sensing] = mat.sigma
    K = _scatter(fem, fem.grad_grad / mat.mu)
    M = _scatter(fem, fem.mass * sigma_all[:, None, None])
    S = (K + 1j * mat.omega * M).astype(np.complex128)
    free = np.setdiff1d(np.arange(fem.n_nodes), fem.boundary)
    S = S[free][:, free].tocsc()
    pos = np.searchsorted(free, fem.coil_nodes)
    E = np.zeros((len(free), N_COILS), dtype=np.complex128)
    E[pos, np.arange(N_COILS)] = 1.0
    return FemSystem(S, free, E, mat, fem)


def full_matrix(sys: FemSystem) -> sp.csr_matrix:
    """System matrix on all nodes (before Dirichlet elimination)."""
    fem = sys.fem
    sigma_all = np.zeros(len(fem.triangles))
    sigma_all[:fem.n_sensing] = sys.mat.sigma
    K = _scatter(fem, fem.grad_grad / sys.mat.mu)
    M = _scatter(fem, fem.mass * sigma_all[:, None, None])
    return (K + 1j * sys.mat.omega * M).tocsr()


def _expand(sys: FemSystem, a_free: np.ndarray) -> np.ndarray:
    out = np.zeros((sys.n_nodes,) + a_free.shape[1:], dtype=np.complex128)
    out[sys.free] = a_free
    return out


def solve_all(sys: FemSystem, tol: float = 1e-10) -> np.ndarray:
    """Nodal fields for all 16 excitations, shape (n_nodes, 16)."""
    lu = spla.splu(sys.matrix)
    a = lu.solve(sys.excitation)
    res = np.linalg.norm(sys.matrix @ a - sys.excitation) / np.linalg.norm(sys.excitation)
    if not np.isfinite(res) or res > tol:
        raise SolverError("direct solve did not converge", res)
    return _expand(sys, a)


def solve_excitation(sys: FemSystem, coil: int, tol: float = 1e-10) -> np.ndarray:
    """Nodal complex potential for a unit current at ``coil``."""
    if not 0 <= coil < N_COILS:
        raise IndexError(f"coil index {coil} out of range")
    b = sys.excitation[:, coil]
    a = spla.splu(sys.matrix).solve(b)
    res = np.linalg.norm(sys.matrix @ a - b) / np.linalg.norm(b)
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"solve for coil {coil} did not converge", res)
    return _expand(sys, a)


def sense_factor(omega: float, coils: CoilArray | None = None) -> complex:
    coils = coils or build_coil_array()
    return -1j * omega * coils.loop_length_mm * 1e-3


def sense(field: np.ndarray, omega: float, excited: int | None = None,
          coils: CoilArray | None = None, fem: FemMesh | None = None) -> np.ndarray:
    """Voltages at the 16 coils for one nodal field; the exciting coil reads 0."""
    fem = fem or build_fem_mesh()
    u = sense_factor(omega, coils) * np.asarray(field)[fem.coil_nodes]
    if excited is not None:
        u = u.copy()
        u[excited] = 0
    return u


def frame_from_fields(fields: np.ndarray, omega: float, fem: FemMesh | None = None) -> np.ndarray:
    fem = fem or build_fem_mesh()
    f = sense_factor(omega) * fields[fem.coil_nodes].T   # row = excitation
    np.fill_diagonal(f, 0)
    return f


def forward(mat: MaterialMap) -> np.ndarray:
    """16x16 complex frame; entry (e, s) is coil s sensing under excitation e."""
    sys = assemble(mat)
    return frame_from_fields(solve_all(sys), mat.omega, sys.fem)


def differential_frame(mat: MaterialMap, background: MaterialMap) -> np.ndarray:
    if not mat.same_setup(background):
        raise ValueError("material maps use different mu/omega")
    if np.array_equal(mat.sigma, background.sigma):
        return np.zeros((N_COILS, N_COILS), dtype=np.complex128)
    return forward(mat) - forward(background)


def interpolate(field: np.ndarray, pts_mm: np.ndarray, fem: FemMesh | None = None) -> np.ndarray:
    """Piecewise-linear interpolation of a nodal field at points (mm)."""
    from .geometry import locate_points, TriMesh as _TM
    fem = fem or build_fem_mesh()
    nodes = fem.nodes_m * 1e3
    pseudo = _TM(nodes, fem.triangles, (), np.empty(0), np.empty(0))
    pts = np.asarray(pts_mm, dtype=float)
    idx = locate_points(pseudo, pts)
    p = nodes[fem.triangles[idx]]
    a, b, c = p[:, 0], p[:, 1], p[:, 2]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    l1 = ((b[:, 1] - c[:, 1]) * (pts[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (pts[:, 1] - c[:, 1])) / det
    l2 = ((c[:, 1] - a[:, 1]) * (pts[:, 0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (pts[:, 1] - c[:, 1])) / det
    w = np.stack([l1, l2, 1 - l1 - l2], axis=1)
    return (field[fem.triangles[idx]] * w).sum(axis=1)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    snr_db: float = DEFAULT_SNR_DB
    seed: int = 0

    def __post_init__(self):
        if not self.snr_db > 0:
            raise ValueError("SNR target must be positive")


def compute_snr(samples) -> float:
    """10*log10(mean^2 / variance) of repeated real measurements."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two samples")
    v = x.var()
    if v == 0:
        raise SnrUnmeasurable("zero variance: SNR is not measurable")
    m = x.mean()
    if m == 0:
        return -math.inf
    return 10 * math.log10(m * m / v)


def add_noise(frame: np.ndarray, model: NoiseModel, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add complex Gaussian noise with per-entry std |entry| * 10^(-SNR/20).

    Each of the real and imaginary parts gets that std, so the modulus of a
    repeated measurement has variance ~ std^2 and its SNR hits the target.
    An infinite target disables noise.
    """
    frame = np.asarray(frame, dtype=np.complex128)
    if math.isinf(model.snr_db):
        return frame.copy()
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    std = np.abs(frame) * 10 ** (-model.snr_db / 20)
    noise = rng.standard_normal(frame.shape) + 1j * rng.standard_normal(frame.shape)
    return frame + std * noise


def with_sigma(mat: MaterialMap, sigma: np.ndarray) -> MaterialMap:
    return replace(mat, sigma=np.asarray(sigma, dtype=np.float64))
