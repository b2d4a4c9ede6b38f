"""Synthetic measurement dataset: generation, binary container, splits."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .forward import (BACKGROUND_SIGMA, DEFAULT_FREQUENCY_HZ, DEFAULT_SNR_DB, MaterialMap,
                      NoiseModel, add_noise, forward)
from .geometry import (FIELD_RADIUS_MM, N_COILS, N_TRIANGLES, SHAPE_IDS, SHAPES, Phantom,
                       build_mesh, rasterize_phantom_to_tri)

MAGIC = b"MITD"
FORMAT_VERSION = 1
DATA_FILE = "dataset.mitd"
MANIFEST_FILE = "manifest.json"

_HEADER = struct.Struct("<4sII")
_META = struct.Struct("<B5f")
_RECORD = _META.size + 4 * (2 * N_COILS * N_COILS + N_TRIANGLES)


@dataclass(frozen=True)
class PhantomSpec:
    shape: str
    size: float
    conductivity: float
    step: float
    repetitions: int

    @property
    def shape_class(self) -> str:
        return Phantom(self.shape, self.size, self.conductivity).shape_class


@dataclass(frozen=True)
class DatasetConfig:
    phantoms: tuple[PhantomSpec, ...]
    snr_db: float = DEFAULT_SNR_DB
    frequency_hz: float = DEFAULT_FREQUENCY_HZ
    background_sigma: float = BACKGROUND_SIGMA
    seed: int = 42

    @classmethod
    def desk(cls, seed: int = 42, **kw) -> "DatasetConfig":
        specs = (PhantomSpec("cylinder", 35.0, 3.0, 12.0, 2),
                 PhantomSpec("cylinder", 30.0, 2.0, 12.0, 2),
                 PhantomSpec("prism", 40.0, 2.0, 12.0, 2))
        return cls(specs, seed=seed, **kw)

    @classmethod
    def paper(cls, seed: int = 42, **kw) -> "DatasetConfig":
        specs = (PhantomSpec("cylinder", 35.0, 3.0, 4.0, 3),
                 PhantomSpec("cylinder", 30.0, 2.0, 4.0, 4),
                 PhantomSpec("prism", 40.0, 2.0, 5.0, 3))
        return cls(specs, seed=seed, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phantoms"] = [asdict(p) for p in self.phantoms]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "phantoms" not in d:
            raise KeyError("dataset config is missing key 'phantoms'")
        names = [f.name for f in fields(PhantomSpec)]
        for p in d["phantoms"]:
            missing = [k for k in names if k not in p]
            if missing:
                raise KeyError(f"dataset config phantom entry is missing key {missing[0]!r}")
        phantoms = tuple(PhantomSpec(**{k: p[k] for k in names}) for p in d.pop("phantoms"))
        return cls(phantoms, **d)

    def background(self) -> MaterialMap:
        return MaterialMap.uniform(self.background_sigma, omega=2 * math.pi * self.frequency_hz)


@dataclass
class Sample:
    frame: np.ndarray       # (16, 16) complex64, noisy differential
    label: np.ndarray       # (512,) float32 in {0, 1}
    phantom: Phantom
    repetition: int = 0

    @property
    def position_key(self) -> tuple:
        return (self.phantom.shape_class, self.phantom.position)


@dataclass
class Dataset:
    samples: list[Sample]
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.manifest)

    def frames(self) -> np.ndarray:
        return np.stack([s.frame for s in self.samples]) if self.samples else np.zeros((0, 16, 16), np.complex64)

    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples]) if self.samples else np.zeros((0, 512), np.float32)


def enumerate_positions(size: float, step: float, shape: str = "cylinder",
                        radius: float = FIELD_RADIUS_MM) -> list[tuple[float, float]]:
    """Grid positions (multiples of ``step``) keeping the phantom in the field."""
    if not step > 0:
        raise ValueError("step must be positive")
    n = int(radius // step)
    out = []
    for iy in range(n, -n - 1, -1):
        for ix in range(-n, n + 1):
            pos = (ix * step, iy * step)
            if Phantom(shape, size, 1.0, pos).inside_field(radius):
                out.append(pos)
    return out


def sample_seed(seed: int, shape_index: int, position_index: int, repetition: int) -> np.random.Generator:
    return np.random.default_rng([seed, shape_index, position_index, repetition])


def generate_samples(config: DatasetConfig) -> list[Sample]:
    mesh = build_mesh()
    bg = config.background()
    f_bg = forward(bg)
    noise = NoiseModel(config.snr_db, config.seed)
    samples = []
    for si, spec in enumerate(config.phantoms):
        for pi, pos in enumerate(enumerate_positions(spec.size, spec.step, spec.shape)):
            ph = Phantom(spec.shape, spec.size, spec.conductivity, pos)
            label = rasterize_phantom_to_tri(ph, mesh).astype(np.float32)
            mat = MaterialMap(np.where(label > 0, spec.conductivity, config.background_sigma),
                              omega=bg.omega)
            diff = forward(mat) - f_bg
            for rep in range(spec.repetitions):
                d = add_noise(diff, noise, sample_seed(config.seed, si, pi, rep)).astype(np.complex64)
                np.fill_diagonal(d, 0)
                samples.append(Sample(d, label, _quantized(ph), rep))
    return samples


def _quantized(ph: Phantom) -> Phantom:
    f = np.float32
    return Phantom(ph.shape, float(f(ph.size)), float(f(ph.conductivity)),
                   (float(f(ph.position[0])), float(f(ph.position[1]))), float(f(ph.orientation)))


# ---------------------------------------------------------------------------
# real <-> complex layout
# ---------------------------------------------------------------------------

def flatten(frame: np.ndarray) -> np.ndarray:
    """16x16 complex -> 16x32 real: real parts left, imaginary parts right."""
    frame = np.asarray(frame)
    return np.concatenate([frame.real, frame.imag], axis=-1)


def unflatten(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.shape[-2:] != (N_COILS, 2 * N_COILS):
        raise ValueError(f"expected (..., 16, 32) array, got {m.shape}")
    return m[..., :N_COILS] + 1j * m[..., N_COILS:]


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

def write_samples(path: str | Path, samples: list[Sample]) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(samples)))
        for s in samples:
            p = s.phantom
            fh.write(_META.pack(SHAPE_IDS[p.shape], p.size, p.conductivity,
                                p.position[0], p.position[1], p.orientation))
            planes = np.concatenate([s.frame.real.ravel(), s.frame.imag.ravel()])
            fh.write(planes.astype("<f4").tobytes())
            fh.write(np.asarray(s.label, dtype="<f4").tobytes())


def read_samples(path: str | Path) -> list[Sample]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ValueError("truncated dataset file")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    if len(buf) != _HEADER.size + count * _RECORD:
        raise ValueError("dataset file size does not match sample count")
    samples = []
    seen: dict[tuple, int] = {}
    off = _HEADER.size
    nf = 2 * N_COILS * N_COILS
    for _ in range(count):
        sid, size, cond, x, y, orient = _META.unpack_from(buf, off)
        off += _META.size
        planes = np.frombuffer(buf, "<f4", nf, off).reshape(2, N_COILS, N_COILS)
        off += 4 * nf
        label = np.frombuffer(buf, "<f4", N_TRIANGLES, off).astype(np.float32)
        off += 4 * N_TRIANGLES
        frame = (planes[0] + 1j * planes[1]).astype(np.complex64)
        ph = Phantom(SHAPES[sid], size, cond, (x, y), orient)
        key = (ph.shape_class, ph.position)
        rep = seen.get(key, 0)
        seen[key] = rep + 1
        samples.append(Sample(frame, label, ph, rep))
    return samples


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_positions(keys: list, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, list, list]:
    """Partition distinct position keys, stratified by shape class."""
    if len(ratios) != 3 or abs(sum(ratios) - 1) > 1e-9 or min(ratios) < 0:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list] = {}
    for k in keys:
        by_class.setdefault(k[0], []).append(k)
    parts: tuple[list, list, list] = ([], [], [])
    for cls in sorted(by_class):
        ks = sorted(set(by_class[cls]))
        order = rng.permutation(len(ks))
        n = len(ks)
        n_val = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        n_train = n - n_val - n_test
        cuts = [0, n_train, n_train + n_val, n]
        for part, lo, hi in zip(parts, cuts[:-1], cuts[1:]):
            part.extend(ks[i] for i in order[lo:hi])
    for name, part, r in zip(("train", "val", "test"), parts, ratios):
        if r > 0 and not part:
            raise ValueError(f"{name} split is empty")
    return parts


def split(samples: list[Sample], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list[int]]:
    """Sample indices per split; every repetition of a position stays together."""
    keys = [s.position_key for s in samples]
    parts = split_positions(keys, ratios, seed)
    lookup = {k: name for name, part in zip(("train", "val", "test"), parts) for k in part}
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i, k in enumerate(keys):
        out[lookup[k]].append(i)
    return out


def generate(config: DatasetConfig, out_dir: str | Path, ratios=(0.8, 0.1, 0.1)) -> Dataset:
    """Simulate every phantom position and repetition; write data and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_samples(config)
    write_samples(out / DATA_FILE, samples)
    splits = split(samples, ratios, config.seed)
    counts = {}
    for s in samples:
        counts[s.phantom.shape_class] = counts.get(s.phantom.shape_class, 0) + 1
    manifest = {
        "format_version": FORMAT_VERSION,
        "data_file": DATA_FILE,
        "sha256": file_sha256(out / DATA_FILE),
        "sample_count": len(samples),
        "config": config.to_dict(),
        "shape_classes": [spec.shape_class for spec in config.phantoms],
        "samples_per_class": counts,
        "split_ratios": list(ratios),
        "splits": splits,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return Dataset(samples, manifest)


def load(data_dir: str | Path) -> Dataset:
    d = Path(data_dir)
    if not (d / MANIFEST_FILE).exists():
        raise FileNotFoundError(f"no {MANIFEST_FILE} in {d}")
    manifest = json.loads((d / MANIFEST_FILE).read_text())
    return Dataset(read_samples(d / manifest.get("data_file", DATA_FILE)), manifest)


def split_datasets(ds: Dataset) -> dict[str, Dataset]:
    return {name: ds.subset(idx) for name, idx in ds.manifest["splits"].items()}
