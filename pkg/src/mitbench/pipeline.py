"""Experiment orchestration: data, training of all methods, GAN enhancement, reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
import torch

from . import baselines, gan, mitnet
from .dataset import DatasetConfig, Dataset, MANIFEST_FILE, generate, load, split_datasets
from .geometry import rasterize_phantom_to_image, tri_vector_to_image
from .metrics import EmptyMaskError, cd, iou, smooth_tri

log = logging.getLogger(__name__)

METHODS = ("mitnet", "fcn", "sae", "nr")
CHECKPOINTS = {"mitnet": "ccnn.pt", "fcn": "fcn.pt", "sae": "sae.pt", "gan": "gan.pt"}
PAPER_ANCHOR = "# paper reference (private hardware data, not reproducible here): MITNet 82.25% IoU / 3.31 px CD"
REPORT_FIELDS = ("method", "shape_class", "enhanced", "mean_iou", "mean_cd", "n", "n_cd_undefined")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    methods: tuple[str, ...] = METHODS
    mitnet: mitnet.MitnetConfig = field(default_factory=mitnet.MitnetConfig)
    dense: baselines.DenseConfig = field(default_factory=baselines.DenseConfig)
    nr: baselines.NrConfig = field(default_factory=baselines.NrConfig)
    gan: gan.GanConfig = field(default_factory=gan.GanConfig.desk)
    gan_samples_per_method: int | None = 40    # training conditions drawn per method (None: all)
    gan_identity_fraction: float = 0.1         # extra (truth, truth) pairs, relative to the condition count
    seed: int = 42

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if not 0 <= self.gan_identity_fraction < 1:
            raise ValueError("gan_identity_fraction must be in [0, 1)")

    @classmethod
    def desk(cls, seed: int = 42) -> "ExperimentConfig":
        return cls(DatasetConfig.desk(seed), seed=seed).reseeded(seed)

    @classmethod
    def paper(cls, seed: int = 42) -> "ExperimentConfig":
        cfg = cls(DatasetConfig.paper(seed), gan=gan.GanConfig(), gan_samples_per_method=None, seed=seed)
        return cfg.reseeded(seed)

    def reseeded(self, seed: int) -> "ExperimentConfig":
        """Propagate one seed into every stochastic component."""
        d = self.to_dict()
        d["seed"] = seed
        d["dataset"]["seed"] = seed
        for k in ("mitnet", "dense", "gan"):
            d[k]["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "methods": list(self.methods),
            "mitnet": self.mitnet.to_dict(),
            "dense": self.dense.to_dict(),
            "nr": asdict(self.nr),
            "gan": self.gan.to_dict(),
            "gan_samples_per_method": self.gan_samples_per_method,
            "gan_identity_fraction": self.gan_identity_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(
                DatasetConfig.from_dict(d["dataset"]),
                methods=tuple(d.get("methods", METHODS)),
                mitnet=mitnet.MitnetConfig.from_dict(d.get("mitnet", {})),
                dense=baselines.DenseConfig.from_dict(d.get("dense", {})),
                nr=baselines.NrConfig(**d.get("nr", {})),
                gan=gan.GanConfig.from_dict(d.get("gan", {})),
                gan_samples_per_method=d.get("gan_samples_per_method", 40),
                gan_identity_fraction=d.get("gan_identity_fraction", 0.1),
                seed=d.get("seed", 42),
            )
        except KeyError as exc:
            raise KeyError(f"experiment config is missing key {exc.args[0]}") from None


def load_config(path: str | Path | None, seed: int | None = None, paper_scale: bool = False) -> ExperimentConfig:
    """JSON config file, or the desk/paper defaults when no path is given."""
    if path is None:
        cfg = ExperimentConfig.paper() if paper_scale else ExperimentConfig.desk()
    else:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        cfg = ExperimentConfig.from_dict(json.loads(p.read_text()))
    return cfg.reseeded(seed) if seed is not None else cfg


def provenance(cfg: ExperimentConfig, extra: dict | None = None) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "torch": torch.__version__},
        "torch_threads": torch.get_num_threads(),
        **(extra or {}),
    }


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def ensure_dataset(cfg: ExperimentConfig, data_dir: str | Path) -> Dataset:
    """Load the dataset in ``data_dir``, generating it first when absent."""
    d = Path(data_dir)
    if (d / MANIFEST_FILE).exists():
        return load(d)
    return generate(cfg.dataset, d)


def truth_images(split: Dataset) -> np.ndarray:
    return np.stack([rasterize_phantom_to_image(s.phantom) for s in split.samples])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _loss_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def train_method(method: str, cfg: ExperimentConfig, splits: dict[str, Dataset], out_dir: Path):
    """Train one learned reconstructor, write its checkpoint and loss CSV."""
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    if method == "mitnet":
        model, hist = mitnet.train_ccnn(splits["train"], splits["val"], mitnet.MitnetConfig.from_dict(cfg.mitnet.to_dict()))
        mitnet.save_mitnet(out_dir / CHECKPOINTS[method], model)
    elif method in ("fcn", "sae"):
        trainer = baselines.train_fcn if method == "fcn" else baselines.train_sae
        model, hist = trainer(splits["train"], splits["val"], baselines.DenseConfig.from_dict(cfg.dense.to_dict()))
        baselines.save_dense(out_dir / CHECKPOINTS[method], method, model)
    else:
        raise ValueError(f"{method} is not a trainable reconstructor")
    _loss_csv(out_dir / f"{method}_losses.csv", hist.rows)
    log.info("trained %s in %.1f s (best epoch %d)", method, time.monotonic() - t0, hist.best_epoch)
    return model


def load_reconstructor(method: str, ckpt_dir: str | Path | None):
    if method == "nr":
        return None
    if ckpt_dir is None:
        raise ValueError(f"{method} needs a checkpoint directory")
    path = Path(ckpt_dir) / CHECKPOINTS[method]
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    if method == "mitnet":
        return mitnet.load_mitnet(path)
    return baselines.load_dense(path, method)


def reconstruct_vectors(method: str, model, frames: np.ndarray, nr_cfg: baselines.NrConfig | None = None) -> np.ndarray:
    """Raw 512-triangle outputs for a stack of frames."""
    frames = np.asarray(frames)
    if method == "mitnet":
        return mitnet.infer(model, frames)
    if method in ("fcn", "sae"):
        return baselines.predict_dense(model, frames)
    if method == "nr":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", baselines.NrDivergenceWarning)
            return np.stack([baselines.nr_reconstruct(f.astype(np.complex128), nr_cfg) for f in frames])
    raise ValueError(f"unknown method {method!r}")


def render(vectors: np.ndarray) -> np.ndarray:
    """Smooth on the triangulation, then render to 256x256 images."""
    sm = smooth_tri(vectors)
    return np.stack([tri_vector_to_image(v) for v in np.atleast_2d(sm)])


def gan_training_set(cfg: ExperimentConfig, models: dict, train: Dataset) -> tuple[np.ndarray, np.ndarray, dict]:
    """Pooled (condition, truth) pairs: one reconstruction per training sample.

    Training samples are dealt round-robin to the methods after a seeded
    shuffle, optionally capped at ``gan_samples_per_method`` each. A further
    ``gan_identity_fraction`` of sharp (truth, truth) pairs, taken from the end
    of the shuffle, teaches the generator to leave good inputs alone.
    """
    rng = np.random.default_rng([cfg.seed, 7])
    order = rng.permutation(len(train))
    methods = list(cfg.methods)
    conds, truths, counts = [], [], {}
    for k, m in enumerate(methods):
        idx = order[k::len(methods)]
        if cfg.gan_samples_per_method is not None:
            idx = idx[:cfg.gan_samples_per_method]
        sub = train.subset(idx)
        conds.append(render(reconstruct_vectors(m, models.get(m), sub.frames(), cfg.nr)))
        truths.append(truth_images(sub))
        counts[m] = len(idx)
    n_id = int(round(cfg.gan_identity_fraction * sum(counts.values())))
    if n_id:
        sharp = truth_images(train.subset(order[len(order) - n_id:]))
        conds.append(sharp.astype(np.float64))
        truths.append(sharp)
        counts["identity"] = n_id
    return np.concatenate(conds), np.concatenate(truths), counts


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def score(images: np.ndarray, truths: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample IoU (%) and CD (px, NaN where the binarized image is empty)."""
    ious, cds = [], []
    for img, t in zip(images, truths):
        m = img >= threshold
        ious.append(iou(m, t))
        try:
            cds.append(cd(m, t))
        except EmptyMaskError:
            cds.append(math.nan)
    return np.asarray(ious), np.asarray(cds)


def sample_rows(method: str, split: Dataset, images: np.ndarray, enhanced: bool, truths: np.ndarray) -> list[dict]:
    ious, cds = score(images, truths)
    return [{"sample_id": i, "method": method, "shape_class": s.phantom.shape_class,
             "enhanced": int(enhanced), "iou": float(a), "cd": float(b)}
            for i, (s, a, b) in enumerate(zip(split.samples, ious, cds))]


def aggregate(rows: list[dict], methods, classes) -> list[dict]:
    out = []
    for m in methods:
        for enhanced in (0, 1):
            sel = [r for r in rows if r["method"] == m and r["enhanced"] == enhanced]
            if not sel:
                continue
            for cls in list(classes) + ["average"]:
                rs = sel if cls == "average" else [r for r in sel if r["shape_class"] == cls]
                ious = np.array([r["iou"] for r in rs], dtype=float)
                cds = np.array([r["cd"] for r in rs], dtype=float)
                ok = ~np.isnan(cds)
                out.append({"method": m, "shape_class": cls, "enhanced": enhanced,
                            "mean_iou": float(ious.mean()) if len(rs) else math.nan,
                            "mean_cd": float(cds[ok].mean()) if ok.any() else math.nan,
                            "n": len(rs), "n_cd_undefined": int((~ok).sum())})
    return out


def write_report(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(PAPER_ANCHOR + "\n")
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def read_report(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    for r in rows:
        r["enhanced"] = int(r["enhanced"])
        r["n"] = int(r["n"])
        r["n_cd_undefined"] = int(r["n_cd_undefined"])
        r["mean_iou"] = float(r["mean_iou"])
        r["mean_cd"] = float(r["mean_cd"])
    return rows


def evaluate(cfg: ExperimentConfig, models: dict, G, test: Dataset, out_dir: Path) -> tuple[list[dict], list[dict]]:
    """Per-sample and aggregate metrics for every method, raw and GAN-enhanced."""
    from .metrics import write_metric_rows

    truths = truth_images(test)
    rows = []
    for m in cfg.methods:
        t0 = time.monotonic()
        imgs = render(reconstruct_vectors(m, models.get(m), test.frames(), cfg.nr))
        rows += sample_rows(m, test, imgs, False, truths)
        if G is not None:
            rows += sample_rows(m, test, gan.enhance(G, imgs), True, truths)
        log.info("evaluated %s in %.1f s", m, time.monotonic() - t0)
    classes = sorted({s.phantom.shape_class for s in test.samples})
    agg = aggregate(rows, cfg.methods, classes)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metric_rows(out_dir / "per_sample.csv", rows)
    write_report(out_dir / "report.csv", agg)
    return rows, agg


def run_experiment(cfg: ExperimentConfig, data_dir: str | Path, out_dir: str | Path,
                   gan_time_budget_s: float | None = None) -> list[dict]:
    """Full desk run: data, all reconstructors, pooled GAN, evaluation."""
    torch.manual_seed(cfg.seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.monotonic()
    ds = ensure_dataset(cfg, data_dir)
    splits = split_datasets(ds)
    timings["data"] = time.monotonic() - t0
    models = {}
    for m in cfg.methods:
        if m != "nr":
            t = time.monotonic()
            models[m] = train_method(m, cfg, splits, out)
            timings[f"train_{m}"] = time.monotonic() - t
    t = time.monotonic()
    conds, truths, counts = gan_training_set(cfg, models, splits["train"])
    timings["gan_conditions"] = time.monotonic() - t
    t = time.monotonic()
    G, _, ghist = gan.train_gan(conds, truths, cfg.gan, time_budget_s=gan_time_budget_s)
    gan.save_gan(out / CHECKPOINTS["gan"], G, {"condition_counts": counts})
    _loss_csv(out / "gan_losses.csv", ghist.rows)
    timings["train_gan"] = time.monotonic() - t
    t = time.monotonic()
    _, agg = evaluate(cfg, models, G, splits["test"], out)
    timings["eval"] = time.monotonic() - t
    prov = provenance(cfg, {"dataset_sha256": ds.manifest.get("sha256"), "timings_s": timings,
                            "gan_condition_counts": counts, "gan_epochs_run": len(ghist.rows)})
    (out / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True))
    return agg
