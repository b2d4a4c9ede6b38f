"""Complex U-net classifier: 16x16 complex differential frame -> 512 occupancies."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .complex_nn import (ComplexConv2d, ComplexMaxPool2d, ComplexTensor, ModReLU, c2r, ccat,
                         real_dense_init, upsample2x)
from .geometry import N_COILS, N_TRIANGLES, build_mesh

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MitnetConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    head_channels: int | None = 4   # 1x1 complex projection before the dense head
    kernel_size: int = 3
    threshold: float = 0.5
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    patience: int | None = 25       # None trains all epochs
    label_weights: str = "none"     # or "balanced"
    seed: int = 0
    input_scale: float | list[float] = 1.0   # divides frames; a list holds one scale per coil offset
    offset_scaling: bool = True     # fit one input scale per coil offset (j - i) mod 16
    grad_clip: float | None = 1.0   # max global gradient norm per step
    rotation_augment: bool = True   # random coil-pitch rotations of training samples

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("need at least two positive stage widths")
        if N_COILS % 2 ** (len(self.widths) - 1):
            raise ValueError(f"{len(self.widths) - 1} poolings do not divide a {N_COILS}x{N_COILS} input")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")
        if self.label_weights not in ("balanced", "none"):
            raise ValueError(f"unknown label weighting {self.label_weights!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MitnetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ComplexBlock(nn.Module):
    """Two complex conv + modReLU layers."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ComplexConv2d(c_in, c_out, k, rng=rng)
        self.act1 = ModReLU(c_out)
        self.conv2 = ComplexConv2d(c_out, c_out, k, rng=rng)
        self.act2 = ModReLU(c_out)

    def forward(self, z: ComplexTensor) -> ComplexTensor:
        return self.act2(self.conv2(self.act1(self.conv1(z))))


class MitNet(nn.Module):
    def __init__(self, cfg: MitnetConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w, k = cfg.widths, cfg.kernel_size
        self.down = nn.ModuleList()
        c = 1
        for width in w:
            self.down.append(ComplexBlock(c, width, k, rng))
            c = width
        self.pool = ComplexMaxPool2d(2)
        self.up = nn.ModuleList()
        for width in reversed(w[:-1]):
            self.up.append(ComplexBlock(c + width, width, k, rng))
            c = width
        self.project = None
        if cfg.head_channels:
            self.project = ComplexConv2d(c, cfg.head_channels, 1, rng=rng)
            c = cfg.head_channels
        self.head = real_dense_init(nn.Linear(2 * c * N_COILS * N_COILS, N_TRIANGLES), rng)

    def forward(self, z: ComplexTensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(z))

    def logits(self, z: ComplexTensor) -> torch.Tensor:
        if z.real.dim() == 3:
            z = ComplexTensor(z.real.unsqueeze(1), z.imag.unsqueeze(1))
        skips = []
        for i, block in enumerate(self.down):
            if i:
                z = self.pool(z)
            z = block(z)
            skips.append(z)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            z = block(ccat([upsample2x(z), skip]))
        if self.project is not None:
            z = self.project(z)
        return self.head(c2r(z).flatten(start_dim=1))


def build_mitnet(cfg: MitnetConfig | None = None) -> MitNet:
    return MitNet(cfg or MitnetConfig())


def expected_parameter_count(cfg: MitnetConfig) -> int:
    """Closed-form parameter count of ``MitNet(cfg)``.

    A complex conv c_in -> c_out with kernel k has 2*c_out*c_in*k^2 weights
    and 2*c_out biases; a modReLU has c_out offsets.
    """
    k2 = cfg.kernel_size ** 2

    def block(ci, co):
        return 2 * co * ci * k2 + 2 * co + co + 2 * co * co * k2 + 2 * co + co

    w = cfg.widths
    total = 0
    c = 1
    for width in w:
        total += block(c, width)
        c = width
    for width in reversed(w[:-1]):
        total += block(c + width, width)
        c = width
    if cfg.head_channels:
        total += 2 * cfg.head_channels * c + 2 * cfg.head_channels
        c = cfg.head_channels
    total += 2 * c * N_COILS * N_COILS * N_TRIANGLES + N_TRIANGLES
    return total


# ---------------------------------------------------------------------------
# loss and helpers
# ---------------------------------------------------------------------------

def balanced_weights(t: torch.Tensor) -> torch.Tensor:
    """w_i = n / (2 * count of t_i's class) over the whole batch."""
    n = t.numel()
    pos = t.sum()
    neg = n - pos
    if pos == 0 or neg == 0:
        return torch.full_like(t, 0.5)
    return torch.where(t > 0.5, n / (2 * pos), n / (2 * neg))


def bce_loss(o, t, w=None, eps: float = EPS):
    """Weighted binary cross-entropy, -(1/n) sum w [t log o + (1-t) log(1-o)]."""
    as_float = not isinstance(o, torch.Tensor)
    o = torch.as_tensor(o, dtype=torch.float64) if as_float else o
    t = torch.as_tensor(t, dtype=o.dtype)
    if o.shape != t.shape:
        raise ValueError(f"output shape {tuple(o.shape)} != target shape {tuple(t.shape)}")
    w = torch.ones_like(o) if w is None else torch.as_tensor(w, dtype=o.dtype)
    o = o.clamp(eps, 1 - eps)
    loss = -(w * (t * torch.log(o) + (1 - t) * torch.log(1 - o))).mean()
    return loss.item() if as_float else loss


def bce_with_logits(logits: torch.Tensor, t: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
    """``bce_loss`` evaluated from logits without clamping.

    Training uses this form: a saturated, wrong sigmoid still gets a
    gradient of size one instead of none.
    """
    return nn.functional.binary_cross_entropy_with_logits(logits, t, weight=w)


def binarize(v, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    return (np.asarray(v) >= threshold).astype(np.float64)


def tri_iou(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Per-row IoU in [0, 1] of binary triangle vectors (both empty -> 1)."""
    pred = np.atleast_2d(pred) > 0.5
    label = np.atleast_2d(label) > 0.5
    inter = (pred & label).sum(axis=1)
    union = (pred | label).sum(axis=1)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def scale_matrix(scale) -> np.ndarray | float:
    """A scalar stays scalar; 16 per-offset scales become the circulant matrix S[i, j] = s[(j - i) % 16]."""
    if np.ndim(scale) == 0:
        return float(scale)
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != (N_COILS,):
        raise ValueError(f"need {N_COILS} per-offset scales, got shape {s.shape}")
    i = np.arange(N_COILS)
    return s[(i[None, :] - i[:, None]) % N_COILS]


def frames_to_input(frames: np.ndarray, scale=1.0) -> ComplexTensor:
    """Divide frames by a real scale (scalar or per coil offset) and split into real/imag."""
    f = np.asarray(frames) / scale_matrix(scale)
    return ComplexTensor(torch.as_tensor(f.real, dtype=torch.float32).unsqueeze(1),
                         torch.as_tensor(f.imag, dtype=torch.float32).unsqueeze(1))


def frame_scale(frames: np.ndarray) -> float:
    """RMS modulus of the off-diagonal entries; used to normalise inputs."""
    f = np.asarray(frames)
    off = ~np.eye(f.shape[-1], dtype=bool)
    return float(np.sqrt(np.mean(np.abs(f[..., off]) ** 2)))


def offset_scales(frames: np.ndarray) -> list[float]:
    """RMS modulus per coil offset (j - i) mod 16; offset 0 (the zero diagonal) gets 1.

    Offsets, not single entries, are pooled so that the scaling commutes
    with rotations of the coil ring.
    """
    f = np.abs(np.asarray(frames)) ** 2
    i = np.arange(N_COILS)
    off = (i[None, :] - i[:, None]) % N_COILS
    out = [1.0]
    for k in range(1, N_COILS):
        rms = float(np.sqrt(f[..., off == k].mean()))
        out.append(rms if rms > 0 else 1.0)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    extra: dict = field(default_factory=dict)

    def losses(self, key: str = "train_loss") -> list[float]:
        return [r[key] for r in self.rows]


class RotationAugment:
    """Rotate each training sample by a random multiple of the coil pitch.

    The setup is 16-fold symmetric, so rolling both coil indices of a frame
    by k and permuting the triangle labels with the mesh symmetry yields an
    exactly simulated sample of the rotated phantom.
    """

    def __init__(self):
        mesh = build_mesh()
        self.inv = torch.stack([torch.as_tensor(np.argsort(mesh.rotation_permutation(k)))
                                for k in range(N_COILS)])

    @staticmethod
    def roll(t: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        """out[b, ..., i, j] = t[b, ..., i - k_b, j - k_b] (indices mod 16).

        Flat (B, 256) row-major inputs are handled as (B, 16, 16).
        """
        r = (torch.arange(N_COILS)[None, :] - k[:, None]) % N_COILS
        shape = t.shape
        t = t.reshape(shape[0], -1, N_COILS, N_COILS)
        rows = r[:, None, :, None].expand_as(t)
        cols = r[:, None, None, :].expand_as(t)
        return torch.gather(torch.gather(t, 2, rows), 3, cols).reshape(shape)

    def __call__(self, x, y: torch.Tensor, rng: np.random.Generator):
        k = torch.as_tensor(rng.integers(0, N_COILS, len(y)))
        y = torch.gather(y, 1, self.inv[k])
        if isinstance(x, ComplexTensor):
            return ComplexTensor(self.roll(x.real, k), self.roll(x.imag, k)), y
        return self.roll(x, k), y


def _take(x, idx):
    if isinstance(x, ComplexTensor):
        return ComplexTensor(x.real[idx], x.imag[idx])
    return x[idx]


def _predict(model: nn.Module, x, batch: int = 256) -> torch.Tensor:
    model.eval()
    n = len(x.real) if isinstance(x, ComplexTensor) else len(x)
    with torch.no_grad():
        return torch.cat([model(_take(x, slice(i, i + batch))) for i in range(0, n, batch)])


def fit_classifier(model: nn.Module, x_train, y_train: torch.Tensor, x_val, y_val: torch.Tensor, *,
                   lr: float, epochs: int, batch_size: int, seed: int, patience: int | None,
                   threshold: float = 0.5, label_weights: str = "none",
                   on_epoch: Callable[[dict], None] | None = None,
                   augment: Callable | None = None, grad_clip: float | None = None) -> History:
    """Adam mini-batch descent on weighted BCE; keeps the best-validation state.

    Model selection uses mean triangle IoU on the validation split, with
    ties broken by validation loss so that a model still at IoU 0 keeps
    improving instead of stopping early.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(y_train)
    hist = History()
    best, best_state, stale = (-math.inf, -math.inf), None, 0
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = torch.as_tensor(order[s:s + batch_size])
            xb, yb = _take(x_train, idx), y_train[idx]
            if augment is not None:
                xb, yb = augment(xb, yb, rng)
            w = balanced_weights(yb) if label_weights == "balanced" else None
            loss = bce_with_logits(model.logits(xb), yb, w)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {s}")
            opt.zero_grad()
            loss.backward()
            if grad_clip is not None:
                nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            total += loss.item() * len(idx)
        row = {"epoch": epoch, "train_loss": total / n}
        if y_val is not None and len(y_val):
            pv = _predict(model, x_val)
            wv = balanced_weights(y_val) if label_weights == "balanced" else None
            row["val_loss"] = bce_loss(pv, y_val, wv).item()
            row["val_iou"] = float(tri_iou(pv.numpy() >= threshold, y_val.numpy()).mean())
            score = (row["val_iou"], -row["val_loss"])
        else:
            score = (-row["train_loss"], 0.0)
        hist.rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d %s", epoch, row)
        if score > best:
            best, stale = score, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            hist.best_epoch = epoch
        else:
            stale += 1
            if patience is not None and stale >= patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return hist


def train_ccnn(train, val, cfg: MitnetConfig | None = None, on_epoch=None) -> tuple[MitNet, History]:
    """Train the complex CNN on dataset splits (objects with frames()/labels())."""
    cfg = cfg or MitnetConfig()
    if not len(train):
        raise ValueError("empty training split")
    cfg.input_scale = offset_scales(train.frames()) if cfg.offset_scaling else frame_scale(train.frames())
    model = build_mitnet(cfg)
    xt = frames_to_input(train.frames(), cfg.input_scale)
    yt = torch.as_tensor(train.labels(), dtype=torch.float32)
    xv = frames_to_input(val.frames(), cfg.input_scale) if len(val) else None
    yv = torch.as_tensor(val.labels(), dtype=torch.float32) if len(val) else None
    hist = fit_classifier(model, xt, yt, xv, yv, lr=cfg.lr, epochs=cfg.epochs,
                          batch_size=cfg.batch_size, seed=cfg.seed, patience=cfg.patience,
                          threshold=cfg.threshold, label_weights=cfg.label_weights,
                          on_epoch=on_epoch, grad_clip=cfg.grad_clip,
                          augment=RotationAugment() if cfg.rotation_augment else None)
    return model, hist


def infer(model: MitNet, frames: np.ndarray) -> np.ndarray:
    """Occupancy vectors in (0, 1) for one frame (16x16) or a stack of frames."""
    frames = np.asarray(frames)
    single = frames.ndim == 2
    x = frames_to_input(frames[None] if single else frames, model.cfg.input_scale)
    out = _predict(model, x).numpy().astype(np.float64)
    return out[0] if single else out


def save_checkpoint(path: str | Path, kind: str, model: nn.Module, config: dict, extra: dict | None = None) -> None:
    torch.save({"kind": kind, "config": config, "state": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if "kind" not in ckpt or "state" not in ckpt:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    return ckpt


def load_mitnet(path: str | Path) -> MitNet:
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "ccnn":
        raise ValueError(f"{path} holds a {ckpt['kind']} model, not ccnn")
    model = build_mitnet(MitnetConfig.from_dict(ckpt["config"]))
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model


def save_mitnet(path: str | Path, model: MitNet, extra: dict | None = None) -> None:
    save_checkpoint(path, "ccnn", model, model.cfg.to_dict(), extra)
