"""Conditional GAN that sharpens 256x256 triangle-map renderings."""
from __future__ import annotations

import logging
import re
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import IMAGE_SIZE
from .mitnet import TrainingDiverged, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class GanConfig:
    base_width: int = 32            # encoder stage widths: base * 2**stage
    lam: float = 100.0              # reconstruction penalty weight
    recon: str = "l2"               # "l2" (root sum of squares) or "l1"
    lr: float = 1e-3
    beta1: float = 0.5
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.recon not in ("l2", "l1"):
            raise ValueError(f"unknown reconstruction penalty {self.recon!r}")
        if self.base_width < 1:
            raise ValueError("base width must be positive")

    @classmethod
    def desk(cls, **kw) -> "GanConfig":
        kw.setdefault("base_width", 4)
        kw.setdefault("epochs", 30)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _conv_bn_relu(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), nn.BatchNorm2d(c_out), nn.ReLU())


class GeneratorNet(nn.Module):
    """U-net: 10 conv layers with a pool after every pair, 4 transposed-conv ups.

    The 8x8 bottleneck is first doubled by nearest-neighbour resampling and
    joined with the 16x16 stage; the 4 transposed convs then climb to
    256x256, each joined with the matching encoder stage.
    """

    N_STAGES = 5
    PRIOR = 0.03   # rough fraction of phantom pixels; sets the initial output bias

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        w = [cfg.base_width * 2 ** i for i in range(self.N_STAGES)]
        self.stages = nn.ModuleList()
        c = 1
        for wi in w:
            self.stages.append(nn.Sequential(_conv_bn_relu(c, wi), _conv_bn_relu(wi, wi)))
            c = wi
        c = 2 * w[4]
        self.ups = nn.ModuleList()
        for skip in (w[3], w[2], w[1], w[0]):
            self.ups.append(nn.Sequential(nn.ConvTranspose2d(c, skip, 2, stride=2),
                                          nn.BatchNorm2d(skip), nn.ReLU()))
            c = 2 * skip
        self.out = nn.Conv2d(c, 1, 1)
        nn.init.constant_(self.out.bias, float(np.log(self.PRIOR / (1 - self.PRIOR))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = torch.cat([F.interpolate(x, scale_factor=2, mode="nearest"), skips[4]], dim=1)
        for up, skip in zip(self.ups, reversed(skips[:4])):
            x = torch.cat([up(x), skip], dim=1)
        return torch.sigmoid(self.out(x))


class DiscriminatorNet(nn.Module):
    """PatchGAN on the (condition, candidate) channel pair -> 16x16 scores."""

    def __init__(self, cfg: GanConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        c = 2
        for i in range(4):
            w = cfg.base_width * 2 ** (i + 1)
            layers.append(nn.Conv2d(c, w, 4, stride=2, padding=1))
            if i:
                layers.append(nn.BatchNorm2d(w))
            layers.append(nn.LeakyReLU(0.2))
            c = w
        layers.append(nn.Conv2d(c, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([condition, candidate], dim=1)))


def build_generator(cfg: GanConfig | None = None) -> GeneratorNet:
    cfg = cfg or GanConfig()
    torch.manual_seed(cfg.seed)
    return GeneratorNet(cfg)


def build_discriminator(cfg: GanConfig | None = None) -> DiscriminatorNet:
    cfg = cfg or GanConfig()
    torch.manual_seed(cfg.seed + 1)
    return DiscriminatorNet(cfg)


def reconstruction_penalty(fake: torch.Tensor, truth: torch.Tensor, kind: str = "l2") -> torch.Tensor:
    """Per-image root sum of squares (or sum of absolute values), batch mean."""
    d = (fake - truth).flatten(1)
    if kind == "l1":
        return d.abs().sum(1).mean()
    return d.pow(2).sum(1).sqrt().mean()


def gan_losses(d_real, d_fake_for_d, d_fake_for_g, fake, truth, lam: float = 100.0,
               recon: str = "l2") -> tuple[torch.Tensor, torch.Tensor]:
    """(generator loss, discriminator loss).

    ``d_fake_for_d`` is D evaluated on a detached fake, ``d_fake_for_g`` on
    the live one; pass the same tensor twice when gradients do not matter.
    """
    if fake.shape != truth.shape:
        raise ValueError(f"fake {tuple(fake.shape)} and truth {tuple(truth.shape)} differ")
    loss_d = -torch.log(d_real.clamp_min(EPS)).mean() - torch.log((1 - d_fake_for_d).clamp_min(EPS)).mean()
    adv = -torch.log(d_fake_for_g.clamp_min(EPS)).mean()
    loss_g = adv + lam * reconstruction_penalty(fake, truth, recon)
    return loss_g, loss_d


def d_accuracy(d_real: torch.Tensor, d_fake: torch.Tensor) -> float:
    """Fraction of patches D labels correctly (real > 0.5, fake < 0.5)."""
    right = (d_real > 0.5).sum() + (d_fake < 0.5).sum()
    return float(right) / (d_real.numel() + d_fake.numel())


def _as_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    if x.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} images, got {tuple(x.shape[-2:])}")
    # channels-last roughly halves CPU convolution time at 256x256
    return x[:, None].contiguous(memory_format=torch.channels_last)


@dataclass
class GanHistory:
    rows: list

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]


def train_gan(conditions, truths, cfg: GanConfig | None = None,
              on_epoch: Callable[[dict], None] | None = None,
              time_budget_s: float | None = None):
    """Alternating D step / G step per mini-batch.

    ``conditions`` and ``truths`` are (n, 256, 256) arrays. With a time
    budget, training stops after the first epoch that exceeds it.
    Returns (generator, discriminator, GanHistory).
    """
    cfg = cfg or GanConfig()
    x = _as_batch(conditions)
    t = _as_batch(truths)
    if len(x) != len(t) or not len(x):
        raise ValueError("need matching, non-empty condition and truth stacks")
    G, D = build_generator(cfg), build_discriminator(cfg)
    G.to(memory_format=torch.channels_last)
    D.to(memory_format=torch.channels_last)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=(cfg.beta1, 0.999))
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    rows = []
    start = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        G.train()
        D.train()
        order = rng.permutation(len(x))
        sums = {"loss_g": 0.0, "loss_d": 0.0, "recon": 0.0, "d_acc": 0.0}
        for s in range(0, len(x), cfg.batch_size):
            idx = torch.as_tensor(order[s:s + cfg.batch_size])
            xb, tb = x[idx], t[idx]
            fake = G(xb)
            # discriminator step
            d_real = D(xb, tb)
            d_fake = D(xb, fake.detach())
            _, loss_d = gan_losses(d_real, d_fake, d_fake, fake.detach(), tb, cfg.lam, cfg.recon)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            # generator step
            loss_g, _ = gan_losses(d_real.detach(), d_fake.detach(), D(xb, fake), fake, tb,
                                   cfg.lam, cfg.recon)
            if not (torch.isfinite(loss_g) and torch.isfinite(loss_d)):
                raise TrainingDiverged(f"non-finite GAN loss at epoch {epoch}, batch starting {s}: "
                                       f"G={loss_g.item()} D={loss_d.item()}")
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            k = len(idx)
            sums["loss_g"] += loss_g.item() * k
            sums["loss_d"] += loss_d.item() * k
            sums["recon"] += reconstruction_penalty(fake.detach(), tb, cfg.recon).item() * k
            sums["d_acc"] += d_accuracy(d_real.detach(), d_fake.detach()) * k
        row = {"epoch": epoch, **{k: v / len(x) for k, v in sums.items()}}
        rows.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("gan epoch %s", row)
        if time_budget_s is not None and time.monotonic() - start > time_budget_s:
            log.info("GAN time budget reached after %d epochs", epoch)
            break
    recalibrate_batchnorm(G, x, cfg.batch_size)
    G.eval()
    D.eval()
    return G, D, GanHistory(rows)


def recalibrate_batchnorm(G: nn.Module, x: torch.Tensor, batch_size: int) -> None:
    """Replace BatchNorm running statistics by exact averages over ``x``.

    The default exponential average is dominated by the last few batches of
    the final epoch, so inference would depend on their composition.
    """
    bns = [m for m in G.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None           # cumulative average
    G.train()
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            G(x[s:s + batch_size])
    for m, mom in zip(bns, saved):
        m.momentum = mom


def enhance(G: GeneratorNet, condition, batch: int = 16) -> np.ndarray:
    """Pure forward pass; accepts one 256x256 image or a stack."""
    cond = np.asarray(condition)
    single = cond.ndim == 2
    x = _as_batch(cond)
    G.eval()
    G.to(memory_format=torch.channels_last)
    with torch.no_grad():
        out = torch.cat([G(x[i:i + batch]) for i in range(0, len(x), batch)])
    out = out[:, 0].numpy().astype(np.float64)
    return out[0] if single else out


def save_gan(path: str | Path, G: GeneratorNet, extra: dict | None = None) -> None:
    save_checkpoint(path, "gan", G, G.cfg.to_dict(), extra)


def load_gan(path: str | Path) -> GeneratorNet:
    ckpt = load_checkpoint(path)
    if ckpt["kind"] != "gan":
        raise ValueError(f"{path} holds a {ckpt['kind']} model, not gan")
    G = GeneratorNet(GanConfig.from_dict(ckpt["config"]))
    G.load_state_dict(ckpt["state"])
    G.eval()
    return G


def write_pgm(path: str | Path, image) -> None:
    """8-bit binary PGM (P5, maxval 255); values are clipped to [0, 1] first."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export takes a single 2-D image")
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(buf, np.uint8, w * h, m.end()).reshape(h, w)
