"""Comparison reconstructors: damped Gauss-Newton (NR), FCN and stacked autoencoder."""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn

from .complex_nn import real_dense_init
from .forward import (BACKGROUND_SIGMA, MaterialMap, assemble, forward, sense_factor,
                      with_sigma)
from .geometry import N_COILS, N_TRIANGLES
from .mitnet import History, RotationAugment, _predict, fit_classifier, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

OFF_DIAG = ~np.eye(N_COILS, dtype=bool)


# ---------------------------------------------------------------------------
# Newton-Raphson / damped Gauss-Newton
# ---------------------------------------------------------------------------

class NrDivergenceWarning(RuntimeWarning):
    pass


@dataclass
class NrConfig:
    max_iter: int = 10
    alpha_scale: float = 1e-3       # alpha = alpha_scale * trace(J^T J) / 512
    max_rejections: int = 3
    damping_growth: float = 10.0
    background: float = BACKGROUND_SIGMA
    omega: float | None = None      # None: default excitation frequency

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("need at least one iteration")
        if not self.alpha_scale > 0:
            raise ValueError("damping must be positive")

    def background_map(self) -> MaterialMap:
        kw = {} if self.omega is None else {"omega": self.omega}
        return MaterialMap.uniform(self.background, **kw)


@dataclass
class NrResult:
    vector: np.ndarray          # normalised conductivity increase in [0, 1]
    sigma: np.ndarray           # best conductivity iterate, S/m
    residuals: list[float] = field(default_factory=list)   # accepted iterates only
    iterations: int = 0
    diverged: bool = False


def stack_measurements(frame: np.ndarray) -> np.ndarray:
    """240 off-diagonal complex entries as 480 reals (real parts first)."""
    v = np.asarray(frame)[..., OFF_DIAG]
    return np.concatenate([v.real, v.imag], axis=-1)


def nr_jacobian(mat: MaterialMap, rel_step: float = 1e-3) -> np.ndarray:
    """480 x 512 sensitivity of the stacked frame to each triangle conductivity.

    Column j is (F(sigma + delta e_j) - F(sigma)) / delta with
    delta = rel_step * background sigma. The perturbed frames are computed
    exactly through the Woodbury identity, since bumping one triangle changes
    the system matrix only on its three nodes.
    """
    sys = assemble(mat)
    fem = sys.fem
    delta = rel_step * BACKGROUND_SIGMA
    n_free = len(sys.free)
    inv = np.linalg.inv(sys.matrix.toarray())
    full_pos = np.full(fem.n_nodes, -1)
    full_pos[sys.free] = np.arange(n_free)
    tri = full_pos[fem.triangles[:N_TRIANGLES]]          # (512, 3) reduced indices
    if (tri < 0).any():
        raise AssertionError("sensing triangle touches the Dirichlet boundary")
    coils = full_pos[fem.coil_nodes]
    Z = inv[tri[:, :, None], tri[:, None, :]]              # (512, 3, 3)
    X = inv[tri][:, :, coils]                              # (512, 3, 16)
    C_inv = np.linalg.inv(1j * mat.omega * delta * fem.mass[:N_TRIANGLES])
    core = np.linalg.solve(C_inv + Z, X)                   # (512, 3, 16)
    dF = -sense_factor(mat.omega) * np.einsum("tks,tke->tes", X, core)
    dF[:, ~OFF_DIAG] = 0
    return stack_measurements(dF / delta).T


def _model_data(sigma: np.ndarray, bg_map: MaterialMap, f_bg: np.ndarray) -> np.ndarray:
    return stack_measurements(forward(with_sigma(bg_map, sigma)) - f_bg)


def normalise_increase(sigma: np.ndarray, background: float) -> np.ndarray:
    d = np.clip(sigma - background, 0, None)
    peak = d.max()
    return d / peak if peak > 0 else np.zeros_like(d)


def nr_solve(frame: np.ndarray, cfg: NrConfig | None = None) -> NrResult:
    """Damped Gauss-Newton on the differential frame, starting at the background.

    A step that raises the residual is rejected and the damping multiplied
    by ``damping_growth``; ``max_rejections`` rejections in a row stop the
    iteration with an NrDivergenceWarning and the best iterate is returned.
    """
    cfg = cfg or NrConfig()
    bg_map = cfg.background_map()
    f_bg = forward(bg_map)
    d = stack_measurements(frame)
    sigma = bg_map.sigma.copy()
    r = d - _model_data(sigma, bg_map, f_bg) if np.any(d) else np.zeros_like(d)
    res = float(np.linalg.norm(r))
    out = NrResult(np.zeros(N_TRIANGLES), sigma.copy(), [res])
    damping = 1.0
    rejected = 0
    for it in range(cfg.max_iter):
        if res == 0:
            break
        J = nr_jacobian(with_sigma(bg_map, sigma))
        JtJ = J.T @ J
        alpha = damping * cfg.alpha_scale * np.trace(JtJ) / N_TRIANGLES
        step = np.linalg.solve(JtJ + alpha * np.eye(N_TRIANGLES), J.T @ r)
        trial = np.clip(sigma + step, 0, None)
        r_trial = d - _model_data(trial, bg_map, f_bg)
        res_trial = float(np.linalg.norm(r_trial))
        out.iterations = it + 1
        if res_trial <= res:
            sigma, r, res = trial, r_trial, res_trial
            out.residuals.append(res)
            rejected = 0
        else:
            rejected += 1
            damping *= cfg.damping_growth
            if rejected >= cfg.max_rejections:
                out.diverged = True
                warnings.warn(f"Gauss-Newton residual rose {rejected} times in a row; "
                              "returning best iterate", NrDivergenceWarning, stacklevel=2)
                break
    out.sigma = sigma
    out.vector = normalise_increase(sigma, cfg.background)
    return out


def nr_reconstruct(frame: np.ndarray, cfg: NrConfig | None = None) -> np.ndarray:
    return nr_solve(frame, cfg).vector


# ---------------------------------------------------------------------------
# magnitude-input networks
# ---------------------------------------------------------------------------

def magnitude_input(frame: np.ndarray) -> np.ndarray:
    """Entry moduli, row-major, length 256 (batched over leading axes)."""
    f = np.asarray(frame)
    return np.abs(f).reshape(f.shape[:-2] + (N_COILS * N_COILS,))


@dataclass
class DenseConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    patience: int | None = 20
    threshold: float = 0.5
    label_weights: str = "none"
    seed: int = 0
    pretrain_epochs: int = 50       # SAE autoencoders
    rotation_augment: bool = True
    mean: list[float] | None = None  # input standardisation, set on training
    std: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenseConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class _Standardise(nn.Module):
    def __init__(self, mean=None, std=None):
        super().__init__()
        self.register_buffer("mean", torch.zeros(256) if mean is None else torch.as_tensor(mean, dtype=torch.float32))
        self.register_buffer("std", torch.ones(256) if std is None else torch.as_tensor(std, dtype=torch.float32))

    def forward(self, x):
        return (x - self.mean) / self.std


class FcnModel(nn.Module):
    """256 -> 360 -> 360 -> 512 with batch normalisation between layers."""

    def __init__(self, cfg: DenseConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.norm = _Standardise(cfg.mean, cfg.std)
        self.net = nn.Sequential(
            real_dense_init(nn.Linear(256, 360), rng), nn.BatchNorm1d(360), nn.ReLU(),
            real_dense_init(nn.Linear(360, 360), rng), nn.BatchNorm1d(360), nn.ReLU(),
            real_dense_init(nn.Linear(360, N_TRIANGLES), rng),
        )

    def forward(self, x):
        return torch.sigmoid(self.logits(x))

    def logits(self, x):
        return self.net(self.norm(x))


class AutoEncoder(nn.Module):
    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.encoder = nn.Sequential(real_dense_init(nn.Linear(n_in, n_hidden), rng), nn.Sigmoid())
        self.decoder = real_dense_init(nn.Linear(n_hidden, n_in), rng)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class SaeModel(nn.Module):
    """Encoders 256 -> 128 -> 64 (pre-trained as autoencoders) plus a 64 -> 512 head."""

    def __init__(self, cfg: DenseConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.norm = _Standardise(cfg.mean, cfg.std)
        self.ae1 = AutoEncoder(256, 128, rng)
        self.ae2 = AutoEncoder(128, 64, rng)
        self.head = real_dense_init(nn.Linear(64, N_TRIANGLES), rng)

    def hidden(self, x):
        h1 = self.ae1.encoder(self.norm(x))
        return h1, self.ae2.encoder(h1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))

    def logits(self, x):
        return self.head(self.hidden(x)[1])


def _standardisation(x: np.ndarray) -> tuple[list[float], list[float]]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean.tolist(), std.tolist()


def _xy(split):
    x = torch.as_tensor(magnitude_input(split.frames()), dtype=torch.float32)
    y = torch.as_tensor(split.labels(), dtype=torch.float32)
    return x, y


def _fit(model, train, val, cfg: DenseConfig, on_epoch=None) -> History:
    xt, yt = _xy(train)
    xv, yv = _xy(val) if len(val) else (None, None)
    return fit_classifier(model, xt, yt, xv, yv, lr=cfg.lr, epochs=cfg.epochs,
                          batch_size=cfg.batch_size, seed=cfg.seed, patience=cfg.patience,
                          threshold=cfg.threshold, label_weights=cfg.label_weights,
                          on_epoch=on_epoch,
                          augment=RotationAugment() if cfg.rotation_augment else None)


def train_fcn(train, val, cfg: DenseConfig | None = None, on_epoch=None) -> tuple[FcnModel, History]:
    cfg = cfg or DenseConfig()
    if not len(train):
        raise ValueError("empty training split")
    cfg.mean, cfg.std = _standardisation(magnitude_input(train.frames()))
    model = FcnModel(cfg)
    return model, _fit(model, train, val, cfg, on_epoch)


def pretrain_autoencoder(ae: AutoEncoder, x: torch.Tensor, cfg: DenseConfig) -> list[float]:
    """Reconstruction-MSE training; returns the per-epoch losses (epoch 0 = init)."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
    with torch.no_grad():
        losses = [nn.functional.mse_loss(ae(x), x).item()]
    for _ in range(cfg.pretrain_epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), cfg.batch_size):
            xb = x[torch.as_tensor(order[s:s + cfg.batch_size])]
            loss = nn.functional.mse_loss(ae(xb), xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            losses.append(nn.functional.mse_loss(ae(x), x).item())
    return losses


def train_sae(train, val, cfg: DenseConfig | None = None, on_epoch=None) -> tuple[SaeModel, History]:
    """Greedy layer-wise pre-training, then supervised fine-tuning of the stack."""
    cfg = cfg or DenseConfig()
    if not len(train):
        raise ValueError("empty training split")
    cfg.mean, cfg.std = _standardisation(magnitude_input(train.frames()))
    model = SaeModel(cfg)
    x, _ = _xy(train)
    xn = model.norm(x).detach()
    ae1_loss = pretrain_autoencoder(model.ae1, xn, cfg)
    with torch.no_grad():
        h1 = model.ae1.encoder(xn)
    ae2_loss = pretrain_autoencoder(model.ae2, h1, cfg)
    hist = _fit(model, train, val, cfg, on_epoch)
    hist.extra["pretrain"] = {"ae1": ae1_loss, "ae2": ae2_loss}
    return model, hist


def predict_dense(model: nn.Module, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    single = frames.ndim == 2
    x = torch.as_tensor(magnitude_input(frames[None] if single else frames), dtype=torch.float32)
    out = _predict(model, x).numpy().astype(np.float64)
    return out[0] if single else out


def save_dense(path, kind: str, model: nn.Module, extra: dict | None = None) -> None:
    save_checkpoint(path, kind, model, model.cfg.to_dict(), extra)


def load_dense(path, kind: str | None = None) -> nn.Module:
    ckpt = load_checkpoint(path)
    if ckpt["kind"] not in ("fcn", "sae") or (kind is not None and ckpt["kind"] != kind):
        raise ValueError(f"{path} holds a {ckpt['kind']} model, not {kind or 'fcn/sae'}")
    cls = FcnModel if ckpt["kind"] == "fcn" else SaeModel
    model = cls(DenseConfig.from_dict(ckpt["config"]))
    model.load_state_dict(ckpt["state"])
    model.eval()
    return model
