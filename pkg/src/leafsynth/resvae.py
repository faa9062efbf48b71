"""Residual variational autoencoder over binary leaf skeletons.

The encoder halves the resolution ``encoder_stages`` times with 4×4 stride-2
convolutions; pooled features from every stage are concatenated with the
flattened last stage before the latent heads, so the bottleneck sees the
early, simpler features directly. The decoder mirrors the encoder with
transposed convolutions and ends with a residual stack and a sigmoid.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import warnings

import numpy as np
import torch
from torch import nn

from ._util import Stopwatch, write_log_header
from .checkpoint import Checkpoint
from .dataset import SkeletonMask

log = logging.getLogger(__name__)

warnings.filterwarnings("ignore", message="Using padding='same' with even kernel")

VAE_LOG_FIELDS = ["epoch", "total_loss", "recon_loss", "kl_loss", "wall_time"]


class TrainingError(RuntimeError):
    pass


@dataclass
class VAEConfig:
    latent_dim: int = 32
    beta: float = 75.0
    learning_rate: float = 0.001
    epochs: int = 2000
    batch_size: int = 64
    kernel_size: int = 4
    residual_layers: int = 5
    residual_filters: int = 16
    seed: int = 0
    image_size: int = 256
    encoder_stages: int = 5
    base_filters: int = 32
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        self.adam_betas = tuple(self.adam_betas)
        for name in ("latent_dim", "batch_size", "kernel_size", "residual_layers",
                     "residual_filters", "image_size", "encoder_stages", "base_filters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.image_size % (2 ** self.encoder_stages):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2**{self.encoder_stages}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class EncoderOutput(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class LatentPrior:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("prior mean and std must be equal-length vectors")
        if not np.all(self.std > 0):
            raise ValueError("prior std must be strictly positive")

    @classmethod
    def standard(cls, dim: int = 32) -> "LatentPrior":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentPrior":
        return cls(d["mean"], d["std"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "LatentPrior":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- layers


def same_conv(cin: int, cout: int, k: int) -> nn.Conv2d:
    """Stride-1 convolution with 'same' output size, even kernels included."""
    return nn.Conv2d(cin, cout, k, padding="same")


def _down(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=2, padding=(k - 1) // 2 if k % 2 else (k - 2) // 2),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


def _up(cin: int, cout: int, k: int) -> nn.Sequential:
    if k % 2:
        conv = nn.ConvTranspose2d(cin, cout, k, stride=2, padding=(k - 1) // 2, output_padding=1)
    else:
        conv = nn.ConvTranspose2d(cin, cout, k, stride=2, padding=(k - 2) // 2)
    return nn.Sequential(conv, nn.BatchNorm2d(cout), nn.LeakyReLU(0.2))


class ResidualBlock(nn.Module):
    """``x + r(x)`` with r a stack of (same conv → batch norm → LeakyReLU) layers."""

    def __init__(self, channels: int = 16, layers: int = 5, kernel_size: int = 4):
        super().__init__()
        body = []
        for _ in range(layers):
            body += [same_conv(channels, channels, kernel_size), nn.BatchNorm2d(channels), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*body)
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"residual block expects {self.channels} channels, got {x.shape[1]}")
        return x + self.body(x)


class ConvEncoder(nn.Module):
    def __init__(self, in_channels: int, widths: Sequence[int], k: int, image_size: int, latent_dim: int, heads: int):
        super().__init__()
        self.stages = nn.ModuleList()
        cin = in_channels
        for w in widths:
            self.stages.append(_down(cin, w, k))
            cin = w
        side = image_size // 2 ** len(widths)
        feat = widths[-1] * side * side + sum(widths[:-1])
        self.heads = nn.ModuleList([nn.Linear(feat, latent_dim) for _ in range(heads)])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        pooled = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < len(self.stages) - 1:
                pooled.append(x.mean(dim=(2, 3)))
        h = torch.cat([*pooled, x.flatten(1)], dim=1)
        return [head(h) for head in self.heads]


class ConvDecoder(nn.Module):
    def __init__(self, out_channels: int, widths: Sequence[int], k: int, image_size: int, latent_dim: int,
                 residual_filters: int = 16, residual_layers: int = 5, residual: bool = True):
        super().__init__()
        widths = list(widths)
        self.side = image_size // 2 ** len(widths)
        self.top = widths[-1]
        self.fc = nn.Linear(latent_dim, self.top * self.side * self.side)
        rev = widths[::-1]
        ups = [_up(rev[i], rev[i + 1] if i + 1 < len(rev) else rev[-1], k) for i in range(len(rev))]
        self.stages = nn.Sequential(*ups)
        tail: list[nn.Module] = []
        width = rev[-1]
        if residual:
            tail += [same_conv(width, residual_filters, k), ResidualBlock(residual_filters, residual_layers, k)]
            width = residual_filters
        tail += [same_conv(width, out_channels, k)]
        self.tail = nn.Sequential(*tail)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.fc(z).view(-1, self.top, self.side, self.side)
        return torch.sigmoid(self.tail(self.stages(h)))


class ResVAE(nn.Module):
    def __init__(self, config: VAEConfig):
        super().__init__()
        self.config = config
        widths = [config.base_filters * 2 ** i for i in range(config.encoder_stages)]
        self.encoder = ConvEncoder(1, widths, config.kernel_size, config.image_size, config.latent_dim, heads=2)
        self.decoder = ConvDecoder(
            1, widths, config.kernel_size, config.image_size, config.latent_dim,
            config.residual_filters, config.residual_layers,
        )

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        size = self.config.image_size
        if x.ndim == 3:
            x = x.unsqueeze(1)
        if x.shape[1:] != (1, size, size):
            raise ValueError(f"encoder expects 1×{size}×{size} inputs, got {tuple(x.shape[1:])}")
        mu, log_var = self.encoder(x)
        return EncoderOutput(mu, log_var)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(f"decoder expects latents of length {self.config.latent_dim}, got {tuple(z.shape)}")
        return self.decoder(z)

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        enc = self.encode(x)
        if noise is None:
            noise = torch.randn_like(enc.mu)
        return self.decode(reparameterize(enc, noise)), enc


# --------------------------------------------------------------------------- math


def reparameterize(enc: EncoderOutput, noise: torch.Tensor) -> torch.Tensor:
    return enc.mu + torch.exp(0.5 * enc.log_var) * noise


def kl_divergence(enc: EncoderOutput) -> torch.Tensor:
    """KL[N(mu, sigma) || N(0, 1)] summed over latent dims, averaged over the batch."""
    mu, lv = enc.mu, enc.log_var
    if mu.ndim == 1:
        mu, lv = mu.unsqueeze(0), lv.unsqueeze(0)
    per_sample = 0.5 * torch.sum(mu.pow(2) + torch.exp(lv) - 1.0 - lv, dim=1)
    return per_sample.mean()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).flatten(1).sum(dim=1).mean()


def vae_loss(x: torch.Tensor, x_hat: torch.Tensor, enc: EncoderOutput, beta: float) -> torch.Tensor:
    return reconstruction_loss(x, x_hat) + beta * kl_divergence(enc)


# --------------------------------------------------------------------------- training


def build_resvae(config: VAEConfig) -> ResVAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = ResVAE(config)
    return model


def masks_to_tensor(masks) -> torch.Tensor:
    if isinstance(masks, torch.Tensor):
        t = masks.float()
    elif isinstance(masks, np.ndarray):
        t = torch.from_numpy(masks.astype(np.float32))
    else:
        arrs = [m.pixels if isinstance(m, SkeletonMask) else np.asarray(m) for m in masks]
        t = torch.from_numpy(np.stack(arrs).astype(np.float32))
    return t.unsqueeze(1) if t.ndim == 3 else t


def to_checkpoint(model: ResVAE, history: list[dict] | None = None) -> Checkpoint:
    weights = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint("resvae", model.config.to_dict(), weights, list(history or []), model.config.seed)


def model_from_checkpoint(ckpt: Checkpoint) -> ResVAE:
    ckpt.require_kind("resvae")
    model = ResVAE(VAEConfig.from_dict(ckpt.config))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items()})
    return model.eval()


def batch_slices(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Mini-batch bounds; a trailing singleton is merged into the previous batch (batch norm)."""
    slices = [(lo, min(lo + batch_size, n)) for lo in range(0, n, batch_size)]
    if len(slices) > 1 and slices[-1][1] - slices[-1][0] == 1:
        slices[-2:] = [(slices[-2][0], n)]
    return slices


def train_resvae(dataset, config: VAEConfig, log_path: str | Path | None = None) -> Checkpoint:
    """Adam over shuffled mini-batches; one history row per epoch."""
    x_all = masks_to_tensor(dataset)
    if x_all.shape[0] == 0:
        raise TrainingError("empty training set")
    model = build_resvae(config)
    if config.epochs == 0:
        write_log_header(log_path, VAE_LOG_FIELDS)
        return to_checkpoint(model)

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    history: list[dict] = []
    clock = Stopwatch()
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_fh:
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(VAE_LOG_FIELDS)
    n = x_all.shape[0]
    slices = batch_slices(n, config.batch_size)
    try:
        model.train()
        for epoch in range(1, config.epochs + 1):
            order = torch.randperm(n, generator=gen)
            tot = rec = kl = 0.0
            for lo, hi in slices:
                x = x_all[order[lo:hi]]
                enc = model.encode(x)
                noise = torch.randn(enc.mu.shape, generator=gen)
                x_hat = model.decode(reparameterize(enc, noise))
                r = reconstruction_loss(x, x_hat)
                k = kl_divergence(enc)
                loss = r + config.beta * k
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch} (recon={r.item()}, kl={k.item()})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                b = hi - lo
                tot += loss.item() * b
                rec += r.item() * b
                kl += k.item() * b
            row = {"epoch": epoch, "total_loss": tot / n, "recon_loss": rec / n, "kl_loss": kl / n}
            history.append(row)
            if writer:
                writer.writerow([epoch, row["total_loss"], row["recon_loss"], row["kl_loss"], f"{clock.elapsed():.3f}"])
            if epoch == 1 or epoch % 50 == 0 or epoch == config.epochs:
                log.info("resvae epoch %d total=%.4f recon=%.4f kl=%.4f", epoch, row["total_loss"], row["recon_loss"], row["kl_loss"])
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return to_checkpoint(model, history)


# --------------------------------------------------------------------------- inference


def _as_model(model_or_ckpt) -> ResVAE:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_from_checkpoint(model_or_ckpt)
    return model_or_ckpt.eval()


@torch.no_grad()
def encode(model_or_ckpt, masks) -> EncoderOutput:
    return _as_model(model_or_ckpt).encode(masks_to_tensor(masks))


def fit_latent_prior(model_or_ckpt, dataset, std_floor: float = 1e-6) -> LatentPrior:
    """Componentwise mean and population std of the encoded means."""
    x = masks_to_tensor(dataset)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    mu = encode(model_or_ckpt, x).mu.double().numpy()
    return LatentPrior(mu.mean(axis=0), np.maximum(mu.std(axis=0, ddof=0), std_floor))


def sample_latent(prior: LatentPrior, rng: np.random.Generator) -> np.ndarray:
    return prior.mean + prior.std * rng.standard_normal(prior.dim)


@torch.no_grad()
def decode_skeleton(model_or_ckpt, z: np.ndarray, threshold: float = 0.5, source_id: str = "") -> SkeletonMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    model = _as_model(model_or_ckpt)
    out = model.decode(torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1))[0, 0].numpy()
    return SkeletonMask((out > threshold).astype(np.uint8), source_id)


def sample_skeleton(model_or_ckpt, prior: LatentPrior, rng: np.random.Generator, threshold: float = 0.5) -> SkeletonMask:
    return decode_skeleton(model_or_ckpt, sample_latent(prior, rng), threshold)
