"""Skeleton→leaf translation with a U-Net generator and a PatchGAN discriminator.

Tensors inside this module live in [-1, 1] (tanh range); the public
``translate`` interface maps to and from the [0, 1] rasters used elsewhere.
Normalisation layers always use the statistics of the current batch, so a
single skeleton translates the same way in training and inference mode.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._util import Stopwatch, write_log_header
from .checkpoint import Checkpoint
from .dataset import Mode, PairedSample, SkeletonMask, SpectralImage
from .resvae import TrainingError

log = logging.getLogger(__name__)

P2P_LOG_FIELDS = ["step", "d_loss", "g_adv_loss", "g_l1_loss", "wall_time"]


@dataclass
class TranslatorConfig:
    lambda_l1: float = 100.0
    learning_rate: float = 0.0002
    steps: int = 12000
    batch_size: int = 1
    init_std: float = 0.002
    mode: str = "RGB"
    seed: int = 0
    image_size: int = 256
    base_filters: int = 64
    disc_filters: int = 64
    disc_layers: int = 3
    num_downs: int | None = None
    dropout: float = 0.5
    adam_betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode).value
        self.adam_betas = tuple(self.adam_betas)
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.image_size & (self.image_size - 1):
            raise ValueError("image_size must be a power of two")

    @property
    def depth(self) -> int:
        return self.num_downs or int(math.log2(self.image_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TranslatorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------- networks


def _norm(ch: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(ch, track_running_stats=False)


class NoiseDropout(nn.Module):
    """Dropout that can stay active outside training; it is the generator's noise source."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.at_inference = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.dropout(x, self.p, training=self.training or self.at_inference)


class UNetGenerator(nn.Module):
    def __init__(self, in_channels: int = 1, out_channels: int = 3, image_size: int = 256,
                 base_filters: int = 64, num_downs: int | None = None, dropout: float = 0.5,
                 dropout_stages: int = 3):
        super().__init__()
        n = num_downs or int(math.log2(image_size))
        if image_size % 2 ** n:
            raise ValueError(f"image_size {image_size} cannot be halved {n} times")
        self.image_size = image_size
        self.in_channels = in_channels
        widths = [base_filters * min(8, 2 ** i) for i in range(n)]
        self.down = nn.ModuleList()
        cin = in_channels
        for i, w in enumerate(widths):
            layers: list[nn.Module] = [] if i == 0 else [nn.LeakyReLU(0.2)]
            layers.append(nn.Conv2d(cin, w, 4, stride=2, padding=1))
            if 0 < i < n - 1:
                layers.append(_norm(w))
            self.down.append(nn.Sequential(*layers))
            cin = w
        self.up = nn.ModuleList()
        for j in range(n - 1, -1, -1):
            cin = widths[j] if j == n - 1 else 2 * widths[j]
            if j == 0:
                layers = [nn.ReLU(), nn.ConvTranspose2d(cin, out_channels, 4, stride=2, padding=1), nn.Tanh()]
            else:
                layers = [nn.ReLU(), nn.ConvTranspose2d(cin, widths[j - 1], 4, stride=2, padding=1), _norm(widths[j - 1])]
                if n - 1 - j < dropout_stages and dropout > 0:
                    layers.append(NoiseDropout(dropout))
            self.up.append(nn.Sequential(*layers))

    def set_inference_dropout(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, NoiseDropout):
                m.at_inference = enabled

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(
                f"generator expects {self.in_channels}×{self.image_size}×{self.image_size}, got {tuple(x.shape[1:])}"
            )
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for k, block in enumerate(self.up):
            x = block(x)
            if skips:
                x = torch.cat([x, skips.pop()], dim=1)
        return x


class PatchDiscriminator(nn.Module):
    """``n_layers`` stride-2 blocks, then two stride-1 convolutions to a logit grid."""

    def __init__(self, in_channels: int = 4, base_filters: int = 64, n_layers: int = 3):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_channels, base_filters, 4, 2, 1), nn.LeakyReLU(0.2)]
        prev = base_filters
        for i in range(1, n_layers):
            w = base_filters * min(2 ** i, 8)
            layers += [nn.Conv2d(prev, w, 4, 2, 1), _norm(w), nn.LeakyReLU(0.2)]
            prev = w
        w = base_filters * min(2 ** n_layers, 8)
        layers += [nn.Conv2d(prev, w, 4, 1, 1), _norm(w), nn.LeakyReLU(0.2), nn.Conv2d(w, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)

    def geometry(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) of every convolution, input to output."""
        return [(m.kernel_size[0], m.stride[0], m.padding[0]) for m in self.net if isinstance(m, nn.Conv2d)]

    def forward(self, skeleton: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        if skeleton.shape[0] != image.shape[0] or skeleton.shape[2:] != image.shape[2:]:
            raise ValueError(f"skeleton {tuple(skeleton.shape)} and image {tuple(image.shape)} do not match")
        return self.net(torch.cat([skeleton, image], dim=1))


def init_weights(module: nn.Module, std: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d) and m.affine:
            nn.init.normal_(m.weight, 1.0, std)
            nn.init.zeros_(m.bias)


def build_networks(config: TranslatorConfig) -> tuple[UNetGenerator, PatchDiscriminator]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        G = UNetGenerator(1, 3, config.image_size, config.base_filters, config.num_downs, config.dropout)
        D = PatchDiscriminator(4, config.disc_filters, config.disc_layers)
        init_weights(G, config.init_std)
        init_weights(D, config.init_std)
    return G, D


# --------------------------------------------------------------------------- tensors


def skeletons_to_tensor(masks) -> torch.Tensor:
    arrs = [m.pixels if isinstance(m, SkeletonMask) else np.asarray(m) for m in masks]
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).unsqueeze(1) * 2.0 - 1.0


def images_to_tensor(images) -> torch.Tensor:
    arrs = [im.pixels if isinstance(im, SpectralImage) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2) * 2.0 - 1.0


def tensor_to_unit(t: torch.Tensor) -> np.ndarray:
    """(B, C, H, W) tanh-range tensor → (B, H, W, C) float array in [0, 1]."""
    return ((t.detach().permute(0, 2, 3, 1).double().numpy() + 1.0) / 2.0).clip(0.0, 1.0)


# --------------------------------------------------------------------------- losses


def patch_probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits)


def adversarial_bce(logits: torch.Tensor, real: bool) -> torch.Tensor:
    """Binary cross-entropy of every patch against an all-real or all-fake target."""
    # -log(sigmoid(l)) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
    return F.softplus(-logits).mean() if real else F.softplus(logits).mean()


def l1_loss(y: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    if y.shape != g.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(g.shape)}")
    return (y - g).abs().mean()


def discriminator_loss(D: PatchDiscriminator, skeleton: torch.Tensor, target: torch.Tensor,
                       fake: torch.Tensor) -> torch.Tensor:
    """BCE(D(y, x) → real) + BCE(D(y, G(y)) → fake); the generator output is held constant."""
    return adversarial_bce(D(skeleton, target), True) + adversarial_bce(D(skeleton, fake.detach()), False)


def generator_loss_terms(D: PatchDiscriminator, skeleton: torch.Tensor, target: torch.Tensor,
                         fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return adversarial_bce(D(skeleton, fake), True), l1_loss(target, fake)


def generator_loss(D: PatchDiscriminator, skeleton: torch.Tensor, target: torch.Tensor,
                   fake: torch.Tensor, lambda_l1: float) -> torch.Tensor:
    """Non-saturating adversarial term plus ``lambda_l1`` times the L1 distance."""
    adv, l1 = generator_loss_terms(D, skeleton, target, fake)
    return adv + lambda_l1 * l1


# --------------------------------------------------------------------------- training


def to_checkpoint(G: UNetGenerator, D: PatchDiscriminator, config: TranslatorConfig,
                  history: list[dict] | None = None) -> Checkpoint:
    weights = {f"G.{k}": v.detach().cpu().numpy().copy() for k, v in G.state_dict().items()}
    weights.update({f"D.{k}": v.detach().cpu().numpy().copy() for k, v in D.state_dict().items()})
    return Checkpoint("pix2pix", config.to_dict(), weights, list(history or []), config.seed)


def networks_from_checkpoint(ckpt: Checkpoint) -> tuple[UNetGenerator, PatchDiscriminator, TranslatorConfig]:
    ckpt.require_kind("pix2pix")
    config = TranslatorConfig.from_dict(ckpt.config)
    G, D = build_networks(config)
    G.load_state_dict({k[2:]: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items() if k.startswith("G.")})
    D.load_state_dict({k[2:]: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items() if k.startswith("D.")})
    return G.eval(), D.eval(), config


def train_pix2pix(dataset: Sequence[PairedSample], config: TranslatorConfig,
                  log_path: str | Path | None = None) -> Checkpoint:
    """Alternate one discriminator and one generator Adam update per step."""
    if not dataset:
        raise TrainingError("empty training set")
    modes = {s.mode.value for s in dataset}
    if modes != {config.mode}:
        raise TrainingError(f"dataset modes {sorted(modes)} do not match configured mode {config.mode}")
    G, D = build_networks(config)
    if config.steps == 0:
        write_log_header(log_path, P2P_LOG_FIELDS)
        return to_checkpoint(G.eval(), D.eval(), config)

    skel_all = skeletons_to_tensor([s.skeleton for s in dataset])
    tgt_all = images_to_tensor([s.target for s in dataset])
    n = skel_all.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    history: list[dict] = []
    clock = Stopwatch()
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(P2P_LOG_FIELDS)

    order = torch.empty(0, dtype=torch.long)
    cursor = 0
    G.train()
    D.train()
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed + 1)
            for step in range(1, config.steps + 1):
                idx = []
                while len(idx) < config.batch_size:
                    if cursor >= order.numel():
                        order, cursor = torch.randperm(n, generator=gen), 0
                    take = min(config.batch_size - len(idx), order.numel() - cursor)
                    idx.extend(order[cursor:cursor + take].tolist())
                    cursor += take
                y, x = skel_all[idx], tgt_all[idx]
                fake = G(y)

                opt_d.zero_grad()
                d_loss = discriminator_loss(D, y, x, fake)
                d_loss.backward()
                opt_d.step()

                opt_g.zero_grad()
                adv, l1 = generator_loss_terms(D, y, x, fake)
                g_loss = adv + config.lambda_l1 * l1
                g_loss.backward()
                opt_g.step()

                d, a, l = d_loss.item(), adv.item(), l1.item()
                if not all(map(math.isfinite, (d, a, l))):
                    raise TrainingError(f"non-finite loss at step {step} (d={d}, g_adv={a}, g_l1={l})")
                history.append({"step": step, "d_loss": d, "g_adv_loss": a, "g_l1_loss": l})
                if writer:
                    writer.writerow([step, d, a, l, f"{clock.elapsed():.3f}"])
                if step == 1 or step % 500 == 0 or step == config.steps:
                    log.info("pix2pix step %d d=%.4f g_adv=%.4f g_l1=%.4f", step, d, a, l)
    finally:
        if log_fh:
            log_fh.close()
    return to_checkpoint(G.eval(), D.eval(), config, history)


# --------------------------------------------------------------------------- inference


def load_generator(model_or_ckpt) -> tuple[UNetGenerator, Mode]:
    if isinstance(model_or_ckpt, Checkpoint):
        G, _, config = networks_from_checkpoint(model_or_ckpt)
        return G, Mode(config.mode)
    G, mode = model_or_ckpt
    return G.eval(), Mode(mode)


@torch.no_grad()
def generator_forward(G: UNetGenerator, skeletons, dropout: bool = False, seed: int | None = None) -> np.ndarray:
    """Translate a batch of skeletons; returns (B, H, W, 3) arrays in [0, 1]."""
    G.eval()
    G.set_inference_dropout(dropout)
    y = skeletons_to_tensor(skeletons)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        out = G(y)
    return tensor_to_unit(out)


@torch.no_grad()
def patch_grid(D: PatchDiscriminator, skeletons, images) -> np.ndarray:
    """Per-patch real/fake probabilities, shape (B, h, w)."""
    logits = D(skeletons_to_tensor(skeletons), images_to_tensor(images))
    return patch_probabilities(logits)[:, 0].double().numpy()


def translate(model_or_ckpt, skeleton: SkeletonMask, dropout: bool = True, seed: int = 0) -> SpectralImage:
    """Colorize one skeleton; channels follow the checkpoint's mode."""
    G, mode = load_generator(model_or_ckpt)
    if skeleton.shape != (G.image_size, G.image_size):
        raise ValueError(f"skeleton size {skeleton.shape} != trained size {(G.image_size, G.image_size)}")
    px = generator_forward(G, [skeleton], dropout=dropout, seed=seed)[0]
    return SpectralImage(px, mode.channels, skeleton.source_id)
