"""Reconstruction-error anomaly scoring of synthetic leaves and ROC/AUC summaries.

An autoencoder built from the ResVAE encoder/decoder stages (no sampling, no
KL term, no residual stack) is trained on real leaves only. A leaf's anomaly
score is the mean squared error of its reconstruction. Synthetic is the
positive class in every ROC computed here.
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
from torch import nn

from ._util import Stopwatch, write_log_header
from .checkpoint import Checkpoint
from .dataset import SpectralImage
from .resvae import ConvDecoder, ConvEncoder, TrainingError, batch_slices, reconstruction_loss

log = logging.getLogger(__name__)

REAL, SYNTHETIC = "real", "synthetic"

AE_LOG_FIELDS = ["epoch", "recon_loss", "wall_time"]


@dataclass
class AEConfig:
    latent_dim: int = 32
    learning_rate: float = 0.001
    epochs: int = 2000
    batch_size: int = 64
    kernel_size: int = 4
    seed: int = 0
    image_size: int = 256
    channels: int = 3
    encoder_stages: int = 5
    base_filters: int = 32

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("latent_dim", "batch_size", "kernel_size", "image_size", "channels", "encoder_stages", "base_filters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_size % (2 ** self.encoder_stages):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**{self.encoder_stages}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ConvAutoencoder(nn.Module):
    def __init__(self, config: AEConfig):
        super().__init__()
        self.config = config
        widths = [config.base_filters * 2 ** i for i in range(config.encoder_stages)]
        self.encoder = ConvEncoder(config.channels, widths, config.kernel_size, config.image_size, config.latent_dim, heads=1)
        self.decoder = ConvDecoder(config.channels, widths, config.kernel_size, config.image_size, config.latent_dim, residual=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c, s = self.config.channels, self.config.image_size
        if x.shape[1:] != (c, s, s):
            raise ValueError(f"autoencoder expects {c}×{s}×{s} inputs, got {tuple(x.shape[1:])}")
        return self.decoder(self.encoder(x)[0])


def images_to_tensor(images) -> torch.Tensor:
    arrs = [im.pixels if isinstance(im, SpectralImage) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).permute(0, 3, 1, 2)


def build_autoencoder(config: AEConfig) -> ConvAutoencoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return ConvAutoencoder(config)


def to_checkpoint(model: ConvAutoencoder, history=None) -> Checkpoint:
    weights = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    return Checkpoint("anomaly_ae", model.config.to_dict(), weights, list(history or []), model.config.seed)


def model_from_checkpoint(ckpt: Checkpoint) -> ConvAutoencoder:
    ckpt.require_kind("anomaly_ae")
    model = ConvAutoencoder(AEConfig.from_dict(ckpt.config))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items()})
    return model.eval()


def train_anomaly_ae(real_images: Sequence[SpectralImage], config: AEConfig,
                     log_path: str | Path | None = None) -> Checkpoint:
    """Fit the autoencoder as an identity map on real images (squared error, Adam)."""
    if len(real_images) == 0:
        raise TrainingError("empty training set")
    x_all = images_to_tensor(real_images)
    model = build_autoencoder(config)
    if config.epochs == 0:
        write_log_header(log_path, AE_LOG_FIELDS)
        return to_checkpoint(model.eval())
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n = x_all.shape[0]
    slices = batch_slices(n, config.batch_size)
    history = []
    clock = Stopwatch()
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh, lineterminator="\n") if log_fh else None
    if writer:
        writer.writerow(AE_LOG_FIELDS)
    model.train()
    try:
        for epoch in range(1, config.epochs + 1):
            order = torch.randperm(n, generator=gen)
            total = 0.0
            for lo, hi in slices:
                x = x_all[order[lo:hi]]
                loss = reconstruction_loss(x, model(x))
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * (hi - lo)
            history.append({"epoch": epoch, "recon_loss": total / n})
            if writer:
                writer.writerow([epoch, total / n, f"{clock.elapsed():.3f}"])
            if epoch == 1 or epoch % 50 == 0 or epoch == config.epochs:
                log.info("anomaly ae epoch %d recon=%.4f", epoch, total / n)
    finally:
        if log_fh:
            log_fh.close()
    return to_checkpoint(model.eval(), history)


# --------------------------------------------------------------------------- scoring


@dataclass(frozen=True)
class AnomalyScore:
    value: float
    source_id: str
    label: str

    def __post_init__(self) -> None:
        if not (math.isfinite(self.value) and self.value >= 0):
            raise ValueError(f"invalid anomaly score {self.value}")
        if self.label not in (REAL, SYNTHETIC):
            raise ValueError(f"label must be {REAL!r} or {SYNTHETIC!r}")


def _as_model(model_or_ckpt) -> ConvAutoencoder:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_from_checkpoint(model_or_ckpt)
    return model_or_ckpt.eval()


@torch.no_grad()
def reconstruct(model_or_ckpt, images: Sequence[SpectralImage]) -> np.ndarray:
    model = _as_model(model_or_ckpt)
    return model(images_to_tensor(images)).permute(0, 2, 3, 1).double().numpy()


def score_images(model_or_ckpt, images: Sequence[SpectralImage], label: str, batch_size: int = 32) -> list[AnomalyScore]:
    model = _as_model(model_or_ckpt)
    out = []
    for lo in range(0, len(images), batch_size):
        chunk = list(images[lo:lo + batch_size])
        rec = reconstruct(model, chunk)
        for im, r in zip(chunk, rec):
            if im.pixels.shape != r.shape:
                raise ValueError(f"{im.source_id}: shape {im.pixels.shape} != model shape {r.shape}")
            out.append(AnomalyScore(float(np.mean((im.pixels - r) ** 2)), im.source_id, label))
    return out


def anomaly_score(model_or_ckpt, img: SpectralImage, label: str = SYNTHETIC) -> AnomalyScore:
    """Mean squared reconstruction error of one image."""
    return score_images(model_or_ckpt, [img], label)[0]


# --------------------------------------------------------------------------- ROC


@dataclass
class ROCResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores: Sequence[AnomalyScore], positive: str = SYNTHETIC) -> ROCResult:
    """Sweep every distinct score as a threshold (score >= t flags positive)."""
    values = np.array([s.value for s in scores], dtype=np.float64)
    is_pos = np.array([s.label == positive for s in scores])
    pos, neg = np.sort(values[is_pos]), np.sort(values[~is_pos])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs at least one score of each class")
    thresholds = np.unique(values)[::-1]
    tpr = (pos.size - np.searchsorted(pos, thresholds, side="left")) / pos.size
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    fpr = np.concatenate([[0.0], fpr])
    tpr = np.concatenate([[0.0], tpr])
    thresholds = np.concatenate([[np.inf], thresholds])
    roc = ROCResult(fpr, tpr, thresholds, 0.0)
    roc.auc = auc(roc)
    return roc


def auc(roc: ROCResult) -> float:
    """Trapezoidal area under the ROC points."""
    return float(np.sum(np.diff(roc.fpr) * (roc.tpr[1:] + roc.tpr[:-1]) / 2.0))


def youden_point(roc: ROCResult) -> dict:
    """Threshold maximising tpr - fpr, with the rates at that operating point.

    The (0, 0) sentinel with an infinite threshold is never chosen.
    """
    j = 1 + int(np.argmax(roc.tpr[1:] - roc.fpr[1:]))
    return {"threshold": float(roc.thresholds[j]), "tpr": float(roc.tpr[j]), "fpr": float(roc.fpr[j])}


def evaluate_synthetic_set(model_or_ckpt, real: Sequence[SpectralImage],
                           synthetic: Sequence[SpectralImage]) -> tuple[ROCResult, list[AnomalyScore]]:
    if not real or not synthetic:
        raise ValueError("both real and synthetic sets must be non-empty")
    model = _as_model(model_or_ckpt)
    scores = score_images(model, real, REAL) + score_images(model, synthetic, SYNTHETIC)
    return roc_curve(scores), scores


# --------------------------------------------------------------------------- files


def write_scores_csv(scores: Sequence[AnomalyScore], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "label", "s_x"])
        for s in scores:
            w.writerow([s.source_id, s.label, repr(s.value)])
    return path


def read_scores_csv(path: str | Path) -> list[AnomalyScore]:
    with open(path, newline="") as fh:
        return [AnomalyScore(float(r["s_x"]), r["source_id"], r["label"]) for r in csv.DictReader(fh)]


def write_roc_csv(roc: ROCResult, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow([repr(float(t)), repr(float(f)), repr(float(p))])
    return path


def plot_roc(roc: ROCResult, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.plot(roc.fpr, roc.tpr, color="tab:green", lw=2, label=f"AUC = {roc.auc:.3f}")
    ax.plot([0, 1], [0, 1], ls=":", color="gray", label="chance")
    ax.set_xlabel("false positive rate (real)")
    ax.set_ylabel("true positive rate (synthetic)")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path
