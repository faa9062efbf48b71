"""End-to-end leaf generation, artifact refinement and the qualitative checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from ._util import derive_seed
from .checkpoint import Checkpoint, CheckpointError
from .dataset import PairedSample, SkeletonMask, SpectralImage
from . import pix2pix, resvae

log = logging.getLogger(__name__)

BACKGROUND_THRESHOLD = 0.05


class RefinementError(ValueError):
    pass


@dataclass
class GeneratedLeaf:
    skeleton: SkeletonMask
    image: SpectralImage
    latent: np.ndarray
    seed: int
    refined: bool = False

    def __post_init__(self) -> None:
        if self.skeleton.shape != self.image.shape:
            raise ValueError("skeleton and image sizes differ")


@dataclass
class ComponentLabeling:
    labels: np.ndarray
    component_count: int
    areas: np.ndarray


_STRUCTURE = {4: ndimage.generate_binary_structure(2, 1), 8: ndimage.generate_binary_structure(2, 2)}


def label_components(mask: np.ndarray, connectivity: int = 8) -> ComponentLabeling:
    """Connected components numbered 1..k in raster order of each component's first pixel."""
    if connectivity not in _STRUCTURE:
        raise ValueError("connectivity must be 4 or 8")
    fg = np.asarray(mask) > 0
    labels, count = ndimage.label(fg, structure=_STRUCTURE[connectivity])
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return ComponentLabeling(labels, int(count), areas)


def refine(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 8-connected foreground component; holes stay empty."""
    lab = label_components(mask, 8)
    if lab.component_count == 0:
        raise RefinementError("cannot refine an empty mask")
    keep = 1 + int(np.argmax(lab.areas))  # ties go to the earliest component
    return (lab.labels == keep).astype(np.uint8)


def holes(mask: np.ndarray) -> np.ndarray:
    """Background pixels (4-connected) not reachable from the image border."""
    bg = np.asarray(mask) == 0
    lab, _ = ndimage.label(bg, structure=_STRUCTURE[4])
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    return bg & ~np.isin(lab, border)


def leaf_region(image: SpectralImage, threshold: float = BACKGROUND_THRESHOLD) -> np.ndarray:
    return (image.pixels > threshold).any(axis=2)


def refine_colorized(leaf: GeneratedLeaf, threshold: float = BACKGROUND_THRESHOLD,
                     background: float = 0.0) -> GeneratedLeaf:
    """Blank every colorized blob detached from the main leaf region."""
    region = leaf_region(leaf.image, threshold)
    removed = region & ~refine(region).astype(bool)
    px = leaf.image.pixels.copy()
    px[removed] = background
    skel = (leaf.skeleton.pixels.astype(bool) & ~removed).astype(np.uint8)
    return replace(
        leaf,
        skeleton=SkeletonMask(skel, leaf.skeleton.source_id),
        image=SpectralImage(px, leaf.image.channel_labels, leaf.image.source_id),
        refined=True,
    )


def check_compatible(vae_ckpt: Checkpoint, prior: resvae.LatentPrior, p2p_ckpt: Checkpoint) -> None:
    vae_ckpt.require_kind("resvae")
    p2p_ckpt.require_kind("pix2pix")
    vsize, psize = vae_ckpt.config["image_size"], p2p_ckpt.config["image_size"]
    if vsize != psize:
        raise CheckpointError(f"ResVAE size {vsize} and Pix2pix size {psize} are incompatible")
    if prior.dim != vae_ckpt.config["latent_dim"]:
        raise CheckpointError(f"prior has {prior.dim} dims, ResVAE latent has {vae_ckpt.config['latent_dim']}")


def generate_leaves(n: int, vae_ckpt: Checkpoint, prior: resvae.LatentPrior, p2p_ckpt: Checkpoint,
                    seed: int, refine_skeletons: bool = True, threshold: float = 0.5,
                    dropout: bool = True) -> list[GeneratedLeaf]:
    """latent draw → decoded skeleton → optional refinement → colorized leaf, per leaf."""
    if n < 1:
        raise ValueError("n must be >= 1")
    check_compatible(vae_ckpt, prior, p2p_ckpt)
    vae = resvae.model_from_checkpoint(vae_ckpt)
    G, _, cfg = pix2pix.networks_from_checkpoint(p2p_ckpt)
    out = []
    for i in range(n):
        leaf_seed = derive_seed(seed, "leaf", i)
        rng = np.random.default_rng(leaf_seed)
        z = resvae.sample_latent(prior, rng)
        sid = f"leaf{i:04d}"
        skel = resvae.decode_skeleton(vae, z, threshold, sid)
        if refine_skeletons:
            try:
                skel = SkeletonMask(refine(skel.pixels), sid)
            except RefinementError as exc:
                raise RefinementError(f"{sid}: decoded skeleton is empty at threshold {threshold}") from exc
        image = pix2pix.translate((G, cfg.mode), skel, dropout=dropout, seed=derive_seed(leaf_seed, "dropout"))
        out.append(GeneratedLeaf(skel, image, z, leaf_seed, refined=refine_skeletons))
    return out


def mean_abs_error(a: SpectralImage | np.ndarray, b: SpectralImage | np.ndarray) -> float:
    pa = a.pixels if isinstance(a, SpectralImage) else np.asarray(a)
    pb = b.pixels if isinstance(b, SpectralImage) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch {pa.shape} vs {pb.shape}")
    return float(np.abs(pa - pb).mean())


def consistency_check(p2p_ckpt, sample: PairedSample, dropout: bool = False, seed: int = 0) -> float:
    """Mean absolute error between the translation of a training skeleton and its own target."""
    return mean_abs_error(pix2pix.translate(p2p_ckpt, sample.skeleton, dropout=dropout, seed=seed), sample.target)


def consistency_ranking(p2p_ckpt, samples: Sequence[PairedSample], seed: int = 0) -> tuple[float, list[dict]]:
    """Fraction of samples whose translation is closer to their own target than to a random other one."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    model = pix2pix.load_generator(p2p_ckpt)
    rng = np.random.default_rng(seed)
    rows, wins = [], 0
    for i, s in enumerate(samples):
        j = int(rng.integers(len(samples) - 1))
        j += j >= i
        out = pix2pix.translate(model, s.skeleton, dropout=False)
        own, other = mean_abs_error(out, s.target), mean_abs_error(out, samples[j].target)
        wins += own < other
        rows.append({"source_id": s.sample_id, "own_error": own, "other_id": samples[j].sample_id, "other_error": other})
    return wins / len(samples), rows


def translate_unseen(p2p_ckpt, skeleton: SkeletonMask, dropout: bool = True, seed: int = 0) -> SpectralImage:
    """Translate a skeleton that was held out of training."""
    return pix2pix.translate(p2p_ckpt, skeleton, dropout=dropout, seed=seed)
