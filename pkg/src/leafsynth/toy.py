"""Procedural toy leaves: a desk-scale stand-in for real multispectral captures.

Each leaf is a tapered superellipse blade with a midrib and recursively
branching lateral veins, shaded green in the visible bands with a brighter
NIR band in which veins read darker than the blade.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.draw import line

from .dataset import KNOWN_LABELS, Mode, PairedSample, SkeletonMask, SpectralImage, boundary

BACKGROUND = {"B": 0.01, "G": 0.01, "R": 0.01, "NIR": 0.03}
BLADE = {"B": 0.10, "G": 0.46, "R": 0.20, "NIR": 0.82}
VEIN_SHIFT = {"B": 0.05, "G": 0.14, "R": 0.09}
VEIN_NIR_FACTOR = 0.62


@dataclass
class ToyLeaf:
    """All rasters of one procedural leaf."""

    blade: np.ndarray  # bool H×W
    veins: np.ndarray  # bool H×W, inside blade
    skeleton: np.ndarray  # uint8 H×W
    bands: np.ndarray  # float H×W×4 in KNOWN_LABELS order

    def image(self, labels) -> SpectralImage:
        idx = [KNOWN_LABELS.index(lb) for lb in labels]
        return SpectralImage(self.bands[..., idx], tuple(labels))


def _draw_segment(canvas: np.ndarray, p0, p1) -> None:
    h, w = canvas.shape
    r0, c0 = (int(round(v)) for v in p0)
    r1, c1 = (int(round(v)) for v in p1)
    rr, cc = line(r0, c0, r1, c1)
    keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    canvas[rr[keep], cc[keep]] = True


def _branch(canvas, origin, angle, length, depth, rng) -> None:
    end = (origin[0] - length * math.cos(angle), origin[1] + length * math.sin(angle))
    _draw_segment(canvas, origin, end)
    if depth <= 0 or length < 3:
        return
    t = rng.uniform(0.4, 0.7)
    mid = (origin[0] + t * (end[0] - origin[0]), origin[1] + t * (end[1] - origin[1]))
    side = 1 if rng.random() < 0.5 else -1
    _branch(canvas, mid, angle + side * rng.uniform(0.3, 0.6), length * rng.uniform(0.35, 0.55), depth - 1, rng)


def draw_toy_leaf(size: int, rng: np.random.Generator) -> ToyLeaf:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    tilt = rng.uniform(-math.pi / 8, math.pi / 8)
    a = rng.uniform(0.30, 0.38) * size  # half-length along midrib
    b = rng.uniform(0.20, 0.28) * size  # half-width
    n = rng.uniform(1.8, 2.8)
    taper = rng.uniform(0.15, 0.35)
    lobes = int(rng.choice([3, 5]))
    lobe_amp = rng.uniform(0.0, 0.07)

    # u runs base→tip along the midrib (tip towards the top of the frame), v across
    dy, dx = rows - cy, cols - cx
    u = -dy * math.cos(tilt) + dx * math.sin(tilt)
    v = dy * math.sin(tilt) + dx * math.cos(tilt)
    width = b * (1.0 - taper * u / a)
    psi = np.arctan2(v, u)
    level = np.abs(u / a) ** n + np.abs(v / width.clip(1e-6)) ** n
    blade = level <= 1.0 + lobe_amp * np.cos(lobes * psi)
    labels, count = ndimage.label(blade)
    if count > 1:
        areas = ndimage.sum(blade, labels, range(1, count + 1))
        blade = labels == (1 + int(np.argmax(areas)))

    def at(uu, vv):
        return (cy - uu * math.cos(tilt) + vv * math.sin(tilt), cx + uu * math.sin(tilt) + vv * math.cos(tilt))

    veins = np.zeros((size, size), dtype=bool)
    _draw_segment(veins, at(-a, 0.0), at(a, 0.0))
    n_lat = int(rng.integers(3, 5))
    for i in range(n_lat):
        uu = -a * 0.6 + (i + rng.uniform(0.2, 0.8)) * (1.5 * a / n_lat)
        for side in (-1, 1):
            spread = rng.uniform(0.6, 1.0)
            # direction measured from the midrib's tip direction
            ang = tilt + side * spread
            length = b * rng.uniform(0.7, 1.1)
            _branch(veins, at(uu, 0.0), ang, length, 1, rng)
    if size >= 128:
        veins = ndimage.binary_dilation(veins, iterations=max(1, size // 256))
    veins &= ndimage.binary_erosion(blade)

    skeleton = (boundary(blade) | veins).astype(np.uint8)

    # smooth shading: directional light plus low-frequency mottling
    light = 0.82 + 0.18 * (0.5 * (u / a) + 0.5 * (v / b)).clip(-1, 1)
    mottle = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10)
    mottle = mottle / (np.abs(mottle).max() + 1e-12)
    shade = (light + 0.06 * mottle).clip(0.6, 1.05)

    bands = np.empty((size, size, 4))
    for i, lb in enumerate(KNOWN_LABELS):
        plane = BLADE[lb] * shade * rng.uniform(0.92, 1.08)
        if lb == "NIR":
            plane = np.where(veins, plane * VEIN_NIR_FACTOR, plane)
        else:
            plane = np.where(veins, plane + VEIN_SHIFT[lb], plane)
        bands[..., i] = np.where(blade, plane, BACKGROUND[lb])
    return ToyLeaf(blade, veins, skeleton, bands.clip(0.0, 1.0))


def generate_toy_dataset(
    n: int, size: int = 64, seed: int = 0, mode: Mode | str = Mode.RGB, return_leaves: bool = False
):
    """Draw ``n`` procedural leaves with exact skeletons, deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 32 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 32, got {size}")
    mode = Mode(mode)
    children = np.random.SeedSequence(seed).spawn(n)
    samples, leaves = [], []
    for i, ss in enumerate(children):
        leaf = draw_toy_leaf(size, np.random.default_rng(ss))
        sid = f"toy{i:04d}"
        img = leaf.image(mode.channels)
        img.source_id = sid
        samples.append(PairedSample(SkeletonMask(leaf.skeleton, sid), img, mode, seed=seed))
        leaves.append(leaf)
    return (samples, leaves) if return_leaves else samples
