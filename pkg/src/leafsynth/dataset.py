"""Loading, calibration and preprocessing of multispectral leaf images.

Rasters are numpy arrays in row/column order. Spectral images are float64
H×W×C in [0, 1]; masks are uint8 H×W in {0, 1}.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.transform import resize

from ._util import derive_seed, read_png_u8, sha256_file, write_mask_png, write_png

log = logging.getLogger(__name__)

WAVELENGTH_LABELS = {430: "B", 530: "G", 685: "R", 740: "NIR"}
LABEL_WAVELENGTHS = {v: k for k, v in WAVELENGTH_LABELS.items()}
KNOWN_LABELS = ("B", "G", "R", "NIR")
PROBE_REFLECTANCES = (0.02, 0.50, 0.99)


class Mode(str, Enum):
    RGB = "RGB"
    RGNIR = "RGNIR"

    @property
    def channels(self) -> tuple[str, str, str]:
        return ("R", "G", "B") if self is Mode.RGB else ("R", "G", "NIR")


class DatasetError(Exception):
    """Raised for malformed inputs or a failing preprocessing stage."""


class CalibrationError(DatasetError):
    pass


class SkeletonError(DatasetError):
    pass


@dataclass
class SpectralImage:
    pixels: np.ndarray
    channel_labels: tuple[str, ...]
    source_id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3:
            raise ValueError(f"expected H×W×C raster, got shape {px.shape}")
        if not (np.isfinite(px).all() and px.min(initial=0.0) >= 0.0 and px.max(initial=0.0) <= 1.0):
            raise ValueError("pixel values must be finite and within [0, 1]")
        self.pixels = px
        self.channel_labels = tuple(self.channel_labels)
        if len(self.channel_labels) != px.shape[2]:
            raise ValueError(
                f"{len(self.channel_labels)} channel labels for {px.shape[2]} channels"
            )
        if len(set(self.channel_labels)) != len(self.channel_labels):
            raise ValueError(f"duplicate channel labels {self.channel_labels}")
        unknown = set(self.channel_labels) - set(KNOWN_LABELS)
        if unknown:
            raise ValueError(f"unknown channel label(s) {sorted(unknown)}; expected B, G, R or NIR")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def channel(self, label: str) -> np.ndarray:
        try:
            return self.pixels[..., self.channel_labels.index(label)]
        except ValueError:
            raise KeyError(f"{self.source_id}: no channel {label!r}") from None

    def select(self, labels: Sequence[str]) -> "SpectralImage":
        stack = np.stack([self.channel(lb) for lb in labels], axis=-1)
        return SpectralImage(stack, tuple(labels), self.source_id)

    def in_unit_range(self) -> bool:
        return bool(np.all(self.pixels >= 0.0) and np.all(self.pixels <= 1.0))


@dataclass
class SkeletonMask:
    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"mask must be H×W, got shape {px.shape}")
        if not np.isin(px, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.pixels = px.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool
    vflip: bool
    angle: float
    zoom: float

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(False, False, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"hflip": self.hflip, "vflip": self.vflip, "angle": self.angle, "zoom": self.zoom}


@dataclass
class PairedSample:
    skeleton: SkeletonMask
    target: SpectralImage
    mode: Mode
    augmentation: AugmentParams | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        if self.skeleton.shape != self.target.shape:
            raise ValueError(
                f"skeleton {self.skeleton.shape} and target {self.target.shape} differ in size"
            )
        if self.target.channel_labels != self.mode.channels:
            raise ValueError(
                f"{self.mode.value} target needs channels {self.mode.channels}, "
                f"got {self.target.channel_labels}"
            )

    @property
    def sample_id(self) -> str:
        return self.skeleton.source_id


@dataclass
class ReflectanceProbeSet:
    """Known probe reflectances and the measured mean intensity of each probe.

    ``measured_intensities`` has shape (3, C): one row per probe, one column
    per channel.
    """

    measured_intensities: np.ndarray
    known_reflectances: tuple[float, ...] = PROBE_REFLECTANCES

    def __post_init__(self) -> None:
        known = np.asarray(self.known_reflectances, dtype=np.float64)
        meas = np.asarray(self.measured_intensities, dtype=np.float64)
        if meas.ndim == 1:
            meas = meas[:, None]
        if known.shape != (3,) or meas.shape[0] != 3:
            raise CalibrationError("need exactly 3 probes")
        if not np.all(np.diff(known) > 0):
            raise CalibrationError(f"known reflectances not strictly increasing: {known}")
        bad = np.where(~np.all(np.diff(meas, axis=0) > 0, axis=0))[0]
        if bad.size:
            raise CalibrationError(
                f"measured probe intensities not strictly increasing in channel(s) {bad.tolist()}"
            )
        self.known_reflectances = tuple(known.tolist())
        self.measured_intensities = meas


# --------------------------------------------------------------------------- loading


def load_spectral_image(
    path: str | Path | Sequence[str | Path], channel_labels: Sequence[str], source_id: str | None = None
) -> SpectralImage:
    """Load an 8-bit raster (or one grayscale file per channel) scaled to [0, 1]."""
    labels = tuple(channel_labels)
    if isinstance(path, (str, Path)):
        raw = read_png_u8(path)
        if raw.ndim == 2:
            raw = raw[..., None]
        sid = source_id or Path(path).stem
    else:
        paths = list(path)
        if len(paths) != len(labels):
            raise ValueError(f"{len(paths)} files for {len(labels)} channel labels")
        planes = [read_png_u8(p) for p in paths]
        for p, pl in zip(paths, planes):
            if pl.ndim != 2:
                raise ValueError(f"{p}: expected a single-channel file")
        if len({pl.shape for pl in planes}) != 1:
            raise ValueError(f"channel files differ in size: {[pl.shape for pl in planes]}")
        raw = np.stack(planes, axis=-1)
        sid = source_id or Path(paths[0]).stem
    if raw.shape[2] != len(labels):
        raise ValueError(f"file has {raw.shape[2]} channels but {len(labels)} labels were given")
    return SpectralImage(raw.astype(np.float64) / 255.0, labels, sid)


# --------------------------------------------------------------------------- preprocessing


def remove_hot_pixels(img: SpectralImage, k: float = 1.5) -> SpectralImage:
    """Replace pixels brighter than ``k`` times their 3×3 median by that median."""
    if not k > 1:
        raise ValueError(f"k must exceed 1, got {k}")
    px = img.pixels
    med = ndimage.median_filter(px, size=(3, 3, 1), mode="nearest")
    hot = px > k * med
    out = np.where(hot, med, px)
    return SpectralImage(out, img.channel_labels, img.source_id)


def fit_calibration(probes: ReflectanceProbeSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel least-squares (gain, offset) mapping intensity to reflectance."""
    known = np.asarray(probes.known_reflectances)
    meas = probes.measured_intensities
    gains, offsets = [], []
    for c in range(meas.shape[1]):
        design = np.column_stack([meas[:, c], np.ones(3)])
        (g, o), *_ = np.linalg.lstsq(design, known, rcond=None)
        gains.append(g)
        offsets.append(o)
    return np.array(gains), np.array(offsets)


def calibrate_reflectance(
    img: SpectralImage, probes: ReflectanceProbeSet, clip: bool = True
) -> SpectralImage:
    meas = probes.measured_intensities
    if meas.shape[1] != img.pixels.shape[2]:
        raise CalibrationError(
            f"probe set has {meas.shape[1]} channels, image has {img.pixels.shape[2]}"
        )
    gain, offset = fit_calibration(probes)
    out = img.pixels * gain + offset
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return SpectralImage(out, img.channel_labels, img.source_id)


def measure_probes(img: SpectralImage, regions: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean intensity per channel inside each ``(r0, c0, r1, c1)`` rectangle."""
    rows = []
    for r0, c0, r1, c1 in regions:
        patch = img.pixels[r0:r1, c0:c1]
        if patch.size == 0:
            raise CalibrationError(f"empty probe region {(r0, c0, r1, c1)}")
        rows.append(patch.reshape(-1, patch.shape[2]).mean(axis=0))
    return np.array(rows)


def boundary(region: np.ndarray) -> np.ndarray:
    """One-pixel-wide inner boundary: the region minus its 4-neighbour erosion."""
    region = region.astype(bool)
    eroded = ndimage.binary_erosion(region, structure=ndimage.generate_binary_structure(2, 1))
    return region & ~eroded


def extract_skeleton(
    nir: SpectralImage | np.ndarray,
    vein_radius: int | None = None,
    min_vein_contrast: float = 0.05,
) -> SkeletonMask:
    """Leaf profile plus vein network from a calibrated NIR channel.

    The leaf region is the Otsu foreground of the NIR channel. Veins are the
    black top-hat response inside the region above its own Otsu level (and
    above ``min_vein_contrast``, so a textureless blade yields no veins).
    """
    if isinstance(nir, SpectralImage):
        sid = nir.source_id
        nir = nir.channel("NIR") if "NIR" in nir.channel_labels else nir.pixels[..., 0]
    else:
        sid = ""
    nir = np.asarray(nir, dtype=np.float64)
    if nir.ndim == 3:
        nir = nir[..., 0]
    if nir.max() <= nir.min():
        raise SkeletonError(f"{sid}: empty leaf region (constant NIR channel)")
    region = nir > threshold_otsu(nir)
    if not region.any():
        raise SkeletonError(f"{sid}: empty leaf region after thresholding")

    profile = boundary(region)

    if vein_radius is None:
        vein_radius = max(2, round(min(nir.shape) / 32))
    size = 2 * vein_radius + 1
    tophat = ndimage.grey_closing(nir, size=(size, size), mode="nearest") - nir
    response = np.where(region, tophat, 0.0)
    inside = response[region]
    level = threshold_otsu(inside) if inside.max() > inside.min() else np.inf
    veins = region & (response > max(level, min_vein_contrast))

    return SkeletonMask((profile | veins).astype(np.uint8), sid)


def resize_pair(img: SpectralImage, mask: SkeletonMask, size: int = 256, mode: Mode | str | None = None) -> PairedSample:
    if img.shape != mask.shape:
        raise ValueError(f"image {img.shape} and mask {mask.shape} differ in size")
    mode = Mode(mode) if mode is not None else _infer_mode(img.channel_labels)
    if img.shape == (size, size):
        px, mk = img.pixels.copy(), mask.pixels.copy()
    else:
        px = resize(
            img.pixels, (size, size, img.pixels.shape[2]),
            order=1, mode="edge", anti_aliasing=False, preserve_range=True,
        )
        mk = resize(
            mask.pixels.astype(np.float64), (size, size),
            order=0, mode="edge", anti_aliasing=False, preserve_range=True,
        )
        mk = (mk > 0.5).astype(np.uint8)
    target = SpectralImage(np.clip(px, 0.0, 1.0), img.channel_labels, img.source_id)
    return PairedSample(SkeletonMask(mk, mask.source_id), target, mode)


def _infer_mode(labels: Sequence[str]) -> Mode:
    for m in Mode:
        if tuple(labels) == m.channels:
            return m
    raise ValueError(f"channels {tuple(labels)} match neither RGB nor RGNIR")


# --------------------------------------------------------------------------- augmentation

MAX_ANGLE = math.pi / 4
ZOOM_RANGE = (0.8, 1.2)


def draw_augmentation(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(-MAX_ANGLE, MAX_ANGLE)),
        zoom=float(rng.uniform(*ZOOM_RANGE)),
    )


def _inverse_affine(params: AugmentParams, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    # forward map on (row, col) about the centre: zoom * R(angle) * F
    c, s = math.cos(params.angle), math.sin(params.angle)
    rot = np.array([[c, -s], [s, c]])
    flip = np.diag([-1.0 if params.vflip else 1.0, -1.0 if params.hflip else 1.0])
    inv = flip @ rot.T / params.zoom
    centre = (np.array(shape, dtype=np.float64) - 1.0) / 2.0
    return inv, centre - inv @ centre


def warp_raster(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    """Apply the augmentation geometry to an H×W or H×W×C raster; outside fills with 0."""
    inv, offset = _inverse_affine(params, arr.shape[:2])
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, inv, offset, order=order, mode="constant", cval=0.0)
    planes = [
        ndimage.affine_transform(arr[..., i], inv, offset, order=order, mode="constant", cval=0.0)
        for i in range(arr.shape[2])
    ]
    return np.stack(planes, axis=-1)


def forward_point(params: AugmentParams, shape: tuple[int, int], point: tuple[float, float]) -> np.ndarray:
    """Where a (row, col) point lands under the augmentation; used for checks."""
    inv, offset = _inverse_affine(params, shape)
    return np.linalg.solve(inv, np.asarray(point, dtype=np.float64) - offset)


def apply_augmentation(sample: PairedSample, params: AugmentParams) -> PairedSample:
    tgt = warp_raster(sample.target.pixels, params, order=1)
    mk = warp_raster(sample.skeleton.pixels.astype(np.float64), params, order=0)
    return PairedSample(
        SkeletonMask((mk > 0.5).astype(np.uint8), sample.skeleton.source_id),
        SpectralImage(np.clip(tgt, 0.0, 1.0), sample.target.channel_labels, sample.target.source_id),
        sample.mode,
        augmentation=params,
        seed=sample.seed,
    )


def augment_pair(sample: PairedSample, rng: np.random.Generator) -> PairedSample:
    """Apply one random flip/rotate/zoom transform jointly to skeleton and target."""
    return apply_augmentation(sample, draw_augmentation(rng))


# --------------------------------------------------------------------------- dataset builder

_CHANNEL_FILE = re.compile(r"^(?P<leaf>.+)_(?P<wl>\d{3})\.png$")


def _scan_leaves(image_dir: Path) -> dict[str, dict[int, Path]]:
    leaves: dict[str, dict[int, Path]] = {}
    for p in sorted(image_dir.rglob("*.png")):
        m = _CHANNEL_FILE.match(p.name)
        if not m:
            continue
        wl = int(m.group("wl"))
        if wl not in WAVELENGTH_LABELS:
            raise DatasetError(f"{p}: unknown wavelength {wl}")
        leaf = m.group("leaf")
        if wl in leaves.setdefault(leaf, {}):
            raise DatasetError(f"{leaf}: duplicate {wl} nm channel file")
        leaves[leaf][wl] = p
    return leaves


def _load_probes(path: Path, img: SpectralImage) -> ReflectanceProbeSet:
    probe_doc = json.loads(path.read_text())
    known = tuple(probe_doc.get("known", PROBE_REFLECTANCES))
    if "measured" in probe_doc:
        meas = np.array(
            [[probe_doc["measured"][str(LABEL_WAVELENGTHS[lb])][i] for lb in img.channel_labels] for i in range(3)],
            dtype=np.float64,
        )
    else:
        meas = measure_probes(img, probe_doc["regions"])
    return ReflectanceProbeSet(meas, known)


def preprocess_leaf(
    channel_files: dict[int, Path],
    leaf_id: str,
    mode: Mode,
    size: int = 256,
    hot_pixel_k: float = 1.5,
    probes_path: Path | None = None,
) -> PairedSample:
    """load → hot-pixel removal → calibration → skeleton → resize for one leaf."""
    needed = {LABEL_WAVELENGTHS[lb] for lb in mode.channels} | {740}
    missing = sorted(needed - channel_files.keys())
    if missing:
        raise DatasetError(f"{leaf_id}: missing channel file(s) for {missing} nm")
    wls = sorted(channel_files)
    labels = [WAVELENGTH_LABELS[w] for w in wls]
    img = load_spectral_image([channel_files[w] for w in wls], labels, leaf_id)
    img = remove_hot_pixels(img, hot_pixel_k)
    if probes_path is not None and probes_path.exists():
        img = calibrate_reflectance(img, _load_probes(probes_path, img))
    else:
        log.info("%s: no probe file, skipping reflectance calibration", leaf_id)
    skel = extract_skeleton(img.select(["NIR"]))
    skel.source_id = leaf_id
    return resize_pair(img.select(mode.channels), skel, size, mode)


def build_dataset(
    image_dir: str | Path,
    mode: Mode | str = Mode.RGB,
    augment_factor: int = 3,
    seed: int = 0,
    size: int = 256,
    hot_pixel_k: float = 1.5,
) -> list[PairedSample]:
    """Preprocess every leaf under ``image_dir`` and append augmented copies.

    Output order is by sorted leaf id; each base sample is followed by its
    ``augment_factor - 1`` augmented copies.
    """
    if augment_factor < 1:
        raise ValueError("augment_factor must be >= 1")
    image_dir = Path(image_dir)
    mode = Mode(mode)
    leaves = _scan_leaves(image_dir)
    if not leaves:
        raise DatasetError(f"{image_dir}: no channel files found")
    out: list[PairedSample] = []
    for leaf_id in sorted(leaves):
        files = leaves[leaf_id]
        probes = next(iter(files.values())).parent / f"{leaf_id}_probes.json"
        try:
            base = preprocess_leaf(files, leaf_id, mode, size, hot_pixel_k, probes)
        except DatasetError as exc:
            raise type(exc)(f"{leaf_id}: {exc}") from exc
        except Exception as exc:
            raise DatasetError(f"{leaf_id}: {exc}") from exc
        base.seed = seed
        out.append(base)
        for j in range(1, augment_factor):
            aug_seed = derive_seed(seed, leaf_id, j)
            s = augment_pair(base, np.random.default_rng(aug_seed))
            s.skeleton.source_id = s.target.source_id = f"{leaf_id}_aug{j}"
            s.seed = aug_seed
            out.append(s)
    return out


# --------------------------------------------------------------------------- persistence


def save_dataset(samples: Sequence[PairedSample], out_dir: str | Path, extra: dict | None = None) -> list[Path]:
    """Write ``<id>_skel.png`` / ``<id>_target.png`` pairs plus ``dataset.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    entries = []
    for s in samples:
        sid = s.sample_id
        written.append(write_mask_png(out_dir / f"{sid}_skel.png", s.skeleton.pixels))
        written.append(write_png(out_dir / f"{sid}_target.png", s.target.pixels))
        entries.append({
            "id": sid,
            "seed": s.seed,
            "transform": s.augmentation.to_dict() if s.augmentation else None,
        })
    manifest = {
        "mode": samples[0].mode.value if samples else None,
        "channels": list(samples[0].target.channel_labels) if samples else [],
        "samples": entries,
        "files": {p.name: sha256_file(p) for p in written},
    }
    if extra:
        manifest.update(extra)
    mpath = out_dir / "dataset.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    written.append(mpath)
    return written


def load_dataset(data_dir: str | Path) -> list[PairedSample]:
    data_dir = Path(data_dir)
    mpath = data_dir / "dataset.json"
    if not mpath.exists():
        raise DatasetError(f"{data_dir}: no dataset.json")
    manifest = json.loads(mpath.read_text())
    mode = Mode(manifest["mode"])
    out = []
    for e in manifest["samples"]:
        sid = e["id"]
        skel = (read_png_u8(data_dir / f"{sid}_skel.png") > 127).astype(np.uint8)
        tgt = read_png_u8(data_dir / f"{sid}_target.png").astype(np.float64) / 255.0
        aug = AugmentParams(**e["transform"]) if e.get("transform") else None
        out.append(PairedSample(
            SkeletonMask(skel, sid), SpectralImage(tgt, mode.channels, sid), mode,
            augmentation=aug, seed=e.get("seed"),
        ))
    return out
