"""``leafsynth`` command-line front-end.

Every command writes its artifacts under ``--out`` together with a
``manifest.json`` that hashes each emitted file. Exit status is 0 on success,
2 for usage errors, 3 for configuration errors and 1 for runtime failures; the
failure category is printed to stderr (as JSON with ``--json-logs``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__, anomaly, pix2pix, resvae, workflow
from ._util import derive_seed, now, read_png_u8, sha256_bytes, sha256_file, write_mask_png, write_png
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig, load_config
from .dataset import DatasetError, Mode, SkeletonMask, SpectralImage, build_dataset, load_dataset, save_dataset
from .toy import generate_toy_dataset

log = logging.getLogger("leafsynth")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- logging


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"time": now(), "level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def setup_logging(json_logs: bool, verbose: int) -> None:
    root = logging.getLogger("leafsynth")
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    root.propagate = False


# --------------------------------------------------------------------------- manifests


def _dir_digest(path: Path) -> dict:
    files = sorted(p for p in path.rglob("*") if p.is_file())
    listing = "".join(f"{p.relative_to(path).as_posix()}\0{sha256_file(p)}\n" for p in files)
    return {"name": path.name, "sha256": sha256_bytes(listing.encode()), "files": len(files)}


def _file_digest(path: Path) -> dict:
    return {"name": path.name, "sha256": sha256_file(path)}


class Run:
    """Bookkeeping for one command: inputs, checkpoints and every emitted file."""

    def __init__(self, command: str, config: PipelineConfig, params: dict[str, Any]):
        self.command = command
        self.config = config
        self.params = params
        self.inputs: dict[str, dict] = {}
        self.checkpoints: dict[str, dict] = {}
        self.outputs: list[Path] = []
        self.extra: dict[str, Any] = {}
        self.started = now()
        self.root: Path | None = None

    def add_input(self, label: str, path: str | Path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{label}: {path} does not exist")
        self.inputs[label] = _dir_digest(path) if path.is_dir() else _file_digest(path)
        return path

    def add_checkpoint(self, label: str, path: str | Path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"{label}: {path} does not exist")
        self.checkpoints[label] = _file_digest(path)
        return path

    @property
    def run_id(self) -> str:
        key = {
            "command": self.command, "config": self.config.to_dict(), "params": self.params,
            "inputs": self.inputs, "checkpoints": self.checkpoints, "version": __version__,
        }
        return sha256_bytes(json.dumps(key, sort_keys=True).encode())[:16]

    def emit(self, path: str | Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def write_manifest(self) -> Path:
        assert self.root is not None
        outputs = {p.relative_to(self.root).as_posix(): sha256_file(p) for p in sorted(set(self.outputs))}
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "tool_version": __version__,
            "seed": self.config.seed,
            "params": self.params,
            "config": self.config.to_dict(),
            "inputs": self.inputs,
            "checkpoints": self.checkpoints,
            "outputs": outputs,
            "timestamps": {"started": self.started, "finished": now()},
            **self.extra,
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _with(section, **changes):
    try:
        return dataclasses.replace(section, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{type(section).__name__}: {exc}") from None


def _dataset_size(items) -> int:
    sizes = {(s.skeleton.shape if hasattr(s, "skeleton") else s.shape) for s in items}
    if len(sizes) != 1:
        raise DatasetError(f"mixed sample sizes {sorted(sizes)}")
    h, w = sizes.pop()
    if h != w:
        raise DatasetError(f"samples must be square, got {h}×{w}")
    return h


# --------------------------------------------------------------------------- commands


def cmd_toydata(args, cfg: PipelineConfig, run: Run) -> None:
    samples = generate_toy_dataset(args.n, cfg.dataset.size, seed=cfg.dataset.seed, mode=cfg.dataset.mode)
    for p in save_dataset(samples, run.root):
        run.emit(p)


def cmd_preprocess(args, cfg: PipelineConfig, run: Run) -> None:
    src = run.add_input("images", args.input)
    d = cfg.dataset
    samples = build_dataset(src, d.mode, d.augment_factor, d.seed, d.size, d.hot_pixel_k)
    for p in save_dataset(samples, run.root):
        run.emit(p)


def cmd_train_resvae(args, cfg: PipelineConfig, run: Run) -> None:
    samples = load_dataset(run.add_input("data", args.data))
    cfg.vae = _with(cfg.vae, image_size=_dataset_size(samples))
    ckpt = resvae.train_resvae([s.skeleton for s in samples], cfg.vae, log_path=run.emit(run.root / "resvae_log.csv"))
    run.emit(save_checkpoint(ckpt, run.root / "resvae.ckpt"))


def cmd_fit_prior(args, cfg: PipelineConfig, run: Run) -> None:
    ckpt = load_checkpoint(run.add_checkpoint("resvae", args.vae), expect_kind="resvae")
    if args.standard:
        prior = resvae.LatentPrior.standard(ckpt.config["latent_dim"])
    else:
        if args.data is None:
            raise UsageError("fit-prior needs --data unless --standard is given")
        samples = load_dataset(run.add_input("data", args.data))
        prior = resvae.fit_latent_prior(ckpt, [s.skeleton for s in samples])
    run.extra["prior"] = "standard" if args.standard else "fitted"
    run.emit(prior.save(run.root / "prior.json"))


def cmd_train_pix2pix(args, cfg: PipelineConfig, run: Run) -> None:
    samples = load_dataset(run.add_input("data", args.data))
    cfg.translator = _with(cfg.translator, image_size=_dataset_size(samples), mode=samples[0].mode.value)
    ckpt = pix2pix.train_pix2pix(samples, cfg.translator, log_path=run.emit(run.root / "pix2pix_log.csv"))
    run.emit(save_checkpoint(ckpt, run.root / "pix2pix.ckpt"))


def cmd_generate(args, cfg: PipelineConfig, run: Run) -> None:
    vae_ckpt = load_checkpoint(run.add_checkpoint("resvae", args.vae), expect_kind="resvae")
    p2p_ckpt = load_checkpoint(run.add_checkpoint("pix2pix", args.p2p), expect_kind="pix2pix")
    if args.prior:
        prior = resvae.LatentPrior.load(run.add_input("prior", args.prior))
    else:
        log.warning("no --prior given, sampling latents from the standard normal")
        prior = resvae.LatentPrior.standard(vae_ckpt.config["latent_dim"])
    g = cfg.generate
    run.root = run.root / run.run_id
    run.root.mkdir(parents=True, exist_ok=True)
    leaves = workflow.generate_leaves(args.n, vae_ckpt, prior, p2p_ckpt, seed=g.seed, refine_skeletons=g.refine,
                                      threshold=g.threshold, dropout=g.dropout)
    entries = []
    for i, leaf in enumerate(leaves):
        if g.refine_colorized:
            leaf = workflow.refine_colorized(leaf, g.background_threshold)
        skel = run.emit(write_mask_png(run.root / f"{i:04d}_skel.png", leaf.skeleton.pixels))
        img = run.emit(write_png(run.root / f"{i:04d}_leaf.png", leaf.image.pixels))
        entries.append({
            "index": i, "source_id": leaf.image.source_id, "seed": leaf.seed,
            "latent": [float(v) for v in leaf.latent],
            "refined": {"skeleton": g.refine, "colorized": g.refine_colorized},
            "skeleton": skel.name, "leaf": img.name,
        })
    run.extra["mode"] = p2p_ckpt.config["mode"]
    run.extra["prior"] = "fitted" if args.prior else "standard"
    run.extra["leaves"] = entries


def _read_mask(path: Path) -> np.ndarray:
    arr = read_png_u8(path)
    if arr.ndim == 3:
        arr = arr[..., :3].max(axis=2)
    return (arr > 127).astype(np.uint8)


def _read_rgb(path: Path) -> np.ndarray:
    arr = read_png_u8(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr[..., :3].astype(np.float64) / 255.0


def cmd_refine(args, cfg: PipelineConfig, run: Run) -> None:
    if args.mask is None and args.image is None:
        raise UsageError("refine needs --mask, --image or both")
    mask = _read_mask(run.add_input("mask", args.mask)) if args.mask else None
    if args.image is None:
        out = workflow.refine(mask)
        run.emit(write_mask_png(run.root / f"{Path(args.mask).stem}_refined.png", out))
        return
    px = _read_rgb(run.add_input("image", args.image))
    if mask is None:
        mask = np.zeros(px.shape[:2], np.uint8)
    stem = Path(args.image).stem
    leaf = workflow.GeneratedLeaf(SkeletonMask(mask, stem), SpectralImage(px, Mode.RGB.channels, stem),
                                  np.zeros(0), seed=0)
    out = workflow.refine_colorized(leaf, cfg.generate.background_threshold)
    run.emit(write_png(run.root / f"{stem}_refined.png", out.image.pixels))
    if args.mask:
        run.emit(write_mask_png(run.root / f"{Path(args.mask).stem}_refined.png", out.skeleton.pixels))


def _load_skeletons(path: Path) -> list[SkeletonMask]:
    if (path / "dataset.json").exists():
        return [s.skeleton for s in load_dataset(path)]
    files = sorted(path.glob("*_skel.png"))
    if not files:
        raise DatasetError(f"{path}: no dataset.json and no *_skel.png files")
    return [SkeletonMask(_read_mask(f), f.name[: -len("_skel.png")]) for f in files]


def cmd_consistency_check(args, cfg: PipelineConfig, run: Run) -> None:
    p2p_ckpt = load_checkpoint(run.add_checkpoint("pix2pix", args.p2p), expect_kind="pix2pix")
    samples = load_dataset(run.add_input("data", args.data))
    fraction, rows = workflow.consistency_ranking(p2p_ckpt, samples, seed=derive_seed(cfg.seed, "consistency"))
    path = run.emit(run.root / "consistency.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["source_id", "own_error", "other_id", "other_error"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "own_error": repr(r["own_error"]), "other_error": repr(r["other_error"])})
    summary = {"own_closer_fraction": fraction, "samples": len(samples)}
    if args.unseen:
        held_out = []
        generator = pix2pix.load_generator(p2p_ckpt)
        for skel in _load_skeletons(run.add_input("unseen", args.unseen)):
            img = workflow.translate_unseen(generator, skel, dropout=cfg.generate.dropout,
                                            seed=derive_seed(cfg.generate.seed, "unseen", skel.source_id))
            out = run.emit(write_png(run.root / "unseen" / f"{skel.source_id}_leaf.png", img.pixels))
            held_out.append({"source_id": skel.source_id, "held_out": True, "leaf": out.relative_to(run.root).as_posix()})
        run.extra["held_out"] = held_out
    run.extra["summary"] = summary
    run.emit(_write_json(run.root / "summary.json", summary))
    print(f"own target closer for {fraction:.1%} of {len(samples)} samples")


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load_images(path: Path, labels: Sequence[str]) -> list[SpectralImage]:
    """Targets of a dataset dir, leaves of a generate run, or any ``*_leaf.png`` files."""
    if (path / "dataset.json").exists():
        return [s.target for s in load_dataset(path)]
    manifest = path / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text()).get("leaves")
        if entries:
            return [SpectralImage(_read_rgb(path / e["leaf"]), labels, e["source_id"]) for e in entries]
    files = sorted(path.glob("*_leaf.png"))
    if not files:
        raise DatasetError(f"{path}: no images found")
    return [SpectralImage(_read_rgb(f), labels, f.stem) for f in files]


def _write_roc_outputs(run: Run, roc: anomaly.ROCResult, n_real: int, n_syn: int) -> dict:
    run.emit(anomaly.write_roc_csv(roc, run.root / "roc.csv"))
    run.emit(anomaly.plot_roc(roc, run.root / "roc.png"))
    summary = {"auc": roc.auc, "youden": anomaly.youden_point(roc), "real": n_real, "synthetic": n_syn}
    run.emit(_write_json(run.root / "summary.json", summary))
    run.extra["summary"] = summary
    print(f"AUC = {roc.auc:.4f} ({n_syn} synthetic vs {n_real} real)")
    return summary


def cmd_evaluate(args, cfg: PipelineConfig, run: Run) -> None:
    real = _load_images(run.add_input("real", args.real), Mode(cfg.dataset.mode).channels)
    # synthetic images adopt the channel labels of the real set so scoring compares like with like
    synthetic = _load_images(run.add_input("synthetic", args.synthetic), real[0].channel_labels)
    if args.ae:
        ae = load_checkpoint(run.add_checkpoint("anomaly_ae", args.ae), expect_kind="anomaly_ae")
    else:
        size = _dataset_size(real)
        cfg.eval = _with(cfg.eval, image_size=size, channels=real[0].pixels.shape[2])
        ae = anomaly.train_anomaly_ae(real, cfg.eval, log_path=run.emit(run.root / "ae_log.csv"))
        run.emit(save_checkpoint(ae, run.root / "anomaly_ae.ckpt"))
    roc, scores = anomaly.evaluate_synthetic_set(ae, real, synthetic)
    run.emit(anomaly.write_scores_csv(scores, run.root / "scores.csv"))
    _write_roc_outputs(run, roc, len(real), len(synthetic))


def cmd_roc_plot(args, cfg: PipelineConfig, run: Run) -> None:
    scores = anomaly.read_scores_csv(run.add_input("scores", args.scores))
    roc = anomaly.roc_curve(scores)
    n_syn = sum(s.label == anomaly.SYNTHETIC for s in scores)
    _write_roc_outputs(run, roc, len(scores) - n_syn, n_syn)


# --------------------------------------------------------------------------- parser


def _cfg_flag(p: argparse.ArgumentParser, flag: str, key: str, help: str, type: Callable | None = None) -> None:
    """A flag that becomes a ``key=value`` config override (highest precedence)."""
    p.add_argument(flag, dest="cfg__" + key.replace(".", "__"), type=type, default=None, help=help)


def _cfg_switch(p: argparse.ArgumentParser, flag: str, key: str, value: str, help: str) -> None:
    p.add_argument(flag, dest="cfg__" + key.replace(".", "__"), action="store_const", const=value, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, default=None, help="root seed; stage seeds are derived from it")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--json-logs", action="store_true", help="line-delimited JSON logs on stderr")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="leafsynth", description="Synthetic multispectral leaf generation pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=fn)
        return p

    p = add("toydata", cmd_toydata, "write a procedural toy dataset of skeleton/leaf pairs")
    p.add_argument("--n", type=int, default=64, help="number of pairs")
    _cfg_flag(p, "--size", "dataset.size", "image size (power of two >= 32)")
    _cfg_flag(p, "--mode", "dataset.mode", "RGB or RGNIR")

    p = add("preprocess", cmd_preprocess, "turn per-wavelength leaf images into an augmented paired dataset")
    p.add_argument("--input", type=Path, required=True, help="directory of <leaf>_<wavelength>.png files")
    _cfg_flag(p, "--size", "dataset.size", "output size")
    _cfg_flag(p, "--mode", "dataset.mode", "RGB or RGNIR")
    _cfg_flag(p, "--augment-factor", "dataset.augment_factor", "dataset size multiplier")

    p = add("train-resvae", cmd_train_resvae, "train the skeleton ResVAE")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    _cfg_flag(p, "--epochs", "vae.epochs", "training epochs")

    p = add("fit-prior", cmd_fit_prior, "fit the diagonal Gaussian latent sampling prior")
    p.add_argument("--vae", type=Path, required=True, help="ResVAE checkpoint")
    p.add_argument("--data", type=Path, help="dataset whose skeletons are encoded")
    p.add_argument("--standard", action="store_true", help="write the standard normal prior instead")

    p = add("train-pix2pix", cmd_train_pix2pix, "train the skeleton-to-leaf translator")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    _cfg_flag(p, "--steps", "translator.steps", "generator/discriminator update pairs")

    p = add("generate", cmd_generate, "sample skeletons and colorize them into synthetic leaves")
    p.add_argument("--vae", type=Path, required=True, help="ResVAE checkpoint")
    p.add_argument("--p2p", type=Path, required=True, help="Pix2pix checkpoint")
    p.add_argument("--prior", type=Path, help="latent prior JSON (default: standard normal)")
    p.add_argument("--n", type=int, default=5, help="number of leaves")
    _cfg_flag(p, "--threshold", "generate.threshold", "skeleton binarization threshold")
    _cfg_switch(p, "--no-refine", "generate.refine", "false", "keep every skeleton component")
    _cfg_switch(p, "--refine-colorized", "generate.refine_colorized", "true", "also clean the colorized leaf")
    _cfg_switch(p, "--no-dropout", "generate.dropout", "false", "disable inference-time dropout noise")

    p = add("refine", cmd_refine, "keep only the main component of a mask and/or a colorized leaf")
    p.add_argument("--mask", type=Path, help="binary skeleton PNG")
    p.add_argument("--image", type=Path, help="colorized leaf PNG")
    _cfg_flag(p, "--background-threshold", "generate.background_threshold", "leaf-pixel threshold for --image")

    p = add("consistency-check", cmd_consistency_check, "rank translations of training skeletons against targets")
    p.add_argument("--p2p", type=Path, required=True, help="Pix2pix checkpoint")
    p.add_argument("--data", type=Path, required=True, help="training dataset directory")
    p.add_argument("--unseen", type=Path, help="held-out skeletons to translate (dataset dir or *_skel.png)")

    p = add("evaluate", cmd_evaluate, "score synthetic leaves with a real-trained autoencoder and build the ROC")
    p.add_argument("--real", type=Path, required=True, help="dataset directory of real leaves")
    p.add_argument("--synthetic", type=Path, required=True, help="generate run directory or *_leaf.png directory")
    p.add_argument("--ae", type=Path, help="pretrained anomaly autoencoder checkpoint")
    _cfg_flag(p, "--epochs", "eval.epochs", "autoencoder training epochs")

    p = add("roc-plot", cmd_roc_plot, "rebuild ROC CSV, plot and AUC from a score table")
    p.add_argument("--scores", type=Path, required=True, help="scores.csv with source_id,label,s_x")
    return parser


def _overrides(args) -> list[str]:
    out = list(args.overrides)
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    for name, value in sorted(vars(args).items()):
        if name.startswith("cfg__") and value is not None:
            out.append(f"{name[5:].replace('__', '.')}={value}")
    return out


def _category(exc: BaseException) -> str:
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, DatasetError):
        return "dataset"
    if isinstance(exc, resvae.TrainingError):
        return "training"
    if isinstance(exc, workflow.RefinementError):
        return "refinement"
    if isinstance(exc, OSError):
        return "io"
    return "runtime"


def _report(category: str, message: str, json_logs: bool) -> None:
    if json_logs:
        print(json.dumps({"level": "error", "category": category, "message": message}, sort_keys=True), file=sys.stderr)
    else:
        print(f"leafsynth: error [{category}]: {message}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    setup_logging(args.json_logs, args.verbose)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        _report("config", str(exc), args.json_logs)
        return EXIT_CONFIG
    try:
        import torch

        torch.use_deterministic_algorithms(True)
        params = {k: (v.name if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                  if k not in ("func", "config", "overrides", "out", "json_logs", "verbose", "command")
                  and not k.startswith("cfg__")}
        run = Run(args.command, cfg, params)
        run.root = args.out
        run.root.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, run)
        path = run.write_manifest()
        log.info("wrote %s", path, extra={"fields": {"run_id": run.run_id, "outputs": len(run.outputs)}})
        print(path)
    except UsageError as exc:
        _report("usage", str(exc), args.json_logs)
        return EXIT_USAGE
    except ConfigError as exc:
        _report("config", str(exc), args.json_logs)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit category
        log.debug("failure", exc_info=True)
        _report(_category(exc), str(exc), args.json_logs)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
