"""Model checkpoints and their on-disk archive.

An archive is a zip with fixed member timestamps (so equal checkpoints give
equal bytes) holding ``meta.json``, ``config.json``, ``history.csv`` and one
``weights/<name>.npy`` per tensor. ``meta.json`` carries the format version,
model kind, seed and a sha256 for every other member.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ._util import sha256_bytes

FORMAT_VERSION = 1
MODEL_KINDS = ("resvae", "pix2pix", "anomaly_ae")
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    """Unreadable, corrupted or incompatible checkpoint."""


class ModelKindError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    config: dict[str, Any]
    weights: dict[str, np.ndarray]
    history: list[dict[str, float]] = field(default_factory=list)
    seed: int = 0
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ModelKindError(f"unknown model kind {self.model_kind!r}")

    def require_kind(self, kind: str) -> None:
        if self.model_kind != kind:
            raise ModelKindError(f"expected a {kind} checkpoint, got {self.model_kind}")


def _history_csv(history: list[dict[str, float]]) -> bytes:
    if not history:
        return b""
    buf = io.StringIO()
    fields = list(history[0].keys())
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue().encode()


def _parse_history(data: bytes) -> list[dict[str, float]]:
    if not data:
        return []
    rows = []
    for row in csv.DictReader(io.StringIO(data.decode())):
        rows.append({k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()})
    return rows


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    members: dict[str, bytes] = {
        "config.json": json.dumps(ckpt.config, indent=2, sort_keys=True).encode(),
        "history.csv": _history_csv(ckpt.history),
    }
    for name in sorted(ckpt.weights):
        members[f"weights/{name}.npy"] = _npy(ckpt.weights[name])
    meta = {
        "format_version": ckpt.format_version,
        "model_kind": ckpt.model_kind,
        "seed": ckpt.seed,
        "weights": sorted(ckpt.weights),
        "sha256": {k: sha256_bytes(v) for k, v in members.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, data in [("meta.json", json.dumps(meta, indent=2, sort_keys=True).encode()), *members.items()]:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}"
                )
            members = {name: zf.read(name) for name in meta["sha256"]}
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint ({exc})") from exc
    for name, digest in meta["sha256"].items():
        if sha256_bytes(members[name]) != digest:
            raise CheckpointError(f"{path}: hash mismatch in {name}")
    kind = meta["model_kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ModelKindError(f"{path}: expected a {expect_kind} checkpoint, got {kind}")
    weights = {
        name: np.load(io.BytesIO(members[f"weights/{name}.npy"]), allow_pickle=False)
        for name in meta["weights"]
    }
    return Checkpoint(
        model_kind=kind,
        config=json.loads(members["config.json"]),
        weights=weights,
        history=_parse_history(members["history.csv"]),
        seed=int(meta["seed"]),
        format_version=int(meta["format_version"]),
    )
