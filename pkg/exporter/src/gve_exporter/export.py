"""Batch export: images -> resized RGB batches -> encoder -> tensor files.

Output tensors are float32 ".npy" version 1.0 files (the format the
downstream classification toolkit reads), one per image, plus a rewritten
manifest pointing at them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import ENCODER_SPECS

MANIFEST_HEADER = ["id", "path", "label", "split"]


class ExportError(Exception):
    """Unusable inputs or an encoder output violating its shape contract."""


@dataclass(frozen=True)
class ExportJob:
    encoder: str
    manifest_path: Path
    out_dir: Path
    device: str = "cpu"
    batch_size: int = 8

    def __post_init__(self):
        if self.encoder not in ENCODER_SPECS:
            raise ExportError(
                f"unknown encoder {self.encoder!r}; choose from {sorted(ENCODER_SPECS)}"
            )
        if self.batch_size < 1:
            raise ExportError("batch size must be positive")


@dataclass(frozen=True)
class ManifestRow:
    item_id: str
    path: str
    label: str
    split: str


def read_manifest(path: Path) -> list[ManifestRow]:
    if not path.is_file():
        raise ExportError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ExportError(f"{path}: header {header!r} != {MANIFEST_HEADER!r}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ExportError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
            rows.append(ManifestRow(*[field.strip() for field in row]))
    if not rows:
        raise ExportError(f"{path}: no rows")
    seen = set()
    for row in rows:
        if row.item_id in seen:
            raise ExportError(f"{path}: duplicate id {row.item_id!r}")
        seen.add(row.item_id)
    return rows


def write_manifest(rows: list[ManifestRow], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow([row.item_id, row.path, row.label, row.split])


def load_rgb_image(path: Path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]; grayscale inputs are channel-replicated."""
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ExportError(f"{path}: expected (H,W), (1,H,W) or (3,H,W), got {arr.shape}")
        arr = arr.astype(np.float32)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ExportError(f"{path}: values outside [0, 1]")
    elif suffix in (".png", ".jpg", ".jpeg", ".bmp"):
        try:
            with Image.open(path) as img:
                if img.mode == "L":
                    arr = np.asarray(img, dtype=np.float32)[None] / 255.0
                else:
                    rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
                    arr = np.moveaxis(rgb, -1, 0)
        except OSError as exc:
            raise ExportError(f"{path}: undecodable image ({exc})") from exc
    else:
        raise ExportError(f"{path}: unsupported image format {suffix!r}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)  # encoders expect RGB
    return arr


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Per-channel bilinear resize of a (3, H, W) float image."""
    if image.shape[1:] == (size, size):
        return image.astype(np.float32)
    channels = [
        np.asarray(
            Image.fromarray(channel.astype(np.float32), mode="F").resize(
                (size, size), Image.BILINEAR
            )
        )
        for channel in image
    ]
    return np.stack(channels).astype(np.float32)


def _write_tensor(path: Path, values: np.ndarray) -> None:
    with open(path, "wb") as f:
        np.lib.format.write_array(
            f, np.ascontiguousarray(values, dtype="<f4"), version=(1, 0)
        )


def run_export(job: ExportJob, encoder=None) -> int:
    """Export every manifest item; returns the number of files written.

    ``encoder`` defaults to loading the registered pretrained model; tests
    inject stand-ins with the same interface.
    """
    if encoder is None:
        from .encoders import load_encoder

        encoder = load_encoder(job.encoder, device=job.device)
    spec = encoder.spec
    if spec.name != job.encoder:
        raise ExportError(f"encoder {spec.name!r} does not match job {job.encoder!r}")

    rows = read_manifest(job.manifest_path)
    root = job.manifest_path.parent
    out_dir = Path(job.out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    rewritten = []
    written = 0
    for start in range(0, len(rows), job.batch_size):
        chunk = rows[start : start + job.batch_size]
        batch = np.stack(
            [
                resize_bilinear(
                    load_rgb_image(root / row.path if not Path(row.path).is_absolute() else Path(row.path)),
                    spec.input_size,
                )
                for row in chunk
            ]
        )
        features = encoder.features(batch)
        if features.shape != (len(chunk),) + spec.output_shape:
            raise ExportError(
                f"encoder returned shape {features.shape[1:]} for item "
                f"{chunk[0].item_id!r}; expected {spec.output_shape}"
            )
        for row, feat in zip(chunk, features):
            if feat.shape != spec.output_shape:
                raise ExportError(
                    f"feature shape {feat.shape} for item {row.item_id!r}; "
                    f"expected {spec.output_shape}"
                )
            rel = f"features/{row.item_id}.npy"
            _write_tensor(out_dir / rel, feat)
            rewritten.append(ManifestRow(row.item_id, rel, row.label, row.split))
            written += 1
    write_manifest(rewritten, out_dir / "manifest.csv")
    return written
