"""File interfaces: float32 tensor files, CSV dataset manifests, class
weights, and the on-disk descriptor archive.

Tensor files use the ".npy" version 1.0 container (magic 0x93 "NUMPY",
ASCII header, raw little-endian float32 payload in C order) so external
exporters can write them with stock numpy. The reader accepts exactly
that layout and nothing else.
"""

from __future__ import annotations

import ast
import csv
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import PcaModel
from .geometry import sym

Array = np.ndarray

NPY_MAGIC = b"\x93NUMPY"
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["id", "path", "label", "split"]
ARCHIVE_META_SCHEMA_VERSION = 1


# --- tensor files ---------------------------------------------------------


def tensor_write(path, array) -> None:
    """Write a float32 little-endian C-order ".npy" v1.0 tensor file."""
    arr = np.asarray(array)
    if arr.ndim < 1:
        raise DataError("tensor shape must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise DataError("refusing to write non-finite tensor values")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = (
        "{'descr': '<f4', 'fortran_order': False, "
        f"'shape': {payload.shape!r}, }}"
    )
    # pad with spaces so magic+version+length+header is 64-byte aligned
    base = len(NPY_MAGIC) + 2 + 2
    pad = 64 - (base + len(header) + 1) % 64
    header = header + " " * (pad % 64) + "\n"
    with open(path, "wb") as f:
        f.write(NPY_MAGIC)
        f.write(bytes((1, 0)))
        f.write(struct.pack("<H", len(header)))
        f.write(header.encode("ascii"))
        f.write(payload.tobytes())


def tensor_read(path) -> Array:
    """Read a tensor file written by tensor_write (or numpy.save of float32).

    Rejects anything that is not little-endian float32 in C order, as well
    as truncated payloads and non-finite values.
    """
    with open(path, "rb") as f:
        magic = f.read(6)
        if magic != NPY_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        version = f.read(2)
        if version != bytes((1, 0)):
            raise DataError(f"{path}: unsupported container version {tuple(version)}")
        raw_len = f.read(2)
        if len(raw_len) != 2:
            raise DataError(f"{path}: truncated header")
        (header_len,) = struct.unpack("<H", raw_len)
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise DataError(f"{path}: truncated header")
        try:
            header = ast.literal_eval(raw_header.decode("ascii"))
        except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: unparseable header") from exc
        if not isinstance(header, dict):
            raise DataError(f"{path}: unparseable header")
        if header.get("descr") != "<f4":
            raise DataError(
                f"{path}: dtype {header.get('descr')!r} not supported; "
                "expected little-endian float32 ('<f4')"
            )
        if header.get("fortran_order") is not False:
            raise DataError(f"{path}: column-major (Fortran) order not supported")
        shape = header.get("shape")
        if (
            not isinstance(shape, tuple)
            or len(shape) == 0
            or not all(isinstance(d, int) and d > 0 for d in shape)
        ):
            raise DataError(f"{path}: invalid shape {shape!r}")
        expected = int(np.prod(shape)) * 4
        raw = f.read(expected + 1)
    if len(raw) < expected:
        raise DataError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise DataError(f"{path}: trailing bytes after payload")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if not np.all(np.isfinite(values)):
        bad = int(np.sum(~np.isfinite(values)))
        raise DataError(f"{path}: {bad} non-finite value(s)")
    return values


# --- manifests ------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    item_id: str
    path: str  # as stored; relative paths resolve against the manifest root
    label: int
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path

    @property
    def class_count(self) -> int:
        return max(r.label for r in self.records) + 1

    def class_counts(self, split: str | None = None) -> Array:
        counts = np.zeros(self.class_count, dtype=np.int64)
        for r in self.records:
            if split is None or r.split == split:
                counts[r.label] += 1
        return counts

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def manifest_load(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise DataError(
                f"{path}: header {header!r} != expected {MANIFEST_HEADER!r}"
            )
        records = []
        seen_ids = set()
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{line_no}: expected 4 fields, got {len(row)}")
            item_id, rel_path, label_text, split = (field.strip() for field in row)
            if item_id in seen_ids:
                raise DataError(f"{path}:{line_no}: duplicate id {item_id!r}")
            seen_ids.add(item_id)
            try:
                label = int(label_text)
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-integer label {label_text!r}")
            if label < 0:
                raise DataError(f"{path}:{line_no}: negative label {label}")
            if split not in SPLITS:
                raise DataError(
                    f"{path}:{line_no}: unknown split {split!r}; expected {SPLITS}"
                )
            records.append(ManifestRecord(item_id, rel_path, label, split))
    if not records:
        raise DataError(f"{path}: manifest has no records")
    manifest = DatasetManifest(records=records, root=path.parent)
    gaps = np.flatnonzero(manifest.class_counts() == 0)
    if gaps.size:
        warnings.warn(
            f"{path}: labels {gaps.tolist()} absent (label gap)", stacklevel=2
        )
    if check_paths:
        missing = [
            str(manifest.resolve(r)) for r in records if not manifest.resolve(r).is_file()
        ]
        if missing:
            shown = ", ".join(missing[:5])
            raise DataError(
                f"{path}: {len(missing)} file(s) not resolvable, e.g. {shown}"
            )
    return manifest


def manifest_save(records: list[ManifestRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.item_id, r.path, r.label, r.split])


# --- class weights ----------------------------------------------------------


def class_weight_vector(labels, n_classes: int) -> Array:
    """w_c = N / (K * N_c), so weighted class masses sum back to N."""
    y = np.asarray(labels, dtype=np.int64)
    if n_classes < 2:
        raise DataError("class weighting needs at least 2 classes")
    counts = np.bincount(y, minlength=n_classes)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"classes {empty} have no training samples")
    return y.size / (n_classes * counts.astype(np.float64))


def class_weights(manifest: DatasetManifest) -> Array:
    """Per-class weights computed from the training split of a manifest."""
    labels = [r.label for r in manifest.split_records("train")]
    if not labels:
        raise DataError("manifest has no training records")
    return class_weight_vector(labels, manifest.class_count)


# --- descriptor archive -----------------------------------------------------
#
# A directory of per-item tensor files plus an index CSV (same schema as a
# manifest), an optional PCA model, and a meta.json carrying the
# regularization used.


def write_descriptor_archive(
    out_dir,
    records: list[ManifestRecord],
    matrices,
    epsilon_label: str,
    source: str,
    pca: PcaModel | None = None,
) -> None:
    out_dir = Path(out_dir)
    (out_dir / "descriptors").mkdir(parents=True, exist_ok=True)
    stack = np.asarray(matrices, dtype=np.float64)
    if stack.shape[0] != len(records):
        raise DataError("one descriptor per manifest record required")
    index = []
    for record, matrix in zip(records, stack):
        rel = f"descriptors/{record.item_id}.npy"
        tensor_write(out_dir / rel, matrix)
        index.append(ManifestRecord(record.item_id, rel, record.label, record.split))
    manifest_save(index, out_dir / "index.csv")
    if pca is not None:
        np.savez(
            out_dir / "pca.npz",
            mean=pca.mean,
            components=pca.components,
            explained_variance=pca.explained_variance,
        )
    meta = {
        "schema_version": ARCHIVE_META_SCHEMA_VERSION,
        "epsilon": epsilon_label,
        "source": source,
        "descriptor_dim": int(stack.shape[-1]),
        "pca": pca is not None,
    }
    with open(out_dir / "meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class DescriptorArchive:
    manifest: DatasetManifest
    matrices: Array  # (N, d, d) float64, ordered like manifest.records
    meta: dict
    pca: PcaModel | None

    def split_arrays(self, split: str) -> tuple[Array, Array]:
        idx = [i for i, r in enumerate(self.manifest.records) if r.split == split]
        if not idx:
            raise DataError(f"archive has no records in split {split!r}")
        labels = np.array([self.manifest.records[i].label for i in idx], dtype=np.int64)
        return self.matrices[idx], labels


def load_descriptor_archive(archive_dir) -> DescriptorArchive:
    archive_dir = Path(archive_dir)
    index_path = archive_dir / "index.csv"
    manifest = manifest_load(index_path)
    matrices = []
    for record in manifest.records:
        m = tensor_read(manifest.resolve(record)).astype(np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DataError(f"{record.path}: descriptor must be square, got {m.shape}")
        matrices.append(sym(m))
    stack = np.stack(matrices)
    meta_path = archive_dir / "meta.json"
    meta = {}
    if meta_path.is_file():
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    pca = None
    pca_path = archive_dir / "pca.npz"
    if pca_path.is_file():
        with np.load(pca_path) as bundle:
            pca = PcaModel(
                mean=bundle["mean"],
                components=bundle["components"],
                explained_variance=bundle["explained_variance"],
            )
    return DescriptorArchive(manifest=manifest, matrices=stack, meta=meta, pca=pca)


# --- images -----------------------------------------------------------------


def load_image(path) -> Array:
    """Minimal image reader: PNG via Pillow or a float tensor file.

    Returns (H, W) or (C, H, W) float64 values in [0, 1].
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = tensor_read(path).astype(np.float64)
        if arr.ndim not in (2, 3):
            raise DataError(f"{path}: image tensor must be 2-D or 3-D, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError(f"{path}: image values must lie in [0, 1]")
        return arr
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as img:
            if img.mode in ("L", "I;16", "I"):
                gray = img.convert("I")
                arr = np.asarray(gray, dtype=np.float64)
                scale = 65535.0 if img.mode != "L" else 255.0
                return arr / scale
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
            return np.moveaxis(rgb, -1, 0)
    raise DataError(f"{path}: unsupported image format {suffix!r} (png or npy)")
