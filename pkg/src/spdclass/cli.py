"""Batch command-line frontend.

Commands: extract-hc, describe, train, eval. Every run is deterministic:
all randomness flows from --seed / --seeds, outputs carry no timestamps,
and reruns with identical inputs produce byte-identical files.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .classifiers import (
    MdrmModel,
    TsldaModel,
    load_classic_checkpoint,
    mdrm_fit,
    save_classic_checkpoint,
    tslda_fit,
)
from .data import (
    DatasetManifest,
    ManifestRecord,
    class_weight_vector,
    load_descriptor_archive,
    load_image,
    manifest_load,
    manifest_save,
    tensor_read,
    tensor_write,
    write_descriptor_archive,
)
from .descriptors import covariance_descriptor
from .errors import DataError, NumericalError, SpdClassError, UsageError
from .features import (
    FeatureMap,
    WindowSpec,
    extract_windows,
    hc_feature_map,
    pca_fit,
    pca_transform,
    to_gray,
)
from .metrics import evaluate
from .spdnet import (
    TrainConfig,
    load_spdnet_checkpoint,
    save_spdnet_checkpoint,
    train,
)
from .spdnet.model import SpdNetModel

METRICS_SCHEMA_VERSION = 1
PCA_PIXEL_SAMPLE_LIMIT = 200_000
THREADS_ENV_VAR = "SPDCLASS_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); remap to usage error
        raise UsageError(message)


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")
    return max(1, value)


def parse_config_file(path: Path) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{line_no}: empty key")
        values[key.replace("-", "_")] = value.strip("\"'")
    return values


def _merge_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Fill flags the user did not set from the config file, then defaults.

    argparse defaults are all None so an explicitly passed flag wins.
    """
    config = {}
    if getattr(args, "config", None):
        config = parse_config_file(Path(args.config))
        unknown = set(config) - set(parser_defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key, (conv, default) in parser_defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in config:
            try:
                setattr(args, key, conv(config[key]))
            except ValueError:
                raise UsageError(f"config key {key}: cannot parse {config[key]!r}")
        else:
            setattr(args, key, default)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"cannot parse seed list {text!r}")
    if not seeds:
        raise UsageError("at least one seed is required")
    return seeds


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"cannot parse layer dims {text!r}")
    if not dims:
        raise UsageError("layer dims must not be empty")
    return dims


def _bool_flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _map_items(items, worker, threads: int):
    """Order-preserving map that collects per-item failures."""
    def guarded(pair):
        index, item = pair
        try:
            return index, worker(item), None
        except SpdClassError as exc:
            return index, None, exc

    if threads <= 1:
        results = [guarded(p) for p in enumerate(items)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, enumerate(items)))
    failures = [(i, exc) for i, _, exc in results if exc is not None]
    outputs = [out for _, out, exc in results if exc is None]
    return outputs, failures


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# --- extract-hc -------------------------------------------------------------

EXTRACT_DEFAULTS = {
    "window_size": (int, 21),
    "stride": (int, 12),
    "expected_windows": (int, None),
    "no_windows": (_bool_flag, False),
    "keep_going": (_bool_flag, False),
    "threads": (int, None),
}


def cmd_extract_hc(args) -> int:
    manifest = manifest_load(Path(args.manifest))
    if args.images_dir:
        images_dir = Path(args.images_dir)
        if not images_dir.is_dir():
            raise DataError(f"images directory not found: {images_dir}")
        manifest = DatasetManifest(records=manifest.records, root=images_dir)
    out_dir = Path(args.out)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    threads = args.threads if args.threads else _default_threads()

    spec = None
    if not args.no_windows:
        spec = WindowSpec(args.window_size, args.stride, args.expected_windows)

    def worker(record: ManifestRecord) -> ManifestRecord:
        fm = hc_feature_map(to_gray(load_image(manifest.resolve(record))))
        if spec is not None:
            fm = extract_windows(fm, spec)
        rel = f"features/{record.item_id}.npy"
        tensor_write(out_dir / rel, fm.values)
        return ManifestRecord(record.item_id, rel, record.label, record.split)

    outputs, failures = _map_items(manifest.records, worker, threads)
    for index, exc in failures:
        record = manifest.records[index]
        print(f"extract-hc: item {record.item_id!r} failed: {exc}", file=sys.stderr)
    if failures and not args.keep_going:
        raise DataError(f"{len(failures)} item(s) failed; rerun with --keep-going to skip them")
    manifest_save(outputs, out_dir / "manifest.csv")
    print(f"extract-hc: wrote {len(outputs)} feature file(s) to {out_dir}")
    return 0


# --- describe ---------------------------------------------------------------

DESCRIBE_DEFAULTS = {
    "epsilon": (float, None),
    "pca": (int, None),
    "seed": (int, 0),
    "threads": (int, None),
    "source": (str, "other"),
}


def _load_feature_map(manifest: DatasetManifest, record: ManifestRecord) -> FeatureMap:
    values = tensor_read(manifest.resolve(record)).astype(np.float64)
    if values.ndim != 3:
        raise DataError(f"{record.path}: feature tensor must be C x H x W")
    return FeatureMap(values)


def _sample_training_pixels(
    manifest: DatasetManifest, records, limit: int, seed: int
) -> np.ndarray:
    """Uniform pixel-vector subsample across all training feature maps."""
    sizes = []
    for record in records:
        fm = _load_feature_map(manifest, record)
        sizes.append(fm.height * fm.width)
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    if total > limit:
        chosen = np.sort(rng.choice(total, size=limit, replace=False))
    else:
        chosen = np.arange(total)
    pieces = []
    offset = 0
    for record, size in zip(records, sizes):
        lo = np.searchsorted(chosen, offset)
        hi = np.searchsorted(chosen, offset + size)
        if hi > lo:
            fm = _load_feature_map(manifest, record)
            flat = fm.values.reshape(fm.channels, -1).T
            pieces.append(flat[chosen[lo:hi] - offset])
        offset += size
    return np.concatenate(pieces)


def cmd_describe(args) -> int:
    manifest = manifest_load(Path(args.manifest))
    out_dir = Path(args.out)
    threads = args.threads if args.threads else _default_threads()

    pca_model = None
    if args.pca is not None:
        train_records = manifest.split_records("train")
        if not train_records:
            raise DataError("PCA fitting requires a nonempty training split")
        pixels = _sample_training_pixels(
            manifest, train_records, PCA_PIXEL_SAMPLE_LIMIT, args.seed
        )
        if args.pca > pixels.shape[1]:
            raise DataError(
                f"--pca {args.pca} exceeds the {pixels.shape[1]} feature channels"
            )
        pca_model = pca_fit(pixels, args.pca)

    def worker(record: ManifestRecord) -> np.ndarray:
        fm = _load_feature_map(manifest, record)
        if pca_model is not None:
            fm = pca_transform(pca_model, fm)
        return covariance_descriptor(fm, args.epsilon).matrix

    matrices, failures = _map_items(manifest.records, worker, threads)
    if failures:
        for index, exc in failures:
            record = manifest.records[index]
            print(f"describe: item {record.item_id!r} failed: {exc}", file=sys.stderr)
        raise DataError(f"{len(failures)} descriptor(s) failed")

    write_descriptor_archive(
        out_dir,
        manifest.records,
        np.stack(matrices),
        epsilon_label="relative-default" if args.epsilon is None else repr(args.epsilon),
        source=args.source,
        pca=pca_model,
    )
    print(f"describe: wrote {len(matrices)} descriptor(s) to {out_dir}")
    return 0


# --- train ------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "seeds": (_parse_seeds, [0]),
    "epochs": (int, 250),
    "batch_size": (int, 32),
    "learning_rate": (float, 1e-2),
    "patience": (int, 20),
    "min_delta": (float, 1e-4),
    "layer_dims": (_parse_dims, None),
    "epsilon_floor": (float, 1e-4),
    "discard_threshold": (float, 1e11),
}


def _metric_summary(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "values": values}


def cmd_train(args) -> int:
    archive = load_descriptor_archive(Path(args.archive))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_x, train_y = archive.split_arrays("train")
    has_val = any(r.split == "val" for r in archive.manifest.records)
    if args.method == "spdnet" and not has_val:
        raise DataError("spdnet training requires a validation split")
    if has_val:
        eval_split = "val"
        val_x, val_y = archive.split_arrays("val")
    else:
        eval_split = "train"
        val_x, val_y = train_x, train_y

    per_seed = []
    ba_values, auc_values = [], []
    for seed in args.seeds:
        if args.method == "mdrm":
            model = mdrm_fit(train_x, train_y)
            ckpt = out_dir / f"model_seed{seed}.spdc"
            save_classic_checkpoint(model, ckpt)
        elif args.method == "tslda":
            model = tslda_fit(train_x, train_y, discard_threshold=args.discard_threshold)
            ckpt = out_dir / f"model_seed{seed}.spdc"
            save_classic_checkpoint(model, ckpt)
        elif args.method == "spdnet":
            config = TrainConfig(
                epochs=args.epochs,
                batch_size=args.batch_size,
                learning_rate=args.learning_rate,
                patience=args.patience,
                min_delta=args.min_delta,
                seed=seed,
                epsilon_floor=args.epsilon_floor,
                layer_dims=args.layer_dims,
            )
            n_classes = archive.manifest.class_count
            weights = class_weight_vector(train_y, n_classes)
            model, history = train(train_x, train_y, val_x, val_y, config, weights)
            ckpt = out_dir / f"model_seed{seed}.spdn"
            save_spdnet_checkpoint(model, ckpt)
        else:
            raise UsageError(f"unknown method {args.method!r}")

        report = evaluate(model, val_x, val_y)
        entry = {
            "seed": seed,
            "checkpoint": ckpt.name,
            "balanced_accuracy": report.balanced_accuracy,
            "auc": None if np.isnan(report.auc) else report.auc,
        }
        if args.method == "spdnet":
            entry["best_epoch"] = history.best_epoch
            entry["epochs_run"] = history.epochs_run
        per_seed.append(entry)
        ba_values.append(report.balanced_accuracy)
        if not np.isnan(report.auc):
            auc_values.append(report.auc)

    payload = {
        "schema_version": METRICS_SCHEMA_VERSION,
        "method": args.method,
        "eval_split": eval_split,
        "per_seed": per_seed,
        "aggregate": {
            "balanced_accuracy": _metric_summary(ba_values),
            "auc": _metric_summary(auc_values) if auc_values else None,
        },
    }
    _write_json(out_dir / "metrics.json", payload)
    mean = payload["aggregate"]["balanced_accuracy"]["mean"]
    std = payload["aggregate"]["balanced_accuracy"]["std"]
    print(
        f"train[{args.method}] {eval_split} balanced accuracy: "
        f"{mean:.4f} +/- {std:.4f} over {len(args.seeds)} seed(s)"
    )
    return 0


# --- eval ------------------------------------------------------------------

EVAL_DEFAULTS = {
    "split": (str, "test"),
}


def _load_any_checkpoint(path: Path) -> MdrmModel | TsldaModel | SpdNetModel:
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"SPDC":
        return load_classic_checkpoint(path)
    if magic == b"SPDN":
        return load_spdnet_checkpoint(path)
    raise DataError(f"{path}: unrecognized checkpoint magic {magic!r}")


def _model_dim(model) -> int:
    if isinstance(model, SpdNetModel):
        return model.config.input_dim
    return model.dim


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise DataError(f"checkpoint not found: {checkpoint}")
    model = _load_any_checkpoint(checkpoint)
    archive = load_descriptor_archive(Path(args.archive))
    archive_dim = archive.matrices.shape[-1]
    if _model_dim(model) != archive_dim:
        raise DataError(
            f"checkpoint dim {_model_dim(model)} does not match "
            f"archive descriptor dim {archive_dim}"
        )
    x, y = archive.split_arrays(args.split)
    report = evaluate(model, x, y)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    sys.stdout.write(report.format_text())
    return 0


# --- argument wiring ---------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="spdclass", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_extract = sub.add_parser("extract-hc", help="handcrafted feature extraction")
    p_extract.add_argument("--manifest", required=True)
    p_extract.add_argument("--out", required=True)
    p_extract.add_argument("--images-dir")
    p_extract.add_argument("--config")
    p_extract.add_argument("--window-size", type=int, dest="window_size")
    p_extract.add_argument("--stride", type=int)
    p_extract.add_argument("--expected-windows", type=int, dest="expected_windows")
    p_extract.add_argument("--no-windows", action="store_const", const=True, dest="no_windows")
    p_extract.add_argument("--keep-going", action="store_const", const=True, dest="keep_going")
    p_extract.add_argument("--threads", type=int)

    p_describe = sub.add_parser("describe", help="covariance descriptors (+ optional PCA)")
    p_describe.add_argument("--manifest", required=True)
    p_describe.add_argument("--out", required=True)
    p_describe.add_argument("--config")
    p_describe.add_argument("--epsilon", type=float)
    p_describe.add_argument("--pca", type=int)
    p_describe.add_argument("--seed", type=int)
    p_describe.add_argument("--threads", type=int)
    p_describe.add_argument("--source", choices=["HC", "MedSAM", "DINOv2", "other"])

    p_train = sub.add_parser("train", help="fit a classifier on a descriptor archive")
    p_train.add_argument("--archive", required=True)
    p_train.add_argument("--method", required=True, choices=["mdrm", "tslda", "spdnet"])
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config")
    p_train.add_argument("--seeds", type=_parse_seeds)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--lr", type=float, dest="learning_rate")
    p_train.add_argument("--patience", type=int)
    p_train.add_argument("--min-delta", type=float, dest="min_delta")
    p_train.add_argument("--layer-dims", type=_parse_dims, dest="layer_dims")
    p_train.add_argument("--epsilon-floor", type=float, dest="epsilon_floor")
    p_train.add_argument("--discard-threshold", type=float, dest="discard_threshold")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on an archive split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--archive", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--config")
    p_eval.add_argument("--split", choices=["train", "val", "test"])

    return parser


_COMMANDS = {
    "extract-hc": (cmd_extract_hc, EXTRACT_DEFAULTS),
    "describe": (cmd_describe, DESCRIBE_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler, defaults = _COMMANDS[args.command]
        _merge_config(args, defaults)
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
