import csv

import numpy as np
import pytest

from gve_exporter.encoders import ENCODER_SPECS
from gve_exporter.export import (
    ExportError,
    ExportJob,
    ManifestRow,
    load_rgb_image,
    read_manifest,
    resize_bilinear,
    run_export,
    write_manifest,
)


class StubEncoder:
    """Same interface as a real encoder; block-averages the input so the
    output is a deterministic function of the image content."""

    def __init__(self, name: str, record_batches: bool = False):
        self.spec = ENCODER_SPECS[name]
        self.batches = [] if record_batches else None

    def features(self, batch: np.ndarray) -> np.ndarray:
        if self.batches is not None:
            self.batches.append(batch.copy())
        n, _, size, _ = batch.shape
        g, c = self.spec.grid, self.spec.channels
        block = size // g
        trimmed = batch[:, :, : g * block, : g * block]
        pooled = trimmed.reshape(n, 3, g, block, g, block).mean(axis=(1, 3, 5))
        scale = (np.arange(c, dtype=np.float32) + 1.0)[None, :, None, None] / c
        return (pooled[:, None] * scale).astype(np.float32)


def make_dataset(root, n_items=3, size=64, gray=True, seed=0):
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_items):
        shape = (size, size) if gray else (3, size, size)
        img = rng.uniform(size=shape).astype(np.float32)
        rel = f"images/item{i}.npy"
        np.save(root / rel, img)
        rows.append(ManifestRow(f"item{i}", rel, str(i % 2), "train" if i else "test"))
    manifest = root / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest


class TestImageLoading:
    def test_grayscale_replicated_to_three_channels(self, tmp_path):
        img = np.random.default_rng(0).uniform(size=(10, 12)).astype(np.float32)
        np.save(tmp_path / "g.npy", img)
        rgb = load_rgb_image(tmp_path / "g.npy")
        assert rgb.shape == (3, 10, 12)
        assert np.array_equal(rgb[0], rgb[1]) and np.array_equal(rgb[1], rgb[2])

    def test_png_decoding(self, tmp_path):
        from PIL import Image

        arr = np.random.default_rng(1).integers(0, 255, size=(8, 8), dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "img.png")
        rgb = load_rgb_image(tmp_path / "img.png")
        assert rgb.shape == (3, 8, 8)
        assert np.allclose(rgb[0], arr / 255.0)

    def test_undecodable_image(self, tmp_path):
        (tmp_path / "broken.png").write_bytes(b"not a png at all")
        with pytest.raises(ExportError, match="undecodable|unsupported"):
            load_rgb_image(tmp_path / "broken.png")

    def test_out_of_range_rejected(self, tmp_path):
        np.save(tmp_path / "bad.npy", np.full((4, 4), 3.0, dtype=np.float32))
        with pytest.raises(ExportError, match=r"\[0, 1\]"):
            load_rgb_image(tmp_path / "bad.npy")

    def test_resize_is_bilinear_identity_on_matching_size(self):
        img = np.random.default_rng(2).uniform(size=(3, 37, 37)).astype(np.float32)
        assert np.array_equal(resize_bilinear(img, 37), img)

    def test_resize_constant_image_stays_constant(self):
        img = np.full((3, 64, 64), 0.25, dtype=np.float32)
        out = resize_bilinear(img, 518)
        assert out.shape == (3, 518, 518)
        assert np.allclose(out, 0.25, atol=1e-6)


class TestSpecs:
    def test_registered_shapes(self):
        assert ENCODER_SPECS["dinov2-large"].input_size == 518
        assert ENCODER_SPECS["dinov2-large"].output_shape == (1024, 37, 37)
        assert ENCODER_SPECS["medsam"].input_size == 1024
        assert ENCODER_SPECS["medsam"].output_shape == (256, 64, 64)

    def test_unknown_encoder_rejected(self, tmp_path):
        with pytest.raises(ExportError, match="unknown encoder"):
            ExportJob("clip", tmp_path / "m.csv", tmp_path / "out")


class TestExport:
    def test_dinov2_shape_contract(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=3)
        job = ExportJob("dinov2-large", manifest, tmp_path / "out", batch_size=2)
        written = run_export(job, encoder=StubEncoder("dinov2-large"))
        assert written == 3
        for i in range(3):
            feat = np.load(tmp_path / "out" / "features" / f"item{i}.npy")
            assert feat.shape == (1024, 37, 37)
            assert feat.dtype == np.float32

    def test_medsam_shape_contract(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=2)
        job = ExportJob("medsam", manifest, tmp_path / "out")
        assert run_export(job, encoder=StubEncoder("medsam")) == 2
        feat = np.load(tmp_path / "out" / "features" / "item0.npy")
        assert feat.shape == (256, 64, 64)

    def test_round_trip_through_consumer_reader(self, tmp_path):
        spdclass_data = pytest.importorskip("spdclass.data")
        manifest = make_dataset(tmp_path, n_items=2)
        job = ExportJob("medsam", manifest, tmp_path / "out")
        run_export(job, encoder=StubEncoder("medsam"))
        path = tmp_path / "out" / "features" / "item1.npy"
        ours = np.load(path)
        theirs = spdclass_data.tensor_read(path)
        assert np.array_equal(ours, theirs)
        loaded = spdclass_data.manifest_load(tmp_path / "out" / "manifest.csv")
        assert [r.item_id for r in loaded.records] == ["item0", "item1"]

    def test_manifest_rewritten_with_labels_and_splits(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=3)
        job = ExportJob("medsam", manifest, tmp_path / "out")
        run_export(job, encoder=StubEncoder("medsam"))
        with open(tmp_path / "out" / "manifest.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["id", "path", "label", "split"]
        assert rows[1] == ["item0", "features/item0.npy", "0", "test"]
        assert rows[2][3] == "train"

    def test_encoder_receives_resized_rgb(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=2, size=32)
        encoder = StubEncoder("medsam", record_batches=True)
        run_export(ExportJob("medsam", manifest, tmp_path / "out"), encoder=encoder)
        batch = encoder.batches[0]
        assert batch.shape == (2, 3, 1024, 1024)
        assert np.array_equal(batch[:, 0], batch[:, 1])  # grayscale replication

    def test_export_is_deterministic(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=2)
        for sub in ("a", "b"):
            run_export(
                ExportJob("medsam", manifest, tmp_path / sub),
                encoder=StubEncoder("medsam"),
            )
        for i in range(2):
            a = (tmp_path / "a" / "features" / f"item{i}.npy").read_bytes()
            b = (tmp_path / "b" / "features" / f"item{i}.npy").read_bytes()
            assert a == b

    def test_shape_violation_names_item(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=1)

        class WrongShape(StubEncoder):
            def features(self, batch):
                return np.zeros((batch.shape[0], 7, 7, 7), dtype=np.float32)

        with pytest.raises(ExportError, match="item0"):
            run_export(ExportJob("medsam", manifest, tmp_path / "out"), WrongShape("medsam"))

    def test_missing_manifest(self, tmp_path):
        job = ExportJob("medsam", tmp_path / "none.csv", tmp_path / "out")
        with pytest.raises(ExportError, match="not found"):
            run_export(job, encoder=StubEncoder("medsam"))

    def test_mismatched_encoder_rejected(self, tmp_path):
        manifest = make_dataset(tmp_path, n_items=1)
        job = ExportJob("dinov2-large", manifest, tmp_path / "out")
        with pytest.raises(ExportError, match="does not match"):
            run_export(job, encoder=StubEncoder("medsam"))
