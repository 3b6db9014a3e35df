import json

import numpy as np
import pytest

from spdclass.cli import main
from spdclass.data import manifest_save, tensor_read, tensor_write
from spdclass.data import ManifestRecord


def smooth_image(rng, size):
    angle = rng.uniform(0, np.pi)
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    ramp = np.cos(angle) * cols + np.sin(angle) * rows
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    return np.clip(ramp + rng.normal(scale=0.01, size=(size, size)), 0.0, 1.0)


def busy_image(rng, size):
    freq = rng.uniform(5.0, 7.0)
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    wave = np.sin(2 * np.pi * freq * cols / size) * np.sin(2 * np.pi * freq * rows / size)
    base = 0.5 + 0.45 * wave
    return np.clip(base + rng.normal(scale=0.01, size=(size, size)), 0.0, 1.0)


def make_image_dataset(root, n_train=15, n_val=5, n_test=5, size=32, seed=0):
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for cls in (0, 1):
            for i in range(count):
                item_id = f"{split}{cls}_{i}"
                img = smooth_image(rng, size) if cls == 0 else busy_image(rng, size)
                rel = f"images/{item_id}.npy"
                tensor_write(root / rel, img.astype(np.float32))
                records.append(ManifestRecord(item_id, rel, cls, split))
    manifest_save(records, root / "manifest.csv")
    return root / "manifest.csv"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Shared extract + describe run for the fast end-to-end tests."""
    root = tmp_path_factory.mktemp("pipeline")
    manifest = make_image_dataset(root)
    assert main(["extract-hc", "--manifest", str(manifest), "--out", str(root / "hc"),
                 "--no-windows"]) == 0
    assert main(["describe", "--manifest", str(root / "hc" / "manifest.csv"),
                 "--out", str(root / "desc")]) == 0
    return root


class TestExtract:
    def test_reference_windowed_shape(self, tmp_path):
        rng = np.random.default_rng(1)
        tensor_write(tmp_path / "img.npy", rng.uniform(size=(64, 64)).astype(np.float32))
        manifest_save([ManifestRecord("a", "img.npy", 0, "train")], tmp_path / "m.csv")
        assert main(["extract-hc", "--manifest", str(tmp_path / "m.csv"),
                     "--out", str(tmp_path / "out")]) == 0
        assert tensor_read(tmp_path / "out" / "features" / "a.npy").shape == (128, 21, 21)

    def test_no_windows_shape(self, pipeline):
        values = tensor_read(pipeline / "hc" / "features" / "train0_0.npy")
        assert values.shape == (8, 32, 32)

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        assert main(["extract-hc", "--manifest", str(pipeline / "manifest.csv"),
                     "--out", str(tmp_path / "again"), "--no-windows"]) == 0
        name = "features/train1_2.npy"
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "hc" / name).read_bytes()
        assert (tmp_path / "again" / "manifest.csv").read_text() == (
            pipeline / "hc" / "manifest.csv"
        ).read_text()

    def test_failures_abort_without_keep_going(self, tmp_path, capsys):
        tensor_write(tmp_path / "ok.npy", np.full((32, 32), 0.5, dtype=np.float32))
        tensor_write(tmp_path / "tiny.npy", np.full((2, 2), 0.5, dtype=np.float32))
        manifest_save(
            [ManifestRecord("ok", "ok.npy", 0, "train"),
             ManifestRecord("tiny", "tiny.npy", 1, "train")],
            tmp_path / "m.csv",
        )
        base = ["extract-hc", "--manifest", str(tmp_path / "m.csv"), "--no-windows"]
        assert main(base + ["--out", str(tmp_path / "out1")]) == 2
        assert main(base + ["--out", str(tmp_path / "out2"), "--keep-going"]) == 0
        kept = (tmp_path / "out2" / "manifest.csv").read_text()
        assert "ok" in kept and "tiny" not in kept


class TestDescribe:
    def test_descriptor_dim_without_pca(self, pipeline):
        d = tensor_read(pipeline / "desc" / "descriptors" / "train0_0.npy")
        assert d.shape == (8, 8)

    def test_pca_reduces_descriptor_dim(self, pipeline, tmp_path):
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "desc4"), "--pca", "4"]) == 0
        d = tensor_read(tmp_path / "desc4" / "descriptors" / "train0_0.npy")
        assert d.shape == (4, 4)
        assert (tmp_path / "desc4" / "pca.npz").is_file()

    def test_pca_fit_depends_on_train_split(self, pipeline, tmp_path):
        # reassigning which items are "train" must change the fitted PCA
        original = (pipeline / "hc" / "manifest.csv").read_text().splitlines()
        swapped = [original[0]]
        for line in original[1:]:
            if line.endswith(",train"):
                swapped.append(line[: -len("train")] + "test")
            elif line.endswith(",test"):
                swapped.append(line[: -len("test")] + "train")
            else:
                swapped.append(line)
        alt_manifest = pipeline / "hc" / "manifest_swapped.csv"
        alt_manifest.write_text("\n".join(swapped) + "\n")
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "a"), "--pca", "4"]) == 0
        assert main(["describe", "--manifest", str(alt_manifest),
                     "--out", str(tmp_path / "b"), "--pca", "4"]) == 0
        mean_a = np.load(tmp_path / "a" / "pca.npz")["mean"]
        mean_b = np.load(tmp_path / "b" / "pca.npz")["mean"]
        assert not np.allclose(mean_a, mean_b)

    def test_pca_exceeding_channels_rejected(self, pipeline, tmp_path):
        code = main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "x"), "--pca", "99"])
        assert code == 2

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "again")]) == 0
        name = "descriptors/val1_0.npy"
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "desc" / name).read_bytes()


class TestTrainEval:
    @pytest.mark.parametrize("method", ["mdrm", "tslda"])
    def test_classic_end_to_end(self, pipeline, tmp_path, method):
        run_dir = tmp_path / method
        assert main(["train", "--archive", str(pipeline / "desc"), "--method", method,
                     "--out", str(run_dir), "--seeds", "0,1"]) == 0
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert metrics["method"] == method
        # deterministic fits: identical metrics for every seed
        values = [s["balanced_accuracy"] for s in metrics["per_seed"]]
        assert values[0] == values[1]
        assert main(["eval", "--checkpoint", str(run_dir / "model_seed0.spdc"),
                     "--archive", str(pipeline / "desc"), "--split", "test",
                     "--out", str(run_dir / "report.json")]) == 0
        report = json.loads((run_dir / "report.json").read_text())
        assert report["balanced_accuracy"] >= 0.95
        assert report["schema_version"] == 1

    def test_spdnet_end_to_end(self, pipeline, tmp_path, capsys):
        run_dir = tmp_path / "spdnet"
        assert main(["train", "--archive", str(pipeline / "desc"), "--method", "spdnet",
                     "--out", str(run_dir), "--seeds", "0", "--epochs", "40",
                     "--patience", "40", "--layer-dims", "4,2"]) == 0
        assert main(["eval", "--checkpoint", str(run_dir / "model_seed0.spdn"),
                     "--archive", str(pipeline / "desc"), "--split", "test",
                     "--out", str(run_dir / "report.json")]) == 0
        report = json.loads((run_dir / "report.json").read_text())
        assert report["balanced_accuracy"] >= 0.95
        text = capsys.readouterr().out
        assert "balanced accuracy" in text

    def test_epoch_budget_honored(self, pipeline, tmp_path):
        run_dir = tmp_path / "short"
        assert main(["train", "--archive", str(pipeline / "desc"), "--method", "spdnet",
                     "--out", str(run_dir), "--seeds", "0", "--epochs", "2",
                     "--patience", "99", "--layer-dims", "4,2"]) == 0
        metrics = json.loads((run_dir / "metrics.json").read_text())
        assert metrics["per_seed"][0]["epochs_run"] == 2

    def test_eval_is_idempotent(self, pipeline, tmp_path):
        run_dir = tmp_path / "idem"
        assert main(["train", "--archive", str(pipeline / "desc"), "--method", "mdrm",
                     "--out", str(run_dir)]) == 0
        args = ["eval", "--checkpoint", str(run_dir / "model_seed0.spdc"),
                "--archive", str(pipeline / "desc"), "--split", "test"]
        assert main(args + ["--out", str(run_dir / "r1.json")]) == 0
        assert main(args + ["--out", str(run_dir / "r2.json")]) == 0
        assert (run_dir / "r1.json").read_text() == (run_dir / "r2.json").read_text()

    def test_training_split_memorization(self, pipeline, tmp_path):
        run_dir = tmp_path / "memorize"
        assert main(["train", "--archive", str(pipeline / "desc"), "--method", "mdrm",
                     "--out", str(run_dir)]) == 0
        assert main(["eval", "--checkpoint", str(run_dir / "model_seed0.spdc"),
                     "--archive", str(pipeline / "desc"), "--split", "train",
                     "--out", str(run_dir / "train_report.json")]) == 0
        report = json.loads((run_dir / "train_report.json").read_text())
        assert report["balanced_accuracy"] == 1.0

    def test_dim_mismatch_names_both(self, pipeline, tmp_path, capsys):
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "desc4"), "--pca", "4"]) == 0
        run_dir = tmp_path / "mdrm8"
        assert main(["train", "--archive", str(pipeline / "desc"), "--method", "mdrm",
                     "--out", str(run_dir)]) == 0
        code = main(["eval", "--checkpoint", str(run_dir / "model_seed0.spdc"),
                     "--archive", str(tmp_path / "desc4"), "--split", "test",
                     "--out", str(tmp_path / "r.json")])
        assert code == 2
        err = capsys.readouterr().err
        assert "8" in err and "4" in err


class TestExitCodesAndConfig:
    def test_usage_error_unknown_flag(self):
        assert main(["describe", "--bogus"]) == 1

    def test_usage_error_bad_method(self, tmp_path):
        assert main(["train", "--archive", "x", "--method", "svm", "--out", "y"]) == 1

    def test_data_error_missing_manifest(self, tmp_path):
        assert main(["describe", "--manifest", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_numerical_error_exit_code(self, pipeline, tmp_path):
        with np.errstate(all="ignore"):
            code = main(["train", "--archive", str(pipeline / "desc"),
                         "--method", "spdnet", "--out", str(tmp_path / "blow"),
                         "--seeds", "0", "--epochs", "3", "--lr", "1e200"])
        assert code == 3

    def test_config_file_supplies_defaults(self, pipeline, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("pca = 4\nseed = 3\n# comment line\n")
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "cfgout"), "--config", str(config)]) == 0
        d = tensor_read(tmp_path / "cfgout" / "descriptors" / "train0_0.npy")
        assert d.shape == (4, 4)

    def test_flags_override_config(self, pipeline, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("pca = 4\n")
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "cfgout"), "--config", str(config),
                     "--pca", "2"]) == 0
        d = tensor_read(tmp_path / "cfgout" / "descriptors" / "train0_0.npy")
        assert d.shape == (2, 2)

    def test_unknown_config_key_rejected(self, pipeline, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("pca = 4\nbogus_knob = 1\n")
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "cfgout"), "--config", str(config)]) == 1

    def test_threads_env_default(self, pipeline, tmp_path, monkeypatch):
        monkeypatch.setenv("SPDCLASS_THREADS", "2")
        assert main(["describe", "--manifest", str(pipeline / "hc" / "manifest.csv"),
                     "--out", str(tmp_path / "mt")]) == 0
        name = "descriptors/train0_0.npy"
        assert (tmp_path / "mt" / name).read_bytes() == (pipeline / "desc" / name).read_bytes()
