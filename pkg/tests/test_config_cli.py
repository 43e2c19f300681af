"""Config schema strictness, dataset assembly, and the CLI contract
(subcommands, outputs, exit codes)."""

import hashlib
import json

import numpy as np
import pytest

from msn.cli import main
from msn.config import ConfigError, RunConfig, load_datasets

from test_data import write_tiny_archive


def run_cli(argv):
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


def minimal_config(**train_overrides):
    train = {"iterations": 8, "batch_size": 9, "batching": "class-aware",
             "eval_interval": 4, "seed": 0, "xi": {"window": 4}}
    train.update(train_overrides)
    return {
        "network": {"family": "vgg", "width_multiplier": 1 / 32,
                    "attachment": [2], "num_classes": 3,
                    "input_shape": [8, 8, 1], "num_blocks": 2},
        "data": {"dataset": "blobs", "gcn": False, "zca": False, "flip": False,
                 "blobs": {"classes": 3, "train_per_class": 30,
                           "test_per_class": 10, "image_shape": [8, 8, 1],
                           "separation": 6.0}},
        "train": train,
    }


def write_config(tmp_path, cfg, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestConfigSchema:
    def test_minimal_parses(self):
        cfg = RunConfig.from_dict(minimal_config())
        assert cfg.network.family == "vgg"
        assert cfg.to_train_config().iterations == 8

    @pytest.mark.parametrize("mutate,needle", [
        (lambda d: d.update(extra=1), "extra"),
        (lambda d: d["network"].update(bogus=2), "bogus"),
        (lambda d: d["train"].update(lr_warmup=1), "lr_warmup"),
        (lambda d: d["train"]["xi"].update(ceiling=9), "ceiling"),
        (lambda d: d["data"].update(crop=True), "crop"),
        (lambda d: d["data"]["blobs"].update(spin=3), "spin"),
    ])
    def test_unknown_keys_rejected_by_name(self, mutate, needle):
        raw = minimal_config()
        mutate(raw)
        with pytest.raises(ConfigError) as exc:
            RunConfig.from_dict(raw)
        assert needle in str(exc.value)

    def test_required_fields(self):
        raw = minimal_config()
        del raw["train"]["iterations"]
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)
        raw = minimal_config()
        del raw["network"]["family"]
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)

    def test_named_attachment_config(self):
        raw = minimal_config()
        raw["network"].update(attachment="config7", num_blocks=4,
                              input_shape=[16, 16, 1])
        cfg = RunConfig.from_dict(raw)
        assert cfg.network.attachment == (1, 2, 3, 4)

    def test_loss_modes(self):
        raw = minimal_config(loss="ce")
        cfg = RunConfig.from_dict(raw)
        assert cfg.to_train_config().within_weight == 0.0
        assert RunConfig.from_dict(minimal_config()).to_train_config().within_weight == 1.0
        raw = minimal_config(loss="hinge")
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)

    def test_overrides(self):
        cfg = RunConfig.from_dict(minimal_config())
        out = cfg.with_overrides(seed=5, loss="ce", out_dir="x")
        assert out.to_train_config().seed == 5
        assert out.to_train_config().within_weight == 0.0
        assert out.out_dir == "x"

    def test_resolved_json_reparses_to_same(self):
        cfg = RunConfig.from_dict(minimal_config())
        resolved = json.loads(cfg.resolved_json())
        again = RunConfig.from_dict(resolved)
        assert again.resolved_json() == cfg.resolved_json()

    def test_bad_network_reported_as_config_error(self):
        raw = minimal_config()
        raw["network"]["attachment"] = [4]  # outside 2 blocks
        with pytest.raises(ConfigError):
            RunConfig.from_dict(raw)


class TestLoadDatasets:
    def test_blob_splits_and_shapes(self):
        cfg = RunConfig.from_dict(minimal_config())
        train, test = load_datasets(cfg)
        assert len(train) == 90 and len(test) == 30
        assert train.images.shape[1:] == (8, 8, 1)
        for c in range(3):
            assert (train.labels == c).sum() == 30
            assert (test.labels == c).sum() == 10

    def test_same_seed_shares_dataset_across_loss_modes(self):
        msl_cfg = RunConfig.from_dict(minimal_config())
        ce_cfg = msl_cfg.with_overrides(loss="ce")
        a, _ = load_datasets(msl_cfg)
        b, _ = load_datasets(ce_cfg)
        np.testing.assert_array_equal(a.images, b.images)

    def test_different_seeds_differ(self):
        base = RunConfig.from_dict(minimal_config())
        a, _ = load_datasets(base)
        b, _ = load_datasets(base.with_overrides(seed=9))
        assert not np.array_equal(a.images, b.images)

    def test_gcn_zca_chain_applies(self):
        raw = minimal_config()
        raw["data"]["gcn"] = True
        raw["data"]["zca"] = True
        cfg = RunConfig.from_dict(raw)
        train, test = load_datasets(cfg)
        # GCN then ZCA leaves per-image means near zero
        assert abs(train.images.reshape(len(train), -1).mean()) < 0.2

    def test_missing_cifar_reports_config_error(self, tmp_path):
        raw = minimal_config()
        raw["data"] = {"dataset": "cifar10", "data_dir": str(tmp_path / "nope")}
        with pytest.raises(ConfigError):
            load_datasets(RunConfig.from_dict(raw))


def write_fullsize_archive(tmp_path):
    """Canonically-sized zero-filled batches; gzip keeps this tiny on disk."""
    import io
    import tarfile

    from msn import data as D

    buf = io.BytesIO()
    payload = bytes(D.CIFAR10_FILE_BYTES)
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for rel in D.CIFAR10_TRAIN_FILES + D.CIFAR10_TEST_FILES:
            info = tarfile.TarInfo(rel)
            info.size = len(payload)
            tar.addfile(info, io.BytesIO(payload))
    archive = tmp_path / "cifar.tar.gz"
    archive.write_bytes(buf.getvalue())
    return archive


class TestCliFetch:
    def test_fetch_then_already_verified(self, tmp_path, capsys):
        archive = write_fullsize_archive(tmp_path)
        digest = hashlib.sha256(archive.read_bytes()).hexdigest()
        dest = tmp_path / "data"
        code = run_cli(["fetch-data", "--dataset", "cifar10", "--out", str(dest),
                        "--url", archive.as_uri(), "--sha256", digest])
        assert code == 0
        assert "fetched and verified" in capsys.readouterr().out
        # second call must not touch the (now dead) source
        code = run_cli(["fetch-data", "--dataset", "cifar10", "--out", str(dest),
                        "--url", (tmp_path / "dead.tar.gz").as_uri(),
                        "--sha256", digest])
        assert code == 0
        assert "already verified" in capsys.readouterr().out

    def test_undersized_extraction_exits_2(self, tmp_path):
        archive, _ = write_tiny_archive(tmp_path)
        digest = hashlib.sha256(archive.read_bytes()).hexdigest()
        code = run_cli(["fetch-data", "--dataset", "cifar10",
                        "--out", str(tmp_path / "data"),
                        "--url", archive.as_uri(), "--sha256", digest])
        assert code == 2

    def test_config_file_supplies_url_and_digest(self, tmp_path):
        archive = write_fullsize_archive(tmp_path)
        digest = hashlib.sha256(archive.read_bytes()).hexdigest()
        raw = minimal_config()
        raw["data"] = {"dataset": "cifar10", "data_dir": str(tmp_path / "d"),
                       "url": archive.as_uri(), "sha256": digest}
        config_path = write_config(tmp_path, raw)
        code = run_cli(["fetch-data", "--dataset", "cifar10",
                        "--config", str(config_path)])
        assert code == 0
        assert (tmp_path / "d" / ".verified-cifar10").is_file()

    def test_unknown_dataset_is_usage_error(self):
        assert run_cli(["fetch-data", "--dataset", "mnist", "--out", "x"]) == 1

    def test_tampered_archive_exits_2(self, tmp_path):
        archive, expected = write_tiny_archive(tmp_path)
        digest = hashlib.sha256(archive.read_bytes()).hexdigest()
        raw = bytearray(archive.read_bytes())
        raw[10] ^= 0xFF
        archive.write_bytes(bytes(raw))
        code = run_cli(["fetch-data", "--dataset", "cifar10",
                        "--out", str(tmp_path / "d"),
                        "--url", archive.as_uri(), "--sha256", digest])
        assert code == 2

    def test_unreachable_url_exits_3(self, tmp_path):
        code = run_cli(["fetch-data", "--dataset", "cifar10",
                        "--out", str(tmp_path / "d"),
                        "--url", (tmp_path / "missing.tar.gz").as_uri(),
                        "--sha256", "0" * 64])
        assert code == 3


class TestCliTrainEval:
    def test_train_writes_outputs_and_is_deterministic(self, tmp_path, capsys):
        config_path = write_config(tmp_path, minimal_config())
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = run_cli(["train", "--config", str(config_path), "--out", str(out)])
            assert code == 0
            assert (out / "config.resolved.json").is_file()
            assert (out / "metrics.csv").is_file()
            assert (out / "final.ckpt").is_file()
            outs.append(out)
        assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()

    def test_loss_flag_forces_zero_weight(self, tmp_path):
        config_path = write_config(tmp_path, minimal_config())
        out = tmp_path / "ce"
        assert run_cli(["train", "--config", str(config_path), "--out", str(out),
                        "--loss", "ce"]) == 0
        resolved = json.loads((out / "config.resolved.json").read_text())
        assert resolved["train"]["loss"] == "ce"
        assert resolved["train"]["within_weight"] == 0.0

    def test_missing_config_exits_1(self, tmp_path):
        assert run_cli(["train", "--config", str(tmp_path / "none.json")]) == 1

    def test_invalid_config_key_exits_1(self, tmp_path):
        raw = minimal_config()
        raw["train"]["warmup"] = 5
        config_path = write_config(tmp_path, raw)
        assert run_cli(["train", "--config", str(config_path)]) == 1

    def test_eval_prints_error_and_repeats(self, tmp_path, capsys):
        config_path = write_config(tmp_path, minimal_config())
        out = tmp_path / "run"
        assert run_cli(["train", "--config", str(config_path), "--out", str(out)]) == 0
        capsys.readouterr()
        values = []
        for _ in range(2):
            assert run_cli(["eval", "--checkpoint", str(out / "final.ckpt")]) == 0
            printed = capsys.readouterr().out.strip()
            assert printed.startswith("test_error=")
            assert len(printed.split("=")[1].split(".")[1]) == 6
            values.append(printed)
        assert values[0] == values[1]

    def test_eval_corrupted_checkpoint_exits_2(self, tmp_path, capsys):
        config_path = write_config(tmp_path, minimal_config())
        out = tmp_path / "run"
        assert run_cli(["train", "--config", str(config_path), "--out", str(out)]) == 0
        ckpt = out / "final.ckpt"
        raw = bytearray(ckpt.read_bytes())
        raw[0:4] = b"XXXX"
        ckpt.write_bytes(bytes(raw))
        assert run_cli(["eval", "--checkpoint", str(ckpt)]) == 2

    def test_default_out_dir_is_fresh_per_run(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        config_path = write_config(tmp_path, minimal_config())
        assert run_cli(["train", "--config", str(config_path)]) == 0
        assert run_cli(["train", "--config", str(config_path)]) == 0
        runs = list((tmp_path / "runs").iterdir())
        assert len(runs) == 2


class TestCliVerify:
    def test_oracle_suite_passes(self, capsys):
        assert run_cli(["verify", "--suite", "oracle"]) == 0
        out = capsys.readouterr().out
        assert "oracle/within_class_vs_all_pairs" in out
        assert "FAIL" not in out

    def test_invariants_suite_passes(self, capsys):
        assert run_cli(["verify", "--suite", "invariants"]) == 0

    def test_unknown_suite_is_usage_error(self):
        assert run_cli(["verify", "--suite", "bogus"]) == 1
