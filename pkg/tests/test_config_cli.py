import argparse
import json
from pathlib import Path

import numpy as np
import pytest

import support
from derainkit.cli import build_parser, main
from derainkit.config import (DEVICE_ENV_VAR, SCHEMA, RunConfig,
                              apply_config_file, config_text, load_run_config)
from derainkit.errors import ConfigError
from derainkit.images import save_image

TINY_NET_FLAGS = [
    "--network-patch", "32",
    "--network-encoder-channels", "4,8,8,8,8",
    "--network-composition-channels", "4,4",
    "--network-discriminator-channels", "4,8,8,8",
]

TINY_TRAIN_FLAGS = [
    "--train-batch", "2",
    "--train-patch", "32",
    "--train-lr-schedule", "100:0.05",
    "--train-max-iter", "4",
    "--train-checkpoint-every", "2",
]


def namespace(**kw):
    ns = argparse.Namespace()
    for f in SCHEMA:
        setattr(ns, f.dest, None)
    for k, v in kw.items():
        setattr(ns, k, v)
    return ns


@pytest.fixture(scope="module")
def bg_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("bg")
    for i, img in enumerate(support.make_backgrounds(3, 64, 72, seed=7,
                                                     sigma=5)):
        save_image(root / f"bg{i}.png", img)
    return root


def run_synth(out, bg_dir, extra=()):
    return main(["synth", "--backgrounds", str(bg_dir), "--out", str(out),
                 "--count", "4", "--crop", "32",
                 "--rain-streak-length", "5,9", *extra])


class TestConfigSchema:

    def test_defaults_load_and_validate(self):
        cfg = load_run_config(None, None)
        assert cfg.seed == 0
        assert cfg.train.seed == 0
        assert cfg.network.patch == 224

    def test_flags_and_dests_are_unique(self):
        flags = [f.flag for f in SCHEMA]
        dests = [f.dest for f in SCHEMA]
        assert len(set(flags)) == len(flags)
        assert len(set(dests)) == len(dests)

    def test_config_text_round_trips(self, tmp_path):
        cfg = RunConfig()
        cfg.seed = 17
        cfg.train.lr_schedule = ((500, 0.01), (900, 0.001))
        cfg.rain.density = (0.04, 0.1)
        text = config_text(cfg)
        (tmp_path / "c.ini").write_text(text)
        reloaded = apply_config_file(RunConfig(), tmp_path / "c.ini")
        assert config_text(reloaded) == text
        assert reloaded.seed == 17
        assert reloaded.train.lr_schedule == ((500, 0.01), (900, 0.001))
        assert reloaded.rain.density == (0.04, 0.1)

    def test_flags_override_file_overrides_defaults(self, tmp_path):
        (tmp_path / "c.ini").write_text(
            "[run]\nseed = 3\n\n[train]\nbatch = 2\n")
        ns = namespace(run__seed="7")
        cfg = load_run_config(tmp_path / "c.ini", ns)
        assert cfg.seed == 7
        assert cfg.train.batch == 2
        assert cfg.train.seed == 7

    def test_unknown_key_rejected(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nbatch_size = 2\n")
        with pytest.raises(ConfigError, match="batch_size"):
            load_run_config(tmp_path / "c.ini", None)

    def test_unknown_section_rejected(self, tmp_path):
        (tmp_path / "c.ini").write_text("[optimizer]\nlr = 0.1\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "c.ini", None)

    def test_bad_value_rejected(self, tmp_path):
        (tmp_path / "c.ini").write_text("[train]\nbatch = two\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "c.ini", None)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.ini", None)

    def test_invalid_network_value_becomes_config_error(self, tmp_path):
        (tmp_path / "c.ini").write_text("[network]\npatch = 33\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "c.ini", None)

    def test_negative_loss_weight_becomes_config_error(self, tmp_path):
        (tmp_path / "c.ini").write_text("[loss]\npretrain_rain = -1\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "c.ini", None)

    def test_inverted_rain_range_rejected(self, tmp_path):
        (tmp_path / "c.ini").write_text("[rain]\ndensity = 0.1,0.02\n")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "c.ini", None)

    def test_every_flag_in_help(self, capsys):
        parser = build_parser()
        with pytest.raises(SystemExit):
            parser.parse_args(["synth", "--help"])
        text = capsys.readouterr().out
        for f in SCHEMA:
            assert f.flag in text


class TestDeviceResolution:

    def test_defaults_to_cpu(self, monkeypatch):
        monkeypatch.delenv(DEVICE_ENV_VAR, raising=False)
        assert RunConfig().resolve_device() == "cpu"

    def test_env_var_fallback(self, monkeypatch):
        monkeypatch.setenv(DEVICE_ENV_VAR, "cpu")
        assert RunConfig().resolve_device() == "cpu"

    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv(DEVICE_ENV_VAR, "cuda")
        cfg = RunConfig(device="cpu")
        assert cfg.resolve_device() == "cpu"

    def test_unavailable_cuda_falls_back(self, monkeypatch):
        import torch
        monkeypatch.setattr(torch.cuda, "is_available", lambda: False)
        cfg = RunConfig(device="cuda:0")
        with pytest.warns(UserWarning, match="falling back"):
            assert cfg.resolve_device() == "cpu"


class TestSynthCommand:

    def test_writes_triplets(self, tmp_path, bg_dir, capsys):
        assert run_synth(tmp_path / "data", bg_dir) == 0
        out = capsys.readouterr().out
        assert "wrote 4 triplets" in out
        assert sorted(p.name for p in (tmp_path / "data" / "rainy").iterdir()) \
            == ["000000.png", "000001.png", "000002.png", "000003.png"]

    def test_runs_are_byte_identical(self, tmp_path, bg_dir):
        run_synth(tmp_path / "a", bg_dir)
        run_synth(tmp_path / "b", bg_dir)
        files_a = sorted((tmp_path / "a").rglob("*.png"))
        files_b = sorted((tmp_path / "b").rglob("*.png"))
        assert [p.relative_to(tmp_path / "a") for p in files_a] \
            == [p.relative_to(tmp_path / "b") for p in files_b]
        for pa, pb in zip(files_a, files_b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_seed_changes_output(self, tmp_path, bg_dir):
        run_synth(tmp_path / "a", bg_dir)
        run_synth(tmp_path / "c", bg_dir, extra=["--seed", "1"])
        pa = tmp_path / "a" / "rainy" / "000000.png"
        pc = tmp_path / "c" / "rainy" / "000000.png"
        assert pa.read_bytes() != pc.read_bytes()

    def test_missing_backgrounds_dir_fails(self, tmp_path):
        rc = main(["synth", "--backgrounds", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "d")])
        assert rc == 1

    def test_required_flag_enforced(self):
        with pytest.raises(SystemExit) as err:
            main(["synth"])
        assert err.value.code == 1

    def test_unknown_flag_exits_one(self):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--no-such-flag"])
        assert err.value.code == 1


@pytest.fixture(scope="module")
def synth_data(tmp_path_factory, bg_dir):
    out = tmp_path_factory.mktemp("synth") / "data"
    run_synth(out, bg_dir)
    return out


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, synth_data):
    out = tmp_path_factory.mktemp("train") / "run"
    rc = main(["train", "--data", str(synth_data), "--out", str(out),
               *TINY_NET_FLAGS, *TINY_TRAIN_FLAGS])
    assert rc == 0
    return out


class TestTrainCommand:

    def test_outputs(self, trained_run, capsys):
        assert (trained_run / "config.ini").is_file()
        assert (trained_run / "pretrain_latest.pt").is_file()
        assert (trained_run / "pretrain_log.jsonl").is_file()
        assert (trained_run / "training.csv").is_file()
        assert (trained_run / "training_losses.png").is_file()

    def test_config_ini_reflects_flags(self, trained_run):
        text = (trained_run / "config.ini").read_text()
        assert "encoder_channels = 4,8,8,8,8" in text
        assert "max_iter = 4" in text

    def test_resume_continues_in_place(self, synth_data, trained_run,
                                       tmp_path, capsys):
        out = tmp_path / "resumed"
        rc = main(["train", "--data", str(synth_data), "--out", str(out),
                   "--resume", str(trained_run / "pretrain_latest.pt"),
                   *TINY_NET_FLAGS, *TINY_TRAIN_FLAGS,
                   "--train-max-iter", "6"])
        assert rc == 0
        assert "pretrained 6 iterations" in capsys.readouterr().out
        with open(out / "pretrain_log.jsonl") as fh:
            iters = [json.loads(line)["iteration"] for line in fh]
        assert iters == [4, 5]

    def test_bad_data_dir_exits_one(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out")])
        assert rc == 1

    def test_diverging_run_exits_two(self, synth_data, tmp_path):
        rc = main(["train", "--data", str(synth_data),
                   "--out", str(tmp_path / "out"), *TINY_NET_FLAGS,
                   "--train-batch", "2", "--train-patch", "32",
                   "--train-lr-schedule", "100:1e12",
                   "--train-max-iter", "20"])
        assert rc == 2

    def test_config_file_applies(self, synth_data, tmp_path, capsys):
        ini = tmp_path / "run.ini"
        ini.write_text(
            "[network]\n"
            "patch = 32\n"
            "encoder_channels = 4,8,8,8,8\n"
            "composition_channels = 4,4\n"
            "discriminator_channels = 4,8,8,8\n"
            "[train]\n"
            "batch = 2\npatch = 32\nlr_schedule = 100:0.05\n"
            "max_iter = 2\ncheckpoint_every = 2\n")
        out = tmp_path / "out"
        rc = main(["train", "--config", str(ini), "--data", str(synth_data),
                   "--out", str(out)])
        assert rc == 0
        assert "pretrained 2 iterations" in capsys.readouterr().out


class TestDerainCommand:

    def test_single_file(self, trained_run, bg_dir, tmp_path, capsys):
        src = next(bg_dir.glob("*.png"))
        out = tmp_path / "derained"
        rc = main(["derain", "--checkpoint",
                   str(trained_run / "pretrain_latest.pt"),
                   "--out", str(out), str(src)])
        assert rc == 0
        assert (out / f"{src.stem}_derained.png").is_file()
        assert f"{src.name}:" in capsys.readouterr().out

    def test_directory_input(self, trained_run, bg_dir, tmp_path):
        out = tmp_path / "derained"
        rc = main(["derain", "--checkpoint",
                   str(trained_run / "pretrain_latest.pt"),
                   "--out", str(out), str(bg_dir)])
        assert rc == 0
        assert len(list(out.glob("*_derained.png"))) == 3

    def test_missing_checkpoint_exits_one(self, bg_dir, tmp_path):
        rc = main(["derain", "--checkpoint", str(tmp_path / "none.pt"),
                   "--out", str(tmp_path / "o"), str(bg_dir)])
        assert rc == 1

    def test_missing_input_exits_one(self, trained_run, tmp_path):
        rc = main(["derain", "--checkpoint",
                   str(trained_run / "pretrain_latest.pt"),
                   "--out", str(tmp_path / "o"), str(tmp_path / "absent")])
        assert rc == 1


class TestEvalCommand:

    def test_identical_dirs(self, bg_dir, tmp_path, capsys):
        out = tmp_path / "report"
        rc = main(["eval", "--results", str(bg_dir), "--truth", str(bg_dir),
                   "--out", str(out)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "mean" in text
        assert "inf" in text
        assert (out / "eval.csv").is_file()
        assert (out / "eval_scores.png").is_file()

    def test_mismatched_ids_exit_one(self, bg_dir, tmp_path):
        other = tmp_path / "other"
        save_image(other / "lonely.png",
                   np.zeros((32, 32, 3), np.float32))
        rc = main(["eval", "--results", str(bg_dir), "--truth", str(other),
                   "--out", str(tmp_path / "r")])
        assert rc == 1


class TestBenchCommand:

    def test_custom_size(self, tmp_path, capsys):
        out = tmp_path / "bench"
        rc = main(["bench", "--out", str(out), *TINY_NET_FLAGS,
                   "--size", "64", "--warmup", "1", "--runs", "2"])
        assert rc == 0
        text = capsys.readouterr().out
        assert "64x64: median" in text
        assert "published reference" not in text
        assert (out / "bench.csv").is_file()
        assert (out / "bench_times.png").is_file()

    def test_reference_sizes_print_comparison(self, tmp_path, capsys):
        rc = main(["bench", "--out", str(tmp_path / "bench"), *TINY_NET_FLAGS,
                   "--size", "250", "--warmup", "0", "--runs", "1"])
        assert rc == 0
        text = capsys.readouterr().out
        assert "250x250: median" in text
        assert "published reference" in text
        assert "cpu 0.98s / gpu 0.03s" in text

    def test_checkpoint_input(self, trained_run, tmp_path, capsys):
        rc = main(["bench", "--checkpoint",
                   str(trained_run / "pretrain_latest.pt"),
                   "--out", str(tmp_path / "bench"),
                   "--size", "64", "--warmup", "0", "--runs", "1"])
        assert rc == 0
        assert "64x64: median" in capsys.readouterr().out
