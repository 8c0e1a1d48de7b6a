import numpy as np
import pytest

from embdepth.cli import main, parse_config_file, resolve_config, build_parser
from embdepth.trainer import ConfigError


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train once for the whole module; commands under test reuse it."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "tiny.pceb"
    out = root / "run"
    rc = main([
        "synth", "--out", str(data), "--seed", "0", "--frames", "4",
        "--dim", "8", "--noise", "0.05",
    ])
    assert rc == 0
    rc = main([
        "train", "--train-data", str(data), "--val-data", str(data),
        "--out-dir", str(out), "--max-steps", "6", "--batch-size", "2",
        "--table-init", "random:1",
    ])
    assert rc == 0
    return root, data, out


class TestSmokePipeline:
    def test_synth_train_eval(self, pipeline, capsys):
        root, data, out = pipeline
        assert (out / "final.pckp").exists()
        assert (out / "metrics.log").exists()
        rc = main(["eval", "--checkpoint", str(out / "final.pckp"), "--data", str(data)])
        assert rc == 0
        text = capsys.readouterr().out
        assert "abs_rel" in text and "n_pixels" in text

    def test_metrics_log_format(self, pipeline):
        _, _, out = pipeline
        lines = (out / "metrics.log").read_text().splitlines()
        assert lines[0].startswith("#")  # timestamp confined to the header
        fields = lines[1].split()
        assert fields[0] == "epoch"
        for key in ("abs_rel", "rmse", "log10", "d1", "d2", "d3", "stall", "lr_emb", "lr_depth"):
            assert key in fields

    def test_predict_writes_pgm(self, pipeline):
        root, data, out = pipeline
        dump = root / "pgm"
        rc = main([
            "predict", "--checkpoint", str(out / "final.pckp"),
            "--data", str(data), "--out-dir", str(dump),
        ])
        assert rc == 0
        files = sorted(dump.glob("*.pgm"))
        assert len(files) == 4
        assert files[0].read_bytes().startswith(b"P5\n")

    def test_analyze_writes_csvs(self, pipeline):
        root, data, out = pipeline
        dump = root / "csv"
        rc = main([
            "analyze", "--checkpoint", str(out / "final.pckp"),
            "--data", str(data), "--out-dir", str(dump), "--trim", "1",
        ])
        assert rc == 0
        assert {p.name for p in dump.glob("*.csv")} == {"joint.csv", "sigma.csv", "hist.csv"}


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_command(self, capsys):
        assert main([]) == 1

    def test_missing_data_file(self, tmp_path, capsys):
        rc = main([
            "train", "--train-data", str(tmp_path / "nope.pceb"),
            "--val-data", str(tmp_path / "nope.pceb"), "--out-dir", str(tmp_path),
        ])
        assert rc == 2

    def test_corrupt_data_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.pceb"
        bad.write_bytes(b"GARBAGE!")
        rc = main(["eval", "--checkpoint", str(bad), "--data", str(bad)])
        assert rc == 2

    def test_bad_config_value(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("batch_size = many\n")
        rc = main(["train", "--config", str(cfg)])
        assert rc == 1

    def test_missing_required_setting(self, capsys):
        assert main(["train"]) == 1

    def test_gradcheck_reports_small_error(self, capsys):
        rc = main(["gradcheck", "--seed", "0", "--instances", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        errs = [float(line.split()[-1]) for line in out.splitlines() if "max_rel_err" in line]
        assert errs and max(errs) <= 1e-4


class TestConfigFile:
    def test_parse_values_and_comments(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text(
            "# run settings\n"
            "seed = 7\n"
            "emb_lr = 3e-4   # keep the default\n"
            "freeze_mlps = true\n"
            "\n"
            "loss_set = infonce\n"
        )
        got = parse_config_file(cfg)
        assert got == {"seed": 7, "emb_lr": 3e-4, "freeze_mlps": True, "loss_set": "infonce"}

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "b.cfg"
        cfg.write_text("warp_speed = 9\n")
        with pytest.raises(ConfigError):
            parse_config_file(cfg)

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("seed = 7\nbatch_size = 4\n")
        args = build_parser().parse_args(["train", "--config", str(cfg), "--seed", "9"])
        resolved = resolve_config(args)
        assert resolved["seed"] == 9  # flag wins
        assert resolved["batch_size"] == 4  # file still applies

    def test_every_flag_has_config_equivalent(self):
        from embdepth.cli import SCHEMA

        parser = build_parser()
        for action in parser._subparsers._group_actions[0].choices.values():
            for flag_action in action._actions:
                dest = flag_action.dest
                if dest in ("help", "config", "command"):
                    continue
                assert dest in SCHEMA, f"flag dest {dest!r} missing from config schema"


class TestDeterminism:
    def test_identical_config_identical_artifacts(self, tmp_path):
        data = tmp_path / "d.pceb"
        assert main(["synth", "--out", str(data), "--seed", "3", "--frames", "4",
                     "--dim", "8"]) == 0

        def run(tag):
            out = tmp_path / tag
            rc = main([
                "train", "--train-data", str(data), "--val-data", str(data),
                "--out-dir", str(out), "--max-steps", "4", "--batch-size", "2",
            ])
            assert rc == 0
            return (out / "final.pckp").read_bytes()

        assert run("r1") == run("r2")
