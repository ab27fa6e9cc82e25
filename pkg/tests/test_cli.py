import pytest

from stgrad.cli import main
from stgrad.config import (
    RunConfig,
    load_preset,
    load_run_config,
    parse_config_text,
    preset_names,
)
from stgrad.data import read_metrics
from stgrad.errors import ConfigError


def run(argv):
    return main(argv)


SMALL = [
    "--synth", "--synth-n", "60", "--n", "4", "--l", "2", "--epochs", "2",
    "--batch", "20", "--lr", "0.002",
]


class TestConfigFiles:
    def test_parse_round_trip(self):
        cfg = RunConfig(estimator="reinmax_cv", tau=0.7, eta=1.5, seed=9, synth=True)
        parsed = parse_config_text(cfg.to_text())
        cfg2 = RunConfig(**parsed)
        assert cfg2 == cfg

    def test_comments_and_blanks(self):
        text = "# top comment\n\nestimator = st  # trailing\n tau = 1.3 \n"
        parsed = parse_config_text(text)
        assert parsed == {"estimator": "st", "tau": 1.3}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("nonsense = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs = soon\n")

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("STGRAD_SEED", "777")
        cfg = load_run_config(None, overrides={"synth": True})
        assert cfg.seed == 777

    def test_cli_flag_beats_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("STGRAD_SEED", "777")
        cfg = load_run_config(None, overrides={"seed": 5, "synth": True})
        assert cfg.seed == 5

    def test_validation_domains(self):
        with pytest.raises(ConfigError):
            RunConfig(lr=-1.0).validate()
        with pytest.raises(ConfigError):
            RunConfig(tau=0.0).validate()
        with pytest.raises(ConfigError):
            RunConfig(k=0).validate()
        with pytest.raises(ConfigError):
            RunConfig(enc_hidden="a,b").validate()


class TestPresets:
    def test_all_presets_load_and_validate(self):
        names = preset_names()
        assert {"reinmax-8x4", "reinmax-cv-8x4", "st-8x4"} <= set(names)
        for name in names:
            values = parse_config_text(load_preset(name))
            cfg = RunConfig(**values)
            cfg.synth = True
            cfg.validate()

    def test_reinmax_preset_hyperparameters(self):
        values = parse_config_text(load_preset("reinmax-8x4"))
        assert values["optimizer"] == "adam"
        assert values["lr"] == 0.0005
        assert values["tau"] == 1.3
        assert values["n"] == 8 and values["l"] == 4

    def test_cv_preset_hyperparameters(self):
        values = parse_config_text(load_preset("reinmax-cv-8x4"))
        assert values["optimizer"] == "adam"
        assert values["lr"] == 0.0005
        assert values["tau"] == 1.0
        assert values["eta"] == 1.5

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            load_preset("nope-99x99")


class TestTrainCommand:
    def test_writes_run_dir(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert run(["train", *SMALL, "--seed", "3", "--out", str(out)]) == 0
        assert (out / "config.cfg").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "ckpt-epoch-0000.bin").exists()
        assert (out / "ckpt-epoch-0002.bin").exists()
        # echoed config is re-loadable and matches the effective values
        cfg = load_run_config(out / "config.cfg")
        assert cfg.seed == 3 and cfg.epochs == 2 and cfg.synth

    def test_invalid_config_exit_2(self, tmp_path, capsys):
        assert run(["train", *SMALL, "--lr", "-4", "--out", str(tmp_path / "x")]) == 2

    def test_missing_data_exit_3(self, tmp_path):
        code = run([
            "train", "--train-images", str(tmp_path / "absent.idx"),
            "--epochs", "1", "--out", str(tmp_path / "y"),
        ])
        assert code == 3

    def test_no_out_dir_exit_2(self):
        assert run(["train", *SMALL]) == 2

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["train", *SMALL, "--seed", "11", "--out", str(out)]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "ckpt-epoch-0002.bin").read_bytes() == (b / "ckpt-epoch-0002.bin").read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = tmp_path / "full"
        assert run(["train", *SMALL, "--epochs", "4", "--seed", "2", "--out", str(full)]) == 0
        part = tmp_path / "part"
        assert run(["train", *SMALL, "--epochs", "2", "--seed", "2", "--out", str(part),
                    "--checkpoint-every", "2"]) == 0
        assert run(["train", *SMALL, "--epochs", "4", "--seed", "2", "--out", str(part),
                    "--resume", str(part / "ckpt-epoch-0002.bin")]) == 0
        assert (full / "ckpt-epoch-0004.bin").read_bytes() == (
            part / "ckpt-epoch-0004.bin"
        ).read_bytes()


class TestEvalCommand:
    def test_eval_line(self, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", *SMALL, "--seed", "4", "--out", str(out)])
        capsys.readouterr()
        code = run(["eval", "--checkpoint", str(out / "ckpt-epoch-0002.bin"),
                    "--config", str(out / "config.cfg"), "--split", "train"])
        assert code == 0
        line = capsys.readouterr().out
        assert "neg_elbo=" in line and "split=train" in line

    def test_missing_checkpoint_exit_3(self, tmp_path):
        assert run(["eval", "--checkpoint", str(tmp_path / "no.bin"), "--synth"]) == 3

    def test_deterministic(self, tmp_path, capsys):
        out = tmp_path / "run"
        run(["train", *SMALL, "--seed", "4", "--out", str(out)])
        capsys.readouterr()
        run(["eval", "--checkpoint", str(out / "ckpt-epoch-0002.bin"),
             "--config", str(out / "config.cfg"), "--split", "test", "--seed", "3"])
        first = capsys.readouterr().out
        run(["eval", "--checkpoint", str(out / "ckpt-epoch-0002.bin"),
             "--config", str(out / "config.cfg"), "--split", "test", "--seed", "3"])
        assert capsys.readouterr().out == first


class TestAnalyzeCommand:
    def test_exact_rows_and_determinism(self, tmp_path):
        out = tmp_path / "run"
        run(["train", *SMALL, "--seed", "5", "--out", str(out)])
        csv1 = tmp_path / "a.csv"
        code = run(["analyze", "--run", str(out), "--estimators", "exact,st",
                    "--m", "8", "--batch-size", "10", "--out", str(csv1)])
        assert code == 0
        rows = read_metrics(csv1)
        assert len(rows) == 4  # 2 checkpoints x 2 estimators
        for row in rows:
            if row["estimator"] == "exact":
                assert float(row["bias_cosine"]) == 1.0
                assert float(row["sample_var"]) == 0.0
        csv2 = tmp_path / "b.csv"
        run(["analyze", "--run", str(out), "--estimators", "exact,st",
             "--m", "8", "--batch-size", "10", "--out", str(csv2)])
        assert csv1.read_bytes() == csv2.read_bytes()

    def test_default_m_is_1024(self):
        from stgrad.cli import build_parser

        args = build_parser().parse_args(["analyze", "--run", "x"])
        assert args.m == 1024

    def test_bad_run_dir_exit_3(self, tmp_path):
        assert run(["analyze", "--run", str(tmp_path / "ghost")]) == 3


class TestSweepBetaCommand:
    def test_grid_parsing_and_rows(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        code = run([
            "sweep-beta", *SMALL, "--epochs", "1", "--grid", "0.4,0.6",
            "--seeds", "0", "--out-csv", str(tmp_path / "s.csv"),
        ])
        assert code == 0
        rows = read_metrics(tmp_path / "s.csv")
        betas = sorted({row["beta"] for row in rows})
        assert betas == ["0.4", "0.6"]

    def test_default_grid_has_29_points(self):
        from stgrad.cli import _parse_grid

        grid = _parse_grid("-0.2:1.2:0.05")
        assert len(grid) == 29
        assert grid[0] == pytest.approx(-0.2) and grid[-1] == pytest.approx(1.2)
        assert any(abs(b - 0.5) < 1e-12 for b in grid)

    def test_bad_grid_exit_2(self, tmp_path):
        assert run(["sweep-beta", *SMALL, "--grid", "1:2", "--seeds", "0"]) == 2


class TestVerifyCommand:
    def test_pass(self, capsys):
        assert run(["verify", "--trials", "3"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "max residual" in out

    def test_mutation_fails(self, capsys):
        assert run(["verify", "--trials", "2", "--mutation"]) == 1
        assert "FAIL" in capsys.readouterr().out
