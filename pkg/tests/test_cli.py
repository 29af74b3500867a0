"""CLI subcommands, config precedence, exit codes."""

import json

import numpy as np
import pytest

from latentdyn.cli import ConfigError, EXIT_CONFIG, EXIT_IO, EXIT_OK, main, parse_config
from latentdyn.data import read_dataset


TINY = {
    "scene.n_points": 96, "scene.length": 8, "scene.n_trajectories": 4,
    "train.k": 2, "train.epochs": 1, "train.batch_size": 4, "train.pairs_per_traj": 2,
    "train.feat_dim": 12, "train.tokens": 4, "train.group_size": 8,
    "train.action_dim": 5, "train.idm_hidden": 10, "train.cond_width": 8,
    "train.ffn_mult": 2, "train.diffusion_steps": 10, "train.seed": 6,
}


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


class TestParseConfig:
    def test_empty_file_gives_paper_defaults(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("")
        cfg = parse_config(path)
        assert cfg.train.k == 4
        assert cfg.train.lr == 1e-4
        assert cfg.train.action_dim == 16
        assert cfg.train.epochs == 300

    def test_no_file_gives_defaults(self):
        cfg = parse_config(None)
        assert cfg.scene.n_points == 512

    def test_file_overrides_defaults(self, tiny_config_path):
        cfg = parse_config(tiny_config_path)
        assert cfg.train.k == 2
        assert cfg.scene.n_points == 96

    def test_flag_overrides_file(self, tiny_config_path):
        cfg = parse_config(tiny_config_path, {"train.k": 16})
        assert cfg.train.k == 16

    def test_unknown_key_named_in_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"leanring_rate": 1e-4}))
        with pytest.raises(ConfigError, match="leanring_rate"):
            parse_config(path)

    def test_type_mismatch_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train.k": "four"}))
        with pytest.raises(ConfigError, match="train.k"):
            parse_config(path)

    def test_bool_strictness(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train.no_history": 1}))
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_invalid_values_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train.batch_size": 1}))
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.json")


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        for argv in (["gen-data", "--help"], ["pretrain", "--help"], ["probe", "--help"],
                     ["embed", "--help"], ["gradcheck", "--help"]):
            with pytest.raises(SystemExit) as exc:
                main(argv)
            assert exc.value.code == 0
            assert "usage" in capsys.readouterr().out

    def test_invalid_flag_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--not-a-flag"])
        assert exc.value.code != 0

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"leanring_rate": 1.0}))
        code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d.afro")])
        assert code == EXIT_CONFIG

    def test_missing_data_exit_4(self, tmp_path):
        code = main(["pretrain", "--data", str(tmp_path / "missing.afro"),
                     "--out", str(tmp_path / "run")])
        assert code == EXIT_IO


class TestPipeline:
    def test_full_pipeline(self, tiny_config_path, tmp_path, capsys):
        data = tmp_path / "tiny.afro"
        assert main(["gen-data", "--config", str(tiny_config_path), "--out", str(data),
                     "--seed", "9"]) == EXIT_OK
        trajs = read_dataset(data)
        assert len(trajs) == 4
        meta = json.loads((tmp_path / "tiny.afro.meta.json").read_text())
        assert meta["seed"] == 9
        assert meta["config"]["n_points"] == 96

        run = tmp_path / "run"
        assert main(["pretrain", "--data", str(data), "--config", str(tiny_config_path),
                     "--out", str(run)]) == EXIT_OK
        assert (run / "final.afck").exists()

        report = tmp_path / "report.json"
        assert main(["probe", "--ckpt", str(run / "final.afck"), "--data", str(data),
                     "--report", str(report)]) == EXIT_OK
        rep = json.loads(report.read_text())
        assert "r2" in rep and "min_std" in rep

        embed = tmp_path / "embed.csv"
        assert main(["embed", "--ckpt", str(run / "final.afck"), "--data", str(data),
                     "--out", str(embed)]) == EXIT_OK
        assert embed.read_text().startswith("index,x,y,traj_id,frame")

    def test_config_echoed_to_stdout(self, tiny_config_path, tmp_path, capsys):
        data = tmp_path / "t.afro"
        main(["gen-data", "--config", str(tiny_config_path), "--out", str(data)])
        echoed = json.loads(capsys.readouterr().out.splitlines()[0])
        assert echoed["scene.n_points"] == 96
        assert echoed["train.lr"] == 1e-4

    def test_ablation_flags_reach_config(self, tiny_config_path, tmp_path, capsys):
        data = tmp_path / "t.afro"
        main(["gen-data", "--config", str(tiny_config_path), "--out", str(data)])
        run = tmp_path / "ablate"
        code = main(["pretrain", "--data", str(data), "--config", str(tiny_config_path),
                     "--out", str(run), "--no-history", "--idm-input", "concat",
                     "--objective", "mse", "--interval", "3", "--d-act", "7"])
        assert code == EXIT_OK
        from latentdyn.trainer import load_checkpoint

        state = load_checkpoint(run / "final.afck")
        assert state.config.no_history is True
        assert state.config.idm_input == "concat"
        assert state.config.objective == "mse"
        assert state.config.k == 3
        assert state.config.action_dim == 7

    def test_checkpoint_config_reproduces_run(self, tiny_config_path, tmp_path, capsys):
        # feeding the echoed config back verbatim yields a bit-identical run
        data = tmp_path / "t.afro"
        main(["gen-data", "--config", str(tiny_config_path), "--out", str(data)])
        run1 = tmp_path / "r1"
        main(["pretrain", "--data", str(data), "--config", str(tiny_config_path),
              "--out", str(run1)])
        from latentdyn.trainer import load_checkpoint

        state = load_checkpoint(run1 / "final.afck")
        echo = tmp_path / "echo.json"
        echo.write_text(json.dumps({f"train.{k}": v
                                    for k, v in state.config.__dict__.items()}))
        run2 = tmp_path / "r2"
        main(["pretrain", "--data", str(data), "--config", str(echo), "--out", str(run2)])
        assert (run1 / "final.afck").read_bytes() == (run2 / "final.afck").read_bytes()

    def test_gen_data_skip_stride(self, tiny_config_path, tmp_path, capsys):
        data = tmp_path / "s.afro"
        assert main(["gen-data", "--config", str(tiny_config_path), "--out", str(data),
                     "--skip-frames", "2", "--stride", "2"]) == EXIT_OK
        trajs = read_dataset(data)
        assert all(t.length == 3 for t in trajs)  # frames 2, 4, 6 of 8

    def test_thread_env_validation(self, tiny_config_path, tmp_path, monkeypatch):
        monkeypatch.setenv("LATENT_DYN_THREADS", "zero")
        code = main(["gen-data", "--config", str(tiny_config_path),
                     "--out", str(tmp_path / "x.afro")])
        assert code == EXIT_CONFIG

    def test_thread_env_respected(self, tiny_config_path, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("LATENT_DYN_THREADS", "1")
        data = tmp_path / "single.afro"
        assert main(["gen-data", "--config", str(tiny_config_path), "--out",
                     str(data), "--seed", "9"]) == EXIT_OK
        # worker count must not change the generated bytes
        monkeypatch.setenv("LATENT_DYN_THREADS", "2")
        data2 = tmp_path / "double.afro"
        main(["gen-data", "--config", str(tiny_config_path), "--out", str(data2),
              "--seed", "9"])
        assert data.read_bytes() == data2.read_bytes()
