"""End-to-end command-line contracts: exit codes, artifacts, determinism."""

import csv

import numpy as np
import pytest

from anchorkit.assignnet import Layer, AssignmentNetwork, save_checkpoint
from anchorkit.cli import main
from anchorkit.core import load_array, load_tokens
from anchorkit.attention import flop_count


def run_cli(*args):
    return main(list(args))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestGen:
    def test_mixture_writes_two_files_deterministically(self, tmp_path):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        args = ["gen", "--mixture", "--clusters", "8", "--seed", "1"]
        assert run_cli(*args, "--out", str(out1)) == 0
        assert run_cli(*args, "--out", str(out2)) == 0
        assert (out1.with_suffix(".vlt")).read_bytes() == (out2.with_suffix(".vlt")).read_bytes()
        assert (tmp_path / "a_labels.csv").read_text() == (tmp_path / "b_labels.csv").read_text()

    def test_invalid_cluster_count_exits_2(self, tmp_path):
        code = run_cli("gen", "--mixture", "--clusters", "0", "--out", str(tmp_path / "x"))
        assert code == 2

    def test_drift_video_written(self, tmp_path):
        out = tmp_path / "vid"
        assert run_cli("gen", "--drift", "--frames", "3", "--height", "8", "--width", "8",
                       "--objects", "2", "--out", str(out), "--seed", "3") == 0
        arr = load_array(out.with_suffix(".vlt"))
        assert arr.shape == (3, 8, 8, 8)  # frames, channels, height, width

    def test_requires_exactly_one_generator(self, tmp_path):
        assert run_cli("gen", "--out", str(tmp_path / "x")) == 2
        assert run_cli("gen", "--mixture", "--drift", "--out", str(tmp_path / "x")) == 2


@pytest.fixture()
def tokens_file(tmp_path):
    out = tmp_path / "tokens"
    assert run_cli(
        "gen", "--mixture", "--clusters", "4", "--dim", "6", "--points", "16",
        "--noise-sigma", "0.05", "--seed", "5", "--out", str(out),
    ) == 0
    return out.with_suffix(".vlt")


class TestTrain:
    def test_one_step_checkpoint_step_count(self, tmp_path, tokens_file):
        ckpt = tmp_path / "net.ckpt"
        assert run_cli(
            "train", "--input", str(tokens_file), "--steps", "1", "--anchors", "4",
            "--hidden", "8", "--checkpoint", str(ckpt), "--seed", "0",
        ) == 0
        from anchorkit.assignnet import load_checkpoint

        _, steps = load_checkpoint(ckpt)
        assert steps == 1

    def test_prior_none_equals_lambda_zero(self, tmp_path, tokens_file):
        rep_a = tmp_path / "a.csv"
        rep_b = tmp_path / "b.csv"
        base = ["train", "--input", str(tokens_file), "--steps", "6", "--log-every", "2",
                "--anchors", "4", "--hidden", "8", "--seed", "2"]
        assert run_cli(*base, "--prior", "none", "--report", str(rep_a)) == 0
        assert run_cli(*base, "--lambda-vi", "0", "--report", str(rep_b)) == 0
        assert rep_a.read_text() == rep_b.read_text()

    @pytest.mark.parametrize("steps,log_every", [(10, 3), (8, 4), (5, 50)])
    def test_report_row_count(self, tmp_path, tokens_file, steps, log_every):
        rep = tmp_path / "r.csv"
        assert run_cli(
            "train", "--input", str(tokens_file), "--steps", str(steps),
            "--log-every", str(log_every), "--anchors", "4", "--hidden", "8",
            "--report", str(rep), "--seed", "1",
        ) == 0
        rows = read_csv(rep)
        assert rows[0] == ["step", "total", "contrastive", "regularizer", "entropy"]
        assert len(rows) - 1 == -(-steps // log_every)

    def test_missing_input_exits_2(self, tmp_path):
        assert run_cli("train", "--input", str(tmp_path / "nope.vlt"), "--steps", "1") == 2
        assert run_cli("train", "--steps", "1") == 2

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_numerical_failure_exits_3(self, tmp_path, tokens_file, capsys):
        code = run_cli(
            "train", "--input", str(tokens_file), "--steps", "10", "--anchors", "4",
            "--hidden", "8", "--lr", "1e308", "--seed", "0",
        )
        assert code == 3
        err = capsys.readouterr().err
        assert "step" in err

    def test_determinism_byte_identical_artifacts(self, tmp_path, tokens_file):
        outs = []
        for name in ("one", "two"):
            ckpt = tmp_path / f"{name}.ckpt"
            rep = tmp_path / f"{name}.csv"
            assert run_cli(
                "train", "--input", str(tokens_file), "--steps", "5", "--anchors", "4",
                "--hidden", "8", "--checkpoint", str(ckpt), "--report", str(rep),
                "--seed", "42",
            ) == 0
            outs.append((ckpt.read_bytes(), rep.read_text()))
        assert outs[0] == outs[1]

    def test_resume_accumulates_step_count(self, tmp_path, tokens_file):
        first = tmp_path / "first.ckpt"
        second = tmp_path / "second.ckpt"
        base = ["train", "--input", str(tokens_file), "--anchors", "4", "--hidden", "8"]
        assert run_cli(*base, "--steps", "3", "--checkpoint", str(first), "--seed", "0") == 0
        assert run_cli(*base, "--steps", "2", "--resume", str(first),
                       "--checkpoint", str(second), "--seed", "0") == 0
        from anchorkit.assignnet import load_checkpoint

        _, steps = load_checkpoint(second)
        assert steps == 5


class TestCompress:
    def test_near_one_hot_identity_checkpoint(self, tmp_path, capsys):
        """A diagonal single-layer checkpoint on basis tokens forces
        near-one-hot columns; quantization error collapses to ~0."""
        m = 6
        tokens = 4.0 * np.eye(m)
        from anchorkit.core import TokenMatrix, save_tokens

        tok_path = tmp_path / "toy.vlt"
        save_tokens(tok_path, TokenMatrix(tokens))
        net = AssignmentNetwork((Layer(8.0 * np.eye(m), np.zeros(m)),))
        ckpt = tmp_path / "toy.ckpt"
        save_checkpoint(ckpt, net, 0)
        out_r = tmp_path / "r.vlt"
        out_c = tmp_path / "c.vlt"
        assert run_cli(
            "compress", "--input", str(tok_path), "--checkpoint", str(ckpt),
            "--out-r", str(out_r), "--out-c", str(out_c), "--seed", "0",
        ) == 0
        metrics = capsys.readouterr().out.splitlines()[-1]
        fields = dict(part.split("=") for part in metrics.split())
        assert float(fields["quantization_error"]) < 1e-6
        assert 0.0 <= float(fields["entropy"]) <= np.log(m) + 1e-12
        anchors = load_array(out_c)
        assert anchors.shape == (m, m)
        assignments = load_array(out_r)
        np.testing.assert_allclose(assignments.sum(axis=0), 1.0, atol=1e-6)

    def test_dim_mismatch_exits_2(self, tmp_path, tokens_file):
        net = AssignmentNetwork((Layer(np.eye(3), np.zeros(3)),))
        ckpt = tmp_path / "bad.ckpt"
        save_checkpoint(ckpt, net, 0)
        assert run_cli("compress", "--input", str(tokens_file),
                       "--checkpoint", str(ckpt)) == 2

    def test_repeat_is_byte_identical(self, tmp_path, tokens_file):
        ckpt = tmp_path / "net.ckpt"
        run_cli("train", "--input", str(tokens_file), "--steps", "2", "--anchors", "4",
                "--hidden", "8", "--checkpoint", str(ckpt), "--seed", "0")
        blobs = []
        for name in ("p", "q"):
            out_r = tmp_path / f"{name}_r.vlt"
            out_c = tmp_path / f"{name}_c.vlt"
            assert run_cli("compress", "--input", str(tokens_file),
                           "--checkpoint", str(ckpt), "--out-r", str(out_r),
                           "--out-c", str(out_c), "--seed", "0") == 0
            blobs.append((out_r.read_bytes(), out_c.read_bytes()))
        assert blobs[0] == blobs[1]


class TestBench:
    def test_csv_rows_and_flop_column(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert run_cli(
            "bench", "--m-values", "64,128", "--anchors", "16", "--channels", "8",
            "--proj-dim", "8", "--repeats", "1", "--out", str(out), "--seed", "0",
        ) == 0
        rows = read_csv(out)
        assert rows[0] == ["mode", "M", "A", "c", "d", "wall_ns", "flops"]
        body = rows[1:]
        assert len(body) == 4  # 2 sizes x 2 modes
        for mode, m, a, c, d, wall_ns, flops in body:
            assert int(flops) == flop_count(int(m), int(a), int(c), int(d), mode)
            assert int(wall_ns) > 0


class TestDdim:
    def test_zero_predictor_error_tiny(self, capsys):
        assert run_cli("ddim", "--predictor", "zero", "--steps", "50", "--seed", "0") == 0
        line = capsys.readouterr().out.splitlines()[-1]
        error = float(line.split("max_abs_error=")[1])
        assert error <= 1e-10

    def test_time_only_predictor_error_small(self, capsys):
        assert run_cli("ddim", "--predictor", "tonly", "--steps", "50", "--seed", "1") == 0
        line = capsys.readouterr().out.splitlines()[-1]
        assert float(line.split("max_abs_error=")[1]) <= 1e-8

    def test_single_step(self, capsys):
        assert run_cli("ddim", "--predictor", "zero", "--steps", "1", "--seed", "0") == 0
        assert "steps=1" in capsys.readouterr().out

    def test_dump_writes_trajectory(self, tmp_path):
        dump = tmp_path / "traj"
        assert run_cli("ddim", "--predictor", "zero", "--steps", "3",
                       "--dump", str(dump), "--seed", "0") == 0
        assert (dump / "manifest.txt").exists()
        assert len(list(dump.glob("state_*.vlt"))) == 4


class TestAttend:
    def test_full_mode_writes_output(self, tmp_path, tokens_file):
        out = tmp_path / "attn.vlt"
        assert run_cli("attend", "--input", str(tokens_file), "--mode", "full",
                       "--proj-dim", "5", "--out", str(out), "--seed", "0") == 0
        tokens = load_tokens(tokens_file)
        result = load_array(out)
        assert result.shape == (tokens.num_tokens, 5)

    def test_anchor_mode_needs_anchor_file(self, tokens_file):
        assert run_cli("attend", "--input", str(tokens_file), "--mode", "anchor") == 2

    def test_anchor_mode_runs(self, tmp_path, tokens_file):
        from anchorkit.core import save_array as save

        anchors = tmp_path / "anchors.vlt"
        save(anchors, np.ones((3, 6)))
        out = tmp_path / "attn.vlt"
        assert run_cli("attend", "--input", str(tokens_file), "--mode", "anchor",
                       "--anchors-file", str(anchors), "--proj-dim", "4",
                       "--out", str(out), "--seed", "0") == 0
        assert load_array(out).shape[1] == 4


class TestConfigFile:
    def test_unknown_key_rejected(self, tmp_path, tokens_file):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus_key = 1\n", encoding="utf-8")
        assert run_cli("train", "--config", str(cfg), "--input", str(tokens_file)) == 2

    def test_file_values_apply_and_flags_override(self, tmp_path, tokens_file, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "steps = 4\nanchors = 4\nhidden = 8\nlog_every = 2\nseed = 9\n",
            encoding="utf-8",
        )
        rep = tmp_path / "rep.csv"
        assert run_cli("train", "--config", str(cfg), "--input", str(tokens_file),
                       "--steps", "2", "--report", str(rep)) == 0
        err = capsys.readouterr().err
        assert "config train.steps = 2" in err  # flag wins
        assert "config train.anchors = 4" in err  # file applies
        rows = read_csv(rep)
        assert len(rows) - 1 == 1  # ceil(2/2)

    def test_resolved_config_echoed(self, tmp_path, capsys):
        assert run_cli("ddim", "--steps", "2", "--seed", "3") == 0
        err = capsys.readouterr().err
        assert "config ddim.steps = 2" in err
        assert "config ddim.seed = 3" in err


class TestSeedEnvFallback:
    def test_env_seed_used_when_flag_absent(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("ANCHOR_SEED", "77")
        assert run_cli("ddim", "--steps", "2") == 0
        assert "config ddim.seed = 77" in capsys.readouterr().err

    def test_flag_beats_env(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("ANCHOR_SEED", "77")
        assert run_cli("ddim", "--steps", "2", "--seed", "5") == 0
        assert "config ddim.seed = 5" in capsys.readouterr().err


class TestUsage:
    def test_unknown_subcommand_exits_2(self, capsys):
        assert run_cli("explode") == 2
        capsys.readouterr()

    def test_unknown_flag_exits_2(self, capsys):
        assert run_cli("ddim", "--warp-speed", "9") == 2
        capsys.readouterr()
