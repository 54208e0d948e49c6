"""CLI tests: config parsing, subcommands, exit codes, output files."""

import subprocess
import sys

import numpy as np
import pytest

from nlroi.blobio import load_blob, save_blob, save_params
from nlroi.block import init_params, nlroi_forward
from nlroi.cli import main, parse_config
from nlroi.toytask import TrainConfig

TINY_CFG = """\
# reference-style config, shrunk to run in milliseconds
epochs = 2
scenes_per_epoch = 3
rois = 3
classes = 2
channels = 4  # one-hot classes plus the nonce channel plus noise
embed_channels = 2
nl_channels = 2
height = 2
width = 2
"""


@pytest.fixture
def workdir(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, 4, 2, 2))
    x = x.astype(np.float32)
    save_blob(x, tmp_path / "x.blob")
    save_params(init_params((4, 2, 2), seed=1, dtype=np.float32),
                tmp_path / "p.params")
    (tmp_path / "toy.cfg").write_text(TINY_CFG)
    return tmp_path


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("")
        assert parse_config(path) == TrainConfig()

    def test_defaults_include_momentum_and_weight_decay(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("")
        config = parse_config(path)
        assert config.momentum == 0.9
        assert config.weight_decay == 0.0001

    def test_explicit_momentum(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("momentum = 0.9\n")
        assert parse_config(path).momentum == 0.9

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# a comment\n\nepochs = 3  # inline\n")
        assert parse_config(path).epochs == 3

    def test_every_key_round_trips(self, tmp_path):
        config = TrainConfig(
            scenes_per_epoch=7, epochs=3, rois=5, classes=4, channels=8,
            embed_channels=3, nl_channels=2, height=2, width=3, noise=0.25,
            learning_rate=0.02, momentum=0.8, weight_decay=0.001, seed=12,
        )
        lines = []
        for field in ("scenes_per_epoch", "epochs", "rois", "classes",
                      "channels", "embed_channels", "nl_channels", "height",
                      "width", "noise", "learning_rate", "momentum",
                      "weight_decay", "seed"):
            lines.append(f"{field} = {getattr(config, field)}")
        path = tmp_path / "c.cfg"
        path.write_text("\n".join(lines) + "\n")
        assert parse_config(path) == config

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("bogus = 3\n")
        with pytest.raises(ValueError, match="unknown config key 'bogus'"):
            parse_config(path)

    def test_unparsable_int_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = soon\n")
        with pytest.raises(ValueError, match="epochs"):
            parse_config(path)

    def test_unparsable_float_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("noise = loud\n")
        with pytest.raises(ValueError, match="noise"):
            parse_config(path)

    def test_out_of_range_named(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = -1\n")
        with pytest.raises(ValueError, match="epochs"):
            parse_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = 1\nepochs = 2\n")
        with pytest.raises(ValueError, match="duplicate"):
            parse_config(path)

    def test_line_without_equals_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs\n")
        with pytest.raises(ValueError, match=":1:"):
            parse_config(path)


class TestForwardCommand:
    def test_writes_augmented_blob(self, workdir, capsys):
        out = workdir / "aug.blob"
        code = main(["forward", "--input", str(workdir / "x.blob"),
                     "--params", str(workdir / "p.params"),
                     "--out", str(out)])
        assert code == 0
        expected = nlroi_forward(
            load_blob(workdir / "x.blob"),
            init_params((4, 2, 2), seed=1, dtype=np.float32),
        ).augmented
        assert np.array_equal(load_blob(out), np.asarray(expected))

    def test_same_inputs_same_output_bytes(self, workdir):
        a, b = workdir / "a.blob", workdir / "b.blob"
        for out in (a, b):
            assert main(["forward", "--input", str(workdir / "x.blob"),
                         "--params", str(workdir / "p.params"),
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_emit_attention(self, workdir):
        out = workdir / "aug.blob"
        att_path = workdir / "att.blob"
        code = main(["forward", "--input", str(workdir / "x.blob"),
                     "--params", str(workdir / "p.params"),
                     "--out", str(out), "--emit-attention", str(att_path)])
        assert code == 0
        att = load_blob(att_path)
        assert att.shape == (3, 3)
        np.testing.assert_allclose(att.sum(axis=1), np.ones(3), atol=1e-6)

    def test_channel_mismatch_names_both_counts(self, workdir, capsys):
        bad = np.zeros((2, 5, 2, 2), dtype=np.float32)
        save_blob(bad, workdir / "bad.blob")
        out = workdir / "never.blob"
        code = main(["forward", "--input", str(workdir / "bad.blob"),
                     "--params", str(workdir / "p.params"),
                     "--out", str(out)])
        assert code == 1
        err = capsys.readouterr().err
        assert "5" in err and "4" in err and err.count("\n") == 1
        assert not out.exists()

    def test_missing_input_file(self, workdir, capsys):
        code = main(["forward", "--input", str(workdir / "nope.blob"),
                     "--params", str(workdir / "p.params"),
                     "--out", str(workdir / "o.blob")])
        assert code == 1
        assert "nope.blob" in capsys.readouterr().err

    def test_corrupt_blob(self, workdir, capsys):
        bad = workdir / "corrupt.blob"
        bad.write_bytes(b"XXXX" + bytes(20))
        code = main(["forward", "--input", str(bad),
                     "--params", str(workdir / "p.params"),
                     "--out", str(workdir / "o.blob")])
        assert code == 1
        assert "magic" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_spec_example_passes(self, capsys):
        code = main(["gradcheck", "--seed", "1", "--dims", "2,2,1,1,1,1"])
        assert code == 0
        out = capsys.readouterr().out
        for name in ("w_phi", "w_psi", "g1_w", "g1_b", "g2_w", "g2_b"):
            assert name in out
        assert "pass" in out

    def test_default_dims_pass(self, capsys):
        assert main(["gradcheck"]) == 0

    def test_unreachable_tolerance_fails(self, capsys):
        code = main(["gradcheck", "--dims", "2,2,1,1,1,1", "--tol", "1e-30"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_malformed_dims(self, capsys):
        code = main(["gradcheck", "--dims", "2,2"])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestTrainToyCommand:
    def test_happy_path_writes_metrics(self, workdir, capsys):
        metrics = workdir / "m.tsv"
        code = main(["train-toy", "--config", str(workdir / "toy.cfg"),
                     "--metrics-out", str(metrics)])
        assert code == 0
        out = capsys.readouterr().out
        assert "final accuracy" in out
        rows = metrics.read_text().splitlines()
        assert len(rows) == 2
        for i, row in enumerate(rows, start=1):
            epoch, loss, accuracy = row.split("\t")
            assert int(epoch) == i
            assert np.isfinite(float(loss)) and 0.0 <= float(accuracy) <= 1.0

    def test_baseline_flag(self, workdir):
        metrics = workdir / "mb.tsv"
        code = main(["train-toy", "--config", str(workdir / "toy.cfg"),
                     "--baseline", "--metrics-out", str(metrics)])
        assert code == 0
        assert len(metrics.read_text().splitlines()) == 2

    def test_metrics_bit_reproducible(self, workdir):
        a, b = workdir / "a.tsv", workdir / "b.tsv"
        for path in (a, b):
            assert main(["train-toy", "--config", str(workdir / "toy.cfg"),
                         "--metrics-out", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_divergence_exits_one_with_diagnostic(self, workdir, capsys):
        cfg = workdir / "explode.cfg"
        cfg.write_text(TINY_CFG + "learning_rate = 1e12\n")
        code = main(["train-toy", "--config", str(cfg),
                     "--metrics-out", str(workdir / "m.tsv")])
        assert code == 1
        assert "diverged" in capsys.readouterr().err

    def test_malformed_config_exits_one(self, workdir, capsys):
        cfg = workdir / "bad.cfg"
        cfg.write_text("rois = none\n")
        code = main(["train-toy", "--config", str(cfg),
                     "--metrics-out", str(workdir / "m.tsv")])
        assert code == 1
        assert "rois" in capsys.readouterr().err


class TestBenchCommand:
    def test_degenerate_n_list_single_line(self, capsys):
        code = main(["bench", "--n-list", "1", "--dims", "2,4,2,2,2",
                     "--reps", "2"])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "n\tseconds\tflops"
        assert len(lines) == 2
        n, seconds, flops = lines[1].split("\t")
        assert n == "1" and float(seconds) > 0 and int(flops) == 32

    def test_descending_n_list_rejected(self, capsys):
        code = main(["bench", "--n-list", "4,2", "--dims", "2,4,2,2,2"])
        assert code == 1
        assert "ascending" in capsys.readouterr().err

    def test_malformed_n_list(self, capsys):
        code = main(["bench", "--n-list", "1,two"])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestSelftestCommand:
    def test_exit_zero_and_ok_lines(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("ok ") >= 10

    def test_internal_error_exits_two(self, monkeypatch, capsys):
        import nlroi.cli as cli_module

        def boom(full=False):
            raise RuntimeError("wires crossed")

        monkeypatch.setattr(cli_module, "run_selftest", boom)
        assert main(["selftest"]) == 2
        assert "internal error" in capsys.readouterr().err


class TestUsage:
    def test_no_subcommand_is_usage_error(self, capsys):
        assert main([]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_unknown_flag(self, capsys):
        assert main(["selftest", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "selftest" in capsys.readouterr().out

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "nlroi.cli", "gradcheck",
             "--dims", "2,2,1,1,1,1"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "pass" in proc.stdout
