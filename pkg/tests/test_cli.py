"""End-to-end CLI behavior through real subprocesses: exit codes, determinism."""

import subprocess
import sys
from pathlib import Path

import pytest

PMAA = [sys.executable, "-m", "pmaa.cli"]


def run(*argv, cwd=None):
    return subprocess.run([*PMAA, *argv], capture_output=True, text=True, cwd=cwd)


def synth(out, count=2, size=32, seed=7, coverage=0.3):
    return run("synth", "--out", str(out), "--count", str(count), "--size", str(size),
               "--seed", str(seed), "--coverage", str(coverage))


TINY_TRAIN = ["--hidden-channels", "8", "--downsamples", "2", "--stages", "1",
              "--epochs", "1", "--batch", "2", "--seed", "3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    proc = synth(root)
    assert proc.returncode == 0, proc.stderr
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_ckpt") / "model.ckpt"
    proc = run("train", "--data", str(dataset), "--out", str(out), *TINY_TRAIN)
    assert proc.returncode == 0, proc.stderr
    return out


class TestSynth:
    def test_writes_samples_and_manifest(self, dataset):
        assert (dataset / "train.manifest").exists()
        assert len(list((dataset / "train").glob("*.pmat"))) == 8

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert synth(a).returncode == 0
        assert synth(b).returncode == 0
        for fa in sorted(a.rglob("*")):
            if fa.is_file():
                fb = b / fa.relative_to(a)
                assert fa.read_bytes() == fb.read_bytes()

    def test_bad_coverage_exits_2_naming_flag(self, tmp_path):
        proc = synth(tmp_path, coverage=1.5)
        assert proc.returncode == 2
        assert "--coverage" in proc.stderr

    def test_echoes_resolved_config(self, tmp_path):
        proc = synth(tmp_path / "echo")
        assert "# resolved configuration" in proc.stdout
        assert "seed\t7" in proc.stdout


class TestTrain:
    def test_checkpoint_and_log_exist(self, dataset, checkpoint):
        assert checkpoint.exists()
        log = checkpoint.with_suffix(".log")
        assert log.exists()
        assert len(log.read_text().strip().split("\n")) == 1  # one epoch

    def test_missing_data_exits_2(self, tmp_path):
        proc = run("train", "--data", str(tmp_path / "nowhere"),
                   "--out", str(tmp_path / "x.ckpt"), *TINY_TRAIN)
        assert proc.returncode == 2

    def test_zero_epochs_exits_2(self, dataset, tmp_path):
        proc = run("train", "--data", str(dataset), "--out", str(tmp_path / "x.ckpt"),
                   "--hidden-channels", "8", "--downsamples", "2", "--stages", "1",
                   "--epochs", "0")
        assert proc.returncode == 2

    def test_fixed_seed_reproduces_logs(self, dataset, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / f"{name}.ckpt"
            proc = run("train", "--data", str(dataset), "--out", str(out), *TINY_TRAIN)
            assert proc.returncode == 0, proc.stderr
            outs.append(out.with_suffix(".log").read_text())
        assert outs[0] == outs[1]


class TestEval:
    def test_idempotent_reports(self, dataset, checkpoint):
        a = run("eval", "--ckpt", str(checkpoint), "--data", str(dataset))
        b = run("eval", "--ckpt", str(checkpoint), "--data", str(dataset))
        assert a.returncode == 0, a.stderr
        assert a.stdout == b.stdout
        assert "mean.ssim\t" in a.stdout

    def test_corrupted_checkpoint_exits_1(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        proc = run("eval", "--ckpt", str(bad), "--data", str(dataset))
        assert proc.returncode == 1

    def test_missing_dataset_exits_2(self, checkpoint, tmp_path):
        proc = run("eval", "--ckpt", str(checkpoint), "--data", str(tmp_path / "empty"))
        assert proc.returncode == 2


class TestCount:
    def test_default_config_prints_reference_row(self):
        proc = run("count", "--hw", "64,64")
        assert proc.returncode == 0, proc.stderr
        assert "3.44 M" in proc.stdout and "91.94 G" in proc.stdout
        assert "params.total\t279934" in proc.stdout

    def test_macs_scale_quadratically_with_resolution(self):
        def total(hw):
            proc = run("count", "--hw", hw, "--hidden-channels", "8",
                       "--downsamples", "2", "--stages", "1")
            assert proc.returncode == 0
            for line in proc.stdout.splitlines():
                if line.startswith("macs.total\t"):
                    return int(line.split("\t")[1])
            raise AssertionError("no macs.total line")

        assert total("256,256") == 16 * total("64,64")

    def test_invalid_hw_exits_2(self):
        proc = run("count", "--hw", "100,100")
        assert proc.returncode == 2


class TestAblate:
    def test_two_row_grid(self, dataset, tmp_path):
        grid = tmp_path / "grid.txt"
        grid.write_text(
            "fusion=sum attention=off selective=off lim=off\n"
            "fusion=sum attention=nonpatch selective=on lim=on\n")
        proc = run("ablate", "--data", str(dataset), "--grid", str(grid),
                   "--hidden-channels", "8", "--downsamples", "2", "--stages", "1",
                   "--epochs", "1", "--batch", "2", "--seed", "5")
        assert proc.returncode == 0, proc.stderr
        rows = [l for l in proc.stdout.splitlines()
                if l and not l.startswith(("#", "command", "fusion"))
                and "\t" in l and len(l.split("\t")) == 8]
        assert len(rows) == 2
        # full row carries more parameters than the bare row
        bare, full = (int(r.split("\t")[6]) for r in rows)
        assert full > bare

    def test_bad_grid_token_exits_2(self, dataset, tmp_path):
        grid = tmp_path / "bad.txt"
        grid.write_text("fusion=sum bogus=1\n")
        proc = run("ablate", "--data", str(dataset), "--grid", str(grid))
        assert proc.returncode == 2


class TestUsage:
    def test_no_command_exits_2(self):
        assert run().returncode == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("bogus_key=1\n")
        proc = run("count", "--config", str(cfg), "--hw", "64,64")
        assert proc.returncode == 2
        assert "bogus_key" in proc.stderr

    def test_env_seed_fallback(self, tmp_path):
        import os
        import subprocess as sp
        env = dict(os.environ, PMAA_SEED="123")
        proc = sp.run([*PMAA, "synth", "--out", str(tmp_path / "env"), "--count", "1",
                       "--size", "16"], capture_output=True, text=True, env=env)
        assert proc.returncode == 0, proc.stderr
        assert "seed\t123" in proc.stdout
