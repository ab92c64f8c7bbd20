import json
import shutil
import subprocess
import sys

import pytest

from vcstar import cli, toy
from vcstar import io as vio


def run(capsys, *argv):
    code = cli.main(["--log-level", "ERROR", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def audio_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_audio")
    toy.make_toy_audio(root, n_speakers=2, n_utterances=3, seconds=1.0)
    return root


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"architecture": "tiny", "batch_size": 2, "crop_frames": 32,
                                "checkpoint_every": 5}))
    return path


def snapshot(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestExtract:
    def test_empty_dataset(self, capsys, tmp_path):
        (tmp_path / "data").mkdir()
        code, _, err = run(capsys, "extract", tmp_path / "data", "--cache", tmp_path / "cache")
        assert code == 2
        assert "no speakers found" in err

    def test_second_run_extracts_nothing(self, capsys, audio_dir, tmp_path):
        code, out, _ = run(capsys, "extract", audio_dir, "--cache", tmp_path / "cache")
        assert code == 0 and "extracted 6" in out
        code, out, _ = run(capsys, "extract", audio_dir, "--cache", tmp_path / "cache")
        assert code == 0 and out.splitlines() == ["speakers 2", "utterances 6", "extracted 0"]

    def test_corrupt_wav_named(self, capsys, audio_dir, tmp_path):
        data = tmp_path / "data"
        shutil.copytree(audio_dir, data)
        (data / "spk0" / "broken.wav").write_bytes(b"RIFF....junk")
        code, _, err = run(capsys, "extract", data, "--cache", tmp_path / "cache")
        assert code != 0
        assert "broken.wav" in err

    def test_missing_config(self, capsys, audio_dir, tmp_path):
        code, _, err = run(capsys, "extract", audio_dir, "--cache", tmp_path / "c", "--config", tmp_path / "x.json")
        assert code == 2 and "config not found" in err

    def test_bad_config(self, capsys, audio_dir, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
        code, _, _ = run(capsys, "extract", audio_dir, "--cache", tmp_path / "c", "--config", tmp_path / "bad.json")
        assert code == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory, audio_dir):
    tmp = tmp_path_factory.mktemp("cli_train")
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps({"architecture": "tiny", "batch_size": 2, "crop_frames": 32,
                               "checkpoint_every": 5}))
    before = snapshot(audio_dir)
    code = cli.main(["--log-level", "ERROR", "train", str(audio_dir), "--out", str(tmp / "run"),
                     "--config", str(cfg), "--iterations", "10", "--cache", str(tmp / "cache")])
    assert snapshot(audio_dir) == before
    return code, tmp


class TestWorkflow:
    def test_train(self, trained):
        code, tmp = trained
        assert code == 0
        names = sorted(p.name for p in (tmp / "run").glob("*.vcsk"))
        assert names == ["ckpt_0000000.vcsk", "ckpt_0000005.vcsk", "ckpt_0000010.vcsk"]
        assert json.loads((tmp / "run" / "config.json").read_text())["iterations"] == 10

    def test_convert_wav(self, capsys, trained, audio_dir, tmp_path):
        _, tmp = trained
        code, out, _ = run(capsys, "convert", audio_dir / "spk0" / "utt000.wav", "--checkpoint",
                           tmp / "run" / "ckpt_0000010.vcsk", "--target", "spk1", "--out", tmp_path / "o")
        assert code == 0
        assert out.splitlines() == [f"wrote {tmp_path / 'o'}.wav", f"wrote {tmp_path / 'o'}.mcc.fea1",
                                    f"wrote {tmp_path / 'o'}.f0.fea1"]
        assert vio.read_wav(tmp_path / "o.wav")[1] == 22050

    def test_convert_features_gain_reference(self, capsys, trained, tmp_path):
        _, tmp = trained
        code, _, _ = run(capsys, "convert", tmp / "cache" / "spk1" / "utt001.mcc.fea1", "--checkpoint",
                         tmp / "run" / "ckpt_0000010.vcsk", "--target", "spk0", "--source", "spk1",
                         "--mode", "gain-reference", "--out", tmp_path / "f")
        assert code == 0
        assert (tmp_path / "f.mcc.fea1").exists() and not (tmp_path / "f.wav").exists()

    def test_convert_unknown_target(self, capsys, trained, audio_dir):
        _, tmp = trained
        code, _, err = run(capsys, "convert", audio_dir / "spk0" / "utt000.wav", "--checkpoint",
                           tmp / "run" / "ckpt_0000010.vcsk", "--target", "zed")
        assert code == 2 and "unknown attribute" in err

    def test_convert_gain_reference_without_source(self, capsys, trained, audio_dir, tmp_path):
        _, tmp = trained
        code, _, _ = run(capsys, "convert", audio_dir / "spk0" / "utt000.wav", "--checkpoint",
                         tmp / "run" / "ckpt_0000010.vcsk", "--target", "spk1", "--mode", "gain-reference",
                         "--out", tmp_path / "g")
        assert code == 2

    def test_eval(self, capsys, trained, audio_dir, tmp_path):
        _, tmp = trained
        code, out, _ = run(capsys, "eval", audio_dir, "--checkpoint", tmp / "run" / "ckpt_0000010.vcsk",
                           "--out", tmp_path / "r.json")
        assert code == 0
        lines = out.splitlines()
        assert lines[0].startswith("real ")
        assert [ln.split()[1] for ln in lines[1:]] == ["spk0->spk1", "spk1->spk0"]
        assert len(json.loads((tmp_path / "r.json").read_text())["pairs"]) == 2

    def test_missing_checkpoint(self, capsys, audio_dir, tmp_path):
        code, _, _ = run(capsys, "eval", audio_dir, "--checkpoint", tmp_path / "none.vcsk")
        assert code == 1


def test_convert_without_target(capsys, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["convert", str(tmp_path / "x.wav"), "--checkpoint", str(tmp_path / "c.vcsk")])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_train_synthetic_smoke(capsys, tmp_path, tiny_cfg):
    code, out, _ = run(capsys, "selftest", "--make-toy", tmp_path / "toy")
    assert code == 0 and "speakers 4" in out
    code, out, _ = run(capsys, "train", tmp_path / "toy", "--out", tmp_path / "run", "--config", tiny_cfg,
                       "--iterations", "10", "--seed", "3")
    assert code == 0
    assert out.splitlines()[-1] == f"checkpoint {tmp_path / 'run' / 'ckpt_0000010.vcsk'}"


def test_make_toy_refuses_non_empty(capsys, tmp_path):
    (tmp_path / "f").write_text("x")
    code, _, _ = run(capsys, "selftest", "--make-toy", tmp_path)
    assert code == 2


def test_bad_thread_env(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("VCSTAR_THREADS", "zero")
    code, _, err = run(capsys, "selftest", "--make-toy", tmp_path / "t")
    assert code == 2 and "VCSTAR_THREADS" in err


def test_selftest_subprocess():
    proc = subprocess.run([sys.executable, "-m", "vcstar.cli", "selftest"], capture_output=True, text=True,
                          timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.splitlines()
    assert lines[0].startswith("suite gradient passed ")
    passed, total = lines[0].split()[-1].split("/")
    assert passed == total
    assert lines[1] == "suite loss passed 8/8"
