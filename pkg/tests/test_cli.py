import csv
import subprocess
import sys

import numpy as np
import pytest

from spoofmamba import cli, io
from spoofmamba.training import synthetic_dataset


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Four synthetic clips (two per class) written as 16 kHz WAV files plus a protocol."""
    root = tmp_path_factory.mktemp("corpus")
    waves, labels = synthetic_dataset(2, seed=3, length=20000)
    audio = root / "audio"
    audio.mkdir()
    lines = []
    for i, (w, y) in enumerate(zip(waves, labels)):
        utt = f"T_{i:03d}"
        io.write_wav(audio / f"{utt}.wav", w)
        lines.append(f"SPK {utt} - {'-' if y == 1 else 'A01'} {'bonafide' if y == 1 else 'spoof'}")
    (root / "proto.txt").write_text("\n".join(lines) + "\n")
    (root / "train.conf").write_text("variant = cross\nbatch_size = 4\nepochs = 1\n")
    return root


@pytest.fixture(scope="module")
def checkpoint(corpus):
    out = corpus / "model.ckpt"
    assert cli.main(["train", "--config", str(corpus / "train.conf"), "--protocol", str(corpus / "proto.txt"),
                     "--audio-dir", str(corpus / "audio"), "--out", str(out), "--seed", "2"]) == 0
    return out


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestTrainScoreEval:
    def test_train_writes_log(self, checkpoint):
        lines = (checkpoint.parent / "model.ckpt.log").read_text().splitlines()
        assert len(lines) == 1 and lines[0].split()[:2] == ["0", "1"]
        assert io.read_checkpoint(checkpoint).config.seed == 2

    def test_score_and_eval(self, corpus, checkpoint, capsys):
        scores = corpus / "scores.txt"
        code, out, _ = run(capsys, "score", "--ckpt", str(checkpoint), "--protocol", str(corpus / "proto.txt"),
                           "--audio-dir", str(corpus / "audio"), "--out", str(scores))
        assert code == 0 and "scored 4" in out
        assert [u for u, _ in io.read_scores(scores)] == [f"T_{i:03d}" for i in range(4)]
        code, out, _ = run(capsys, "eval", "--scores", str(scores), "--protocol", str(corpus / "proto.txt"))
        assert code == 0
        keys = [line.split()[0] for line in out.splitlines()]
        assert keys == ["EER", "EER_threshold", "minDCF", "minDCF_threshold"]

    def test_eval_separable_fixture(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text("s b1 - - bonafide\ns b2 - - bonafide\ns s1 - A01 spoof\ns s2 - A02 spoof\n")
        io.write_scores(tmp_path / "s.txt", [("b1", 0.9), ("b2", 0.8), ("s1", 0.1), ("s2", 0.2)])
        code, out, _ = run(capsys, "eval", "--scores", str(tmp_path / "s.txt"), "--protocol", str(tmp_path / "p.txt"),
                           "--det-csv", str(tmp_path / "det.csv"))
        assert code == 0
        assert out.splitlines()[0] == "EER 0.000000"
        assert "minDCF 0.000000" in out.splitlines()
        assert next(csv.reader(open(tmp_path / "det.csv"))) == ["threshold", "p_miss", "p_fa"]

    def test_eval_with_tandem_costs(self, tmp_path, capsys):
        from pathlib import Path
        cost = Path(__file__).resolve().parents[1] / "configs" / "cost_tdcf.conf"
        (tmp_path / "p.txt").write_text("s b1 - - bonafide\ns s1 - A01 spoof\n")
        io.write_scores(tmp_path / "s.txt", [("b1", 0.9), ("s1", 0.1)])
        code, out, _ = run(capsys, "eval", "--scores", str(tmp_path / "s.txt"), "--protocol",
                           str(tmp_path / "p.txt"), "--cost-config", str(cost))
        assert code == 0 and "min_tDCF 0.000000" in out

    def test_inspect(self, corpus, tmp_path, capsys):
        # inspect needs the attention map, which the cross checkpoint has enabled
        out_csv = tmp_path / "att.csv"
        code, _, _ = run(capsys, "inspect", "--ckpt", str(corpus / "model.ckpt"), "--wav",
                         str(corpus / "audio" / "T_000.wav"), "--dump-attmap", str(out_csv))
        assert code == 0
        rows = list(csv.DictReader(open(out_csv)))
        assert len(rows) == 23 * 29
        m_spec = np.array([float(r["m_spec"]) for r in rows]).reshape(23, 29)
        np.testing.assert_allclose(m_spec.sum(axis=1), 1.0, atol=1e-6)


class TestCensus:
    def test_default(self, capsys):
        code, out, _ = run(capsys, "paramcount")
        lines = dict(line.split() for line in out.splitlines())
        assert code == 0
        assert lines["total"] == "483827" and lines["mamba_blocks"] == "4"
        assert sum(int(v) for k, v in lines.items() if k not in ("total", "mamba_blocks")) == 483_827

    def test_ablation_config(self, capsys):
        from pathlib import Path
        conf = Path(__file__).resolve().parents[1] / "configs" / "ablation_no_spectral.conf"
        code, out, _ = run(capsys, "paramcount", "--config", str(conf))
        assert code == 0 and "total 349938" in out and "spectral" not in out.split()


class TestBench:
    @pytest.mark.parametrize("scan", ["ref", "chunked"])
    def test_report(self, capsys, scan):
        code, out, _ = run(capsys, "bench", "--scan", scan, "--len", "500", "--repeats", "1")
        assert code == 0 and f"scan={scan}" in out and "steps/s" in out


class TestExitCodes:
    def test_usage(self, capsys):
        assert run(capsys, "frobnicate")[0] == cli.EXIT_USAGE
        assert run(capsys, "bench", "--scan", "ref")[0] == cli.EXIT_USAGE

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--scores", str(tmp_path / "nope.txt"), "--protocol", str(tmp_path / "p"))
        assert code == cli.EXIT_IO and "nope.txt" in err

    def test_bad_checkpoint(self, tmp_path, capsys):
        (tmp_path / "x.ckpt").write_bytes(b"junk")
        (tmp_path / "p.txt").write_text("")
        code, _, _ = run(capsys, "score", "--ckpt", str(tmp_path / "x.ckpt"), "--protocol", str(tmp_path / "p.txt"),
                         "--audio-dir", str(tmp_path), "--out", str(tmp_path / "s.txt"))
        assert code == cli.EXIT_IO

    def test_single_class_scores(self, tmp_path, capsys):
        (tmp_path / "p.txt").write_text("s b1 - - bonafide\n")
        io.write_scores(tmp_path / "s.txt", [("b1", 0.9)])
        code, _, _ = run(capsys, "eval", "--scores", str(tmp_path / "s.txt"), "--protocol", str(tmp_path / "p.txt"))
        assert code == cli.EXIT_IO

    def test_gradcheck_failure_is_numeric(self, monkeypatch, capsys):
        import spoofmamba.gradsuite as gs
        monkeypatch.setattr(gs, "run_suite", lambda seed=0: False)
        assert run(capsys, "gradcheck")[0] == cli.EXIT_NUMERIC

    def test_console_script(self):
        out = subprocess.run([sys.executable, "-m", "spoofmamba.cli", "paramcount"], capture_output=True, text=True)
        assert out.returncode == 0 and "total 483827" in out.stdout
