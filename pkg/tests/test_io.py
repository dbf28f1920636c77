import hashlib
import json
import struct
import wave

import numpy as np
import pytest

from spoofmamba import io
from spoofmamba.evalmetrics import CostModel
from spoofmamba.model import ModelConfig, ScoreRecord, SpoofMamba
from spoofmamba.numerics import no_grad
from spoofmamba.training import Adam


def raw_wav(path, frames: bytes, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


class TestWav:
    def test_scaling(self, tmp_path):
        pcm = np.array([0, 16384, -32768, 32767], dtype="<i2")
        raw_wav(tmp_path / "a.wav", pcm.tobytes())
        np.testing.assert_array_equal(io.read_wav(tmp_path / "a.wav"), [0.0, 0.5, -1.0, 32767 / 32768])

    def test_repeat_pad(self, tmp_path):
        raw = np.arange(32000) % 2000 - 1000
        raw_wav(tmp_path / "short.wav", raw.astype("<i2").tobytes())
        clip = io.load_wav(tmp_path / "short.wav")
        assert clip.shape == (1, 64600)
        np.testing.assert_array_equal(clip[0], raw[np.arange(64600) % 32000] / 32768)

    def test_long_eval_crop(self, tmp_path):
        raw = (np.arange(100000) % 3000).astype("<i2")
        raw_wav(tmp_path / "long.wav", raw.tobytes())
        np.testing.assert_array_equal(io.load_wav(tmp_path / "long.wav")[0], raw[:64600] / 32768)

    def test_write_read_round_trip(self, tmp_path, rng):
        x = np.round(rng.uniform(-0.9, 0.9, 500) * 32768) / 32768
        io.write_wav(tmp_path / "rt.wav", x)
        np.testing.assert_array_equal(io.read_wav(tmp_path / "rt.wav"), x.astype(np.float32))

    def test_sample_rate(self, tmp_path):
        raw_wav(tmp_path / "8k.wav", b"\0\0" * 10, rate=8000)
        with pytest.raises(io.SampleRateMismatch, match="8000"):
            io.read_wav(tmp_path / "8k.wav")

    def test_channels(self, tmp_path):
        raw_wav(tmp_path / "st.wav", b"\0\0" * 20, channels=2)
        with pytest.raises(io.ChannelMismatch):
            io.read_wav(tmp_path / "st.wav")

    def test_bit_depth(self, tmp_path):
        raw_wav(tmp_path / "u8.wav", b"\x80" * 10, width=1)
        with pytest.raises(io.EncodingMismatch, match="8-bit"):
            io.read_wav(tmp_path / "u8.wav")

    def test_not_riff(self, tmp_path):
        (tmp_path / "x.wav").write_bytes(b"fLaC" + b"\0" * 40)
        with pytest.raises(io.EncodingMismatch):
            io.read_wav(tmp_path / "x.wav")

    def test_errors_are_value_errors(self):
        assert issubclass(io.SampleRateMismatch, io.AudioFormatError)
        assert issubclass(io.AudioFormatError, ValueError)


class TestProtocol:
    def test_entries(self, tmp_path):
        p = tmp_path / "proto.txt"
        p.write_text("LA_0001 LA_T_100 - A01 spoof\nLA_0002 LA_T_200 - - BONAFIDE extra cols\n\n")
        a, b = io.parse_protocol(p)
        assert a == io.ProtocolEntry("LA_0001", "LA_T_100", "A01", "spoof")
        assert b.key == "bonafide" and b.attack_id == "-"

    def test_short_line(self, tmp_path):
        p = tmp_path / "proto.txt"
        p.write_text("LA_0001 LA_T_100 - A01 spoof\nLA_0001 LA_T_101 spoof\n")
        with pytest.raises(io.ProtocolError, match=":2:"):
            io.parse_protocol(p)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "proto.txt"
        p.write_text("s u - A01 fake\n")
        with pytest.raises(io.ProtocolError, match="fake"):
            io.parse_protocol(p)

    def test_duplicate(self, tmp_path):
        p = tmp_path / "proto.txt"
        p.write_text("s u - A01 spoof\ns u - - bonafide\n")
        with pytest.raises(io.ProtocolError, match="duplicate"):
            io.parse_protocol(p)


class TestScores:
    def test_single_round_trip(self, tmp_path):
        io.write_scores(tmp_path / "s.txt", [ScoreRecord("u1", "spoof", -1.25)])
        assert io.read_scores(tmp_path / "s.txt") == [("u1", -1.25)]
        assert (tmp_path / "s.txt").read_text() == "u1 -1.250000\n"

    def test_many_round_trip(self, tmp_path, rng):
        values = rng.normal(0, 10, 10_000)
        io.write_scores(tmp_path / "s.txt", [(f"u{i}", v) for i, v in enumerate(values)])
        back = io.read_scores(tmp_path / "s.txt")
        assert [u for u, _ in back] == [f"u{i}" for i in range(10_000)]
        np.testing.assert_array_equal([v for _, v in back], np.round(values, 6))

    def test_empty(self, tmp_path):
        (tmp_path / "s.txt").write_text("")
        assert io.read_scores(tmp_path / "s.txt") == []

    def test_malformed(self, tmp_path):
        (tmp_path / "s.txt").write_text("u1 0.5 extra\n")
        with pytest.raises(ValueError):
            io.read_scores(tmp_path / "s.txt")

    def test_join(self):
        proto = [io.ProtocolEntry("s", "a", "-", "bonafide")]
        recs = io.join_scores([("a", 1.0), ("b", 2.0)], proto)
        assert [r.label for r in recs] == ["bonafide", "unknown"]


class TestConfig:
    def test_parse(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("# comment\nvariant = flip  # trailing\nenable_mca = false\ntime_pools = 360, 2, 1, 1\n"
                     "lr = 0.0005\nepochs = 3\n")
        cfg = io.load_model_config(p)
        assert cfg.variant == "flip" and cfg.enable_mca is False and cfg.time_pools == (360, 2, 1, 1)
        assert io.load_train_settings(p) == {"lr": 0.0005, "epochs": 3}

    def test_duplicate_key(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("variant = bi\nvariant = flip\n")
        with pytest.raises(ValueError, match="duplicate"):
            io.read_config(p)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.conf"
        p.write_text("variant = bi\nmomentum = 0.9\n")
        with pytest.raises(ValueError, match="momentum"):
            io.load_train_settings(p)

    def test_write_round_trip(self, tmp_path):
        cfg = ModelConfig(variant="inbi", enable_2d_attm=False, seed=9)
        io.write_config(tmp_path / "c.conf", cfg)
        assert io.load_model_config(tmp_path / "c.conf") == cfg

    def test_cost_model(self, tmp_path):
        p = tmp_path / "cost.conf"
        p.write_text("p_spoof = 0.05\nc_fa = 10\np_miss_asv = 0.02\np_fa_asv = 0.02\np_fa_spoof_asv = 0.4\n")
        cost = io.load_cost_model(p)
        assert cost.has_asv_rates and cost.c_fa == 10.0

    def test_shipped_configs(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        variants = {io.load_model_config(root / f"{v}.conf").variant for v in ("bi", "cross", "flip", "inbi")}
        assert variants == {"bi", "cross", "flip", "inbi"}
        for name in ("no_2d_attm", "no_mca", "no_spectral", "no_temporal"):
            assert io.load_model_config(root / f"ablation_{name}.conf") == ModelConfig().with_ablation(name)
        assert io.load_cost_model(root / "cost_tdcf.conf").has_asv_rates


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    model = SpoofMamba(ModelConfig(variant="inbi", seed=4))
    opt = Adam(model.named_parameters())
    for p in model.parameters():
        p.grad = np.full_like(p.data, 0.01)
    opt.step()
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    io.save_checkpoint(path, model, opt, epoch=3)
    return model, opt, path


class TestCheckpoint:
    def test_arrays_bit_exact(self, trained):
        model, opt, path = trained
        loaded, loaded_opt = io.load_checkpoint(path)
        assert loaded.cfg == model.cfg
        for (k, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert a.tobytes() == b.tobytes(), k
        for k, a in opt.state_arrays().items():
            assert a.tobytes() == loaded_opt.state_arrays()[k].tobytes(), k
        assert loaded_opt.state.step == 1
        assert io.read_checkpoint(path).epoch == 3

    def test_forward_bit_exact(self, trained, clip_pair):
        model, _, path = trained
        loaded, _ = io.load_checkpoint(path)
        model.eval()
        loaded.eval()
        with no_grad():
            np.testing.assert_array_equal(model(clip_pair)[1].data, loaded(clip_pair)[1].data)

    def test_file_is_reproducible(self, trained, tmp_path):
        model, opt, path = trained
        io.save_checkpoint(tmp_path / "again.ckpt", model, opt, epoch=3)
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()

    def test_checksum(self, trained, tmp_path):
        blob = bytearray(trained[2].read_bytes())
        blob[len(blob) // 2] ^= 0x01
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        with pytest.raises(io.CheckpointError, match="checksum"):
            io.read_checkpoint(tmp_path / "bad.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"hello")
        with pytest.raises(io.CheckpointError):
            io.read_checkpoint(tmp_path / "x.ckpt")

    def test_overlapping_manifest(self, tmp_path):
        header = json.dumps({"config": ModelConfig().to_dict(), "step": 0, "epoch": 0, "optimizer": None,
                             "manifest": [{"name": "a", "shape": [2], "offset": 0},
                                          {"name": "b", "shape": [2], "offset": 4}]}).encode()
        body = io.MAGIC + struct.pack("<IQ", io.VERSION, len(header)) + header + b"\0" * 12
        (tmp_path / "o.ckpt").write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(io.CheckpointError, match="overlapping"):
            io.read_checkpoint(tmp_path / "o.ckpt")

    def test_version(self, tmp_path):
        header = b"{}"
        body = io.MAGIC + struct.pack("<IQ", 99, len(header)) + header
        (tmp_path / "v.ckpt").write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(io.CheckpointError, match="version"):
            io.read_checkpoint(tmp_path / "v.ckpt")

    def test_float64_rejected(self, tmp_path):
        model = SpoofMamba(ModelConfig(variant="cross")).astype(np.float64)
        with pytest.raises(io.CheckpointError):
            io.save_checkpoint(tmp_path / "f.ckpt", model)
