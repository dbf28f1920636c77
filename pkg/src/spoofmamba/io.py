"""File formats: 16-bit PCM WAV, CM protocols, score files, flat configs and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .evalmetrics import CostModel
from .frontend import NUM_SAMPLES, SAMPLE_RATE
from .model import ModelConfig, ScoreRecord, SpoofMamba
from .training import Adam, fit_length


class AudioFormatError(ValueError):
    """Base class for WAV files that do not match the expected format."""


class SampleRateMismatch(AudioFormatError):
    pass


class ChannelMismatch(AudioFormatError):
    pass


class EncodingMismatch(AudioFormatError):
    pass


class ProtocolError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

def read_wav(path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Decode a mono 16-bit PCM file to float32 samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            rate, channels, width = fh.getframerate(), fh.getnchannels(), fh.getsampwidth()
            frames = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise EncodingMismatch(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    if rate != sample_rate:
        raise SampleRateMismatch(f"{path}: sample rate {rate} Hz, expected {sample_rate} Hz")
    if channels != 1:
        raise ChannelMismatch(f"{path}: {channels} channels, expected mono")
    if width != 2:
        raise EncodingMismatch(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
    return np.frombuffer(frames, dtype="<i2").astype(np.float32) / np.float32(32768.0)


def load_wav(path, length: int = NUM_SAMPLES, rng: np.random.Generator | None = None) -> np.ndarray:
    """(1, length) clip: repeat-padded when short; first window (or a random one with ``rng``) when long."""
    samples = read_wav(path)
    if samples.size == 0:
        raise AudioFormatError(f"{path}: no samples")
    return fit_length(samples, length, rng)[None, :]


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# protocols and scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolEntry:
    speaker_id: str
    utt_id: str
    attack_id: str
    key: str


def parse_protocol(path) -> list[ProtocolEntry]:
    """Whitespace-separated ``speaker utt - attack key`` lines; extra columns are ignored."""
    entries, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 5:
                raise ProtocolError(f"{path}:{lineno}: expected at least 5 fields, got {len(parts)}")
            key = parts[4].lower()
            if key not in ("bonafide", "spoof"):
                raise ProtocolError(f"{path}:{lineno}: unknown key {parts[4]!r}")
            utt = parts[1]
            if utt in seen:
                raise ProtocolError(f"{path}:{lineno}: duplicate utt_id {utt!r}")
            seen.add(utt)
            entries.append(ProtocolEntry(parts[0], utt, parts[3], key))
    return entries


def write_scores(path, records) -> None:
    """One ``utt_id score`` line per record, score to 6 decimals."""
    with open(path, "w") as fh:
        for r in records:
            utt, value = (r.utt_id, r.score) if isinstance(r, ScoreRecord) else r
            fh.write(f"{utt} {value:.6f}\n")


def read_scores(path) -> list[tuple[str, float]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'utt_id score'")
            out.append((parts[0], float(parts[1])))
    return out


def join_scores(scores: list[tuple[str, float]], protocol: list[ProtocolEntry]) -> list[ScoreRecord]:
    """Label scores from the protocol; utterances absent from it are 'unknown'."""
    keys = {e.utt_id: e.key for e in protocol}
    return [ScoreRecord(utt, keys.get(utt, "unknown"), value) for utt, value in scores]


# ---------------------------------------------------------------------------
# flat key = value configs
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if "," in text:
        return [_parse_value(t.strip()) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config(path) -> dict:
    """``key = value`` per line; '#' starts a comment; comma-separated values become lists."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = _parse_value(value)
    return out


def _split_known(raw: dict, cls) -> tuple[dict, dict]:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in raw.items() if k in names}, {k: v for k, v in raw.items() if k not in names}


def load_model_config(path) -> ModelConfig:
    """Model fields from a config file; training keys (epochs, lr, ...) are skipped."""
    known, _ = _split_known(read_config(path), ModelConfig)
    return ModelConfig.from_dict(known)


def load_train_settings(path) -> dict:
    _, rest = _split_known(read_config(path), ModelConfig)
    allowed = {"epochs", "batch_size", "lr", "weight_decay"}
    unknown = set(rest) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    return rest


def load_cost_model(path) -> CostModel:
    known, rest = _split_known(read_config(path), CostModel)
    if rest:
        raise ValueError(f"{path}: unknown cost keys {sorted(rest)}")
    return CostModel(**{k: float(v) for k, v in known.items()})


def write_config(path, cfg: ModelConfig) -> None:
    with open(path, "w") as fh:
        for key, value in cfg.to_dict().items():
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout: MAGIC | u32 version | u64 header length | JSON header | float32 LE payload | sha256
# The digest covers everything before it.  The header holds the config, the
# optimiser step/epoch and a manifest of (name, shape, offset) into the payload.

MAGIC = b"SPMBCKPT"
VERSION = 1
_DIGEST = 32


def save_checkpoint(path, model: SpoofMamba, optimizer: Adam | None = None, epoch: int = 0) -> None:
    arrays = dict(model.state_dict())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        if np.asarray(arr).dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints store float32, got {np.asarray(arr).dtype}")
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({
        "config": model.cfg.to_dict(),
        "step": optimizer.state.step if optimizer is not None else 0,
        "epoch": int(epoch),
        "optimizer": None if optimizer is None else {
            "lr": optimizer.state.lr, "weight_decay": optimizer.state.weight_decay,
            "beta1": optimizer.state.beta1, "beta2": optimizer.state.beta2, "eps": optimizer.state.eps,
        },
        "manifest": manifest,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict
    step: int
    epoch: int
    optimizer: dict | None

    def build_model(self) -> SpoofMamba:
        model = SpoofMamba(self.config)
        model.load_state_dict({k: v for k, v in self.arrays.items() if not k.startswith("adam.")})
        return model

    def build_optimizer(self, model: SpoofMamba) -> Adam:
        hp = self.optimizer or {}
        opt = Adam(model.named_parameters(), lr=hp.get("lr", 5e-4), weight_decay=hp.get("weight_decay", 1e-4),
                   betas=(hp.get("beta1", 0.9), hp.get("beta2", 0.999)), eps=hp.get("eps", 1e-8))
        if self.optimizer is not None:
            opt.load_state_arrays(self.arrays, self.step)
        return opt


def read_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 12 + _DIGEST or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen])
    payload = memoryview(body)[start + hlen:]
    arrays, end = {}, 0
    for entry in sorted(header["manifest"], key=lambda e: e["offset"]):
        if entry["offset"] < end:
            raise CheckpointError(f"{path}: overlapping manifest entry {entry['name']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    return Checkpoint(ModelConfig.from_dict(header["config"]), arrays, int(header["step"]),
                      int(header["epoch"]), header.get("optimizer"))


def load_checkpoint(path) -> tuple[SpoofMamba, Adam]:
    ckpt = read_checkpoint(path)
    model = ckpt.build_model()
    return model, ckpt.build_optimizer(model)
