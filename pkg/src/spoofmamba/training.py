"""Adam with coupled L2, the training loop and the synthetic overfit corpus."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .frontend import NUM_SAMPLES, SAMPLE_RATE
from .model import BONAFIDE, SPOOF, ModelConfig, SpoofMamba, asoftmax_loss
from .numerics import NonFiniteError, Parameter

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Parameter], **hyper) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: OptimState,
              names: Sequence[str] | None = None) -> None:
    """One Adam update in place; weight decay is added to the gradient (classic L2)."""
    for i, g in enumerate(grads):
        if g is not None and not np.isfinite(g).all():
            name = names[i] if names else f"#{i}"
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"adam_step: {bad} non-finite gradient entries in parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.data.dtype.type
        g = np.zeros_like(p.data) if g is None else g.astype(p.data.dtype, copy=False)
        if state.weight_decay:
            g = g + dt(state.weight_decay) * p.data
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data = p.data - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


class Adam:
    def __init__(self, named_params, lr: float = 5e-4, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = OptimState.for_params(self.params, lr=lr, weight_decay=weight_decay,
                                           beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.names)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for i, name in enumerate(self.names):
            self.state.m[i] = np.array(arrays[f"adam.m.{name}"], dtype=self.params[i].dtype)
            self.state.v[i] = np.array(arrays[f"adam.v.{name}"], dtype=self.params[i].dtype)
        self.state.step = int(step)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def fit_length(wave: np.ndarray, length: int = NUM_SAMPLES, rng: np.random.Generator | None = None) -> np.ndarray:
    """Repeat-pad short clips; crop long ones (random window with ``rng``, else the start)."""
    wave = np.asarray(wave)
    if wave.size == 0:
        raise ValueError("empty waveform")
    if wave.size < length:
        reps = -(-length // wave.size)
        return np.tile(wave, reps)[:length]
    if wave.size == length or rng is None:
        return wave[:length]
    start = int(rng.integers(0, wave.size - length + 1))
    return wave[start:start + length]


def spectral_notch(wave: np.ndarray, low_hz: float = 2000.0, high_hz: float = 3000.0,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Remove the band [low_hz, high_hz] by zeroing FFT bins."""
    spec = np.fft.rfft(wave)
    freqs = np.fft.rfftfreq(wave.size, 1.0 / sample_rate)
    spec[(freqs >= low_hz) & (freqs <= high_hz)] = 0.0
    return np.fft.irfft(spec, n=wave.size)


def synthetic_dataset(n_per_class: int = 16, seed: int = 0, length: int = NUM_SAMPLES,
                      sample_rate: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Bonafide clips of tone mixtures over band-limited noise, and spoofed copies
    that differ only by a fixed 2-3 kHz spectral notch.

    Returns (waves (2n, length) float32, labels (2n,)), bonafide first.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    bona = []
    for _ in range(n_per_class):
        tones = rng.uniform(150.0, 6000.0, size=int(rng.integers(3, 6)))
        amps = rng.uniform(0.2, 1.0, size=tones.size)
        phases = rng.uniform(0, 2 * np.pi, size=tones.size)
        wave = (amps[:, None] * np.sin(2 * np.pi * tones[:, None] * t + phases[:, None])).sum(axis=0)
        lo, hi = rng.uniform(200.0, 800.0), rng.uniform(4000.0, 7000.0)
        spec = np.fft.rfft(rng.standard_normal(length))
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        noise = np.fft.irfft(spec, n=length)
        wave = wave + 0.5 * noise / noise.std()
        bona.append(0.3 * wave / np.abs(wave).max())
    bona = np.stack(bona)
    spoof = np.stack([spectral_notch(w, sample_rate=sample_rate) for w in bona])
    waves = np.concatenate([bona, spoof]).astype(np.float32)
    labels = np.concatenate([np.full(n_per_class, BONAFIDE), np.full(n_per_class, SPOOF)])
    return waves, labels


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    epoch: int
    step: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainResult:
    model: SpoofMamba
    optimizer: Adam
    history: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    best_loss: float = float("inf")
    best_state: dict | None = None
    stopped_early: bool = False
    seconds: float = 0.0


def train_step(model: SpoofMamba, opt: Adam, waves: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """One optimiser step on a batch; returns (loss, accuracy) of that forward pass."""
    model.train()
    opt.zero_grad()
    emb, logits = model(waves)
    loss = asoftmax_loss(emb, model.head, labels, model.cfg.margin, model.cfg.margin_lambda)
    loss.backward()
    opt.step()
    pred = (logits.data[:, BONAFIDE] > logits.data[:, SPOOF]).astype(int)
    return float(loss.data), float(np.mean(pred == labels))


def train_loop(waves: np.ndarray, labels: np.ndarray, cfg: ModelConfig = ModelConfig(), epochs: int = 1,
               batch_size: int = 32, lr: float = 5e-4, weight_decay: float = 1e-4,
               model: SpoofMamba | None = None, optimizer: Adam | None = None, start_epoch: int = 0,
               stop: Callable[[StepRecord], bool] | None = None, max_steps: int | None = None,
               log_file=None, checkpoint_path=None) -> TrainResult:
    """Shuffle each epoch with ``default_rng([seed, epoch])`` and step through batches.

    ``stop`` is consulted after every step; ``max_steps`` caps the total.  The
    parameters with the lowest per-epoch mean loss are kept in ``best_state``
    (and written to ``checkpoint_path`` when given).
    """
    if isinstance(waves, np.ndarray) and waves.ndim == 1:
        waves = waves[None, :]
    labels = np.asarray(labels)
    if len(waves) == 0:
        raise ValueError("empty dataset")
    if len(waves) != len(labels):
        raise ValueError("waves and labels differ in length")
    model = model or SpoofMamba(cfg)
    cfg = model.cfg
    opt = optimizer or Adam(model.named_parameters(), lr=lr, weight_decay=weight_decay)
    result = TrainResult(model, opt)
    t0 = time.perf_counter()
    step = opt.state.step
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(waves))
        crop_rng = np.random.default_rng([cfg.seed, epoch, 1])
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            batch = np.stack([fit_length(waves[j], cfg.num_samples, crop_rng) for j in idx])
            loss, acc = train_step(model, opt, batch, labels[idx])
            step += 1
            rec = StepRecord(epoch, step, loss, acc, opt.state.lr)
            result.history.append(rec)
            losses.append(loss)
            line = f"{epoch} {step} {loss:.6f} {opt.state.lr:g}"
            log.debug(line)
            if log_file is not None:
                log_file.write(line + "\n")
            if (stop is not None and stop(rec)) or (max_steps is not None and step >= max_steps):
                result.stopped_early = True
                break
        mean_loss = float(np.mean(losses))
        result.epoch_losses.append(mean_loss)
        log.info("epoch %d mean loss %.6f", epoch, mean_loss)
        if mean_loss < result.best_loss:
            result.best_loss = mean_loss
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
            if checkpoint_path is not None:
                from .io import save_checkpoint
                save_checkpoint(checkpoint_path, model, opt, epoch=epoch)
        if result.stopped_early:
            break
    result.seconds = time.perf_counter() - t0
    return result


def overfit_stop(loss_target: float = 0.05) -> Callable[[StepRecord], bool]:
    """Stop once a step reaches 100% accuracy with loss below ``loss_target``."""
    return lambda rec: rec.accuracy == 1.0 and rec.loss < loss_target
