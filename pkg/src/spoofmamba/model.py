"""End-to-end countermeasure model: encoder, 2-D attention split, per-branch
bidirectional Mamba blocks, mutual cross-attention, pooling, fusion and an
angular-margin two-class head.

Label convention: 1 = bonafide, 0 = spoof.  Scores are
``logit[bonafide] - logit[spoof]`` so higher means more bonafide.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .attmap import AttentionMap2D, branch_split
from .frontend import BLOCK_POOLS, NUM_SAMPLES, Encoder, EncoderSpec
from .interaction import Fusion, MutualCrossAttention, SequencePool, mca
from .numerics import Module, Parameter, Tensor, ops
from .numerics.nn import Linear
from .ssm import BiMamba, FlipMamba, InBiMamba, UniMamba, count_mamba_blocks

BONAFIDE = 1
SPOOF = 0

VARIANTS = {
    "cross": UniMamba,
    "bi": BiMamba,
    "flip": FlipMamba,
    "inbi": InBiMamba,
}

# Table-2 style ablation toggles, each switching one component off
ABLATIONS = {
    "no_2d_attm": {"enable_2d_attm": False},
    "no_mca": {"enable_mca": False},
    "no_spectral": {"enable_spectral": False},
    "no_temporal": {"enable_temporal": False},
}


LABEL_NAMES = ("bonafide", "spoof", "unknown")


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    label: str
    score: float

    def __post_init__(self):
        if not self.utt_id:
            raise ValueError("utt_id must be non-empty")
        if self.label not in LABEL_NAMES:
            raise ValueError(f"label must be one of {LABEL_NAMES}, got {self.label!r}")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "bi"
    c_model: int = 64
    blocks_per_branch: int = 1
    enable_2d_attm: bool = True
    enable_mca: bool = True
    enable_spectral: bool = True
    enable_temporal: bool = True
    margin: int = 4
    margin_lambda: float = 0.0
    joint_softmax_attmap: bool = False
    mca_projections: bool = True
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    res_channels: int = 32
    time_pools: tuple = tuple(p[1] for p in BLOCK_POOLS)
    freq_pools: tuple = tuple(p[0] for p in BLOCK_POOLS)
    num_samples: int = NUM_SAMPLES
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if not (self.enable_spectral or self.enable_temporal):
            raise ValueError("at least one of enable_spectral / enable_temporal must be true")
        if int(self.margin) != self.margin or self.margin < 1:
            raise ValueError("margin must be an integer >= 1")
        if self.blocks_per_branch < 1:
            raise ValueError("blocks_per_branch must be >= 1")
        if len(self.time_pools) != 4 or len(self.freq_pools) != 4:
            raise ValueError("time_pools and freq_pools need one entry per encoder block")
        if self.margin_lambda < 0:
            raise ValueError("margin_lambda must be >= 0")

    @property
    def pools(self) -> tuple:
        return tuple(zip(self.freq_pools, self.time_pools))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["time_pools"] = list(self.time_pools)
        d["freq_pools"] = list(self.freq_pools)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("time_pools", "freq_pools"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return replace(self, **ABLATIONS[name])


class Branch(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cls = VARIANTS[cfg.variant]
        kw = dict(d_state=cfg.d_state, expand=cfg.expand, d_conv=cfg.d_conv)
        self.blocks = [cls(cfg.c_model, rng, **kw) for _ in range(cfg.blocks_per_branch)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class SpoofMamba(Module):
    """Full model; ``forward`` returns (embedding (B, C), cosine logits (B, 2))."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C = cfg.c_model
        spec = EncoderSpec(res_channels=cfg.res_channels, channels=C, pools=cfg.pools)
        self.encoder = Encoder(rng, spec, cfg.num_samples)
        self.attmap = AttentionMap2D(C, rng, cfg.joint_softmax_attmap) if cfg.enable_2d_attm else None
        self.spectral = Branch(cfg, rng) if cfg.enable_spectral else None
        self.temporal = Branch(cfg, rng) if cfg.enable_temporal else None
        both = cfg.enable_spectral and cfg.enable_temporal
        self.mca = MutualCrossAttention(C, rng, cfg.mca_projections) if (cfg.enable_mca and both) else None
        self.pool_f = SequencePool(C, rng) if cfg.enable_spectral else None
        self.pool_t = SequencePool(C, rng) if cfg.enable_temporal else None
        self.fusion = Fusion(C, rng) if both else None
        self.single_proj = None if both else Linear(C, C, rng)
        bound = 1.0 / np.sqrt(C)
        self.head = Parameter(rng.uniform(-bound, bound, size=(2, C)))

    @property
    def mamba_block_count(self) -> int:
        return count_mamba_blocks(self)

    def branches(self, waveform) -> tuple[Tensor | None, Tensor | None]:
        """Branch sequences after the Mamba blocks and MCA: (B, F, C) and (B, T, C)."""
        x = self.encoder(waveform)
        logits = self.attmap.logits(x) if self.attmap is not None else None
        x_f, x_t = branch_split(x, logits, self.cfg.joint_softmax_attmap)
        x_f = self.spectral(x_f) if self.spectral is not None else None
        x_t = self.temporal(x_t) if self.temporal is not None else None
        if x_f is not None and x_t is not None:
            x_f, x_t = mca(self.mca, x_f, x_t)
        return x_f, x_t

    def embed(self, waveform) -> Tensor:
        x_f, x_t = self.branches(waveform)
        z_f = self.pool_f(x_f) if x_f is not None else None
        z_t = self.pool_t(x_t) if x_t is not None else None
        if self.fusion is not None:
            return self.fusion(z_f, z_t)
        return self.single_proj(z_f if z_f is not None else z_t)

    def forward(self, waveform) -> tuple[Tensor, Tensor]:
        emb = self.embed(waveform)
        return emb, head_logits(emb, self.head)


def head_logits(embedding: Tensor, head: Tensor) -> Tensor:
    """x . w_j / |w_j|, i.e. |x| cos(theta_j)."""
    w = ops.as_tensor(head)
    w_hat = w / ops.sqrt(ops.sum(w * w, axis=1, keepdims=True))
    return ops.matmul(ops.as_tensor(embedding), ops.transpose(w_hat))


def chebyshev(c: Tensor, m: int) -> Tensor:
    """T_m(c) = cos(m arccos c) by the three-term recurrence."""
    if m == 0:
        return c * 0.0 + 1.0
    prev, cur = c * 0.0 + 1.0, c
    for _ in range(m - 1):
        prev, cur = cur, 2.0 * c * cur - prev
    return cur


def asoftmax_loss(embedding, head, labels, m: int = 4, lam: float = 0.0) -> Tensor:
    """Angular-margin softmax (multiplicative margin ``m``) averaged over the batch.

    The target logit is |x| psi(theta) with psi = (-1)^k cos(m theta) - 2k for
    theta in [k pi / m, (k+1) pi / m]; the other logit is |x| cos(theta).  With
    ``lam`` > 0 the target logit is blended as (lam |x| cos + |x| psi) / (1 + lam).
    """
    if int(m) != m or m < 1:
        raise ValueError("margin m must be an integer >= 1")
    x = ops.as_tensor(embedding)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != x.shape[0]:
        raise ValueError("one label per embedding required")
    sq = ops.sum(x * x, axis=1, keepdims=True)
    if np.any(sq.data <= 0):
        raise ValueError("zero-norm embedding has no angle")
    norm = ops.sqrt(sq)
    logits = head_logits(x, head)
    cos = logits / norm
    n_cls = logits.shape[1]
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    cos_t = ops.sum(cos * Tensor(onehot), axis=1, keepdims=True)
    theta = np.arccos(np.clip(cos_t.data, -1.0, 1.0))
    k = np.minimum(np.floor(m * theta / np.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0).astype(logits.dtype)
    psi = chebyshev(cos_t, int(m)) * Tensor(sign) - Tensor((2.0 * k).astype(logits.dtype))
    target = norm * psi
    if lam:
        target = (target + lam * norm * cos_t) * (1.0 / (1.0 + lam))
    mixed = logits * Tensor(1.0 - onehot) + target * Tensor(onehot)
    assert mixed.shape[1] == n_cls
    return ops.cross_entropy(mixed, labels)


def param_count(cfg: ModelConfig = ModelConfig()) -> int:
    return SpoofMamba(cfg).num_parameters()


def score(model: SpoofMamba, waveform) -> np.ndarray:
    """Per-clip logit(bonafide) - logit(spoof)."""
    _, logits = model(waveform)
    return logits.data[:, BONAFIDE] - logits.data[:, SPOOF]
