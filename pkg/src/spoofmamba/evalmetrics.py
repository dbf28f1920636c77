"""Countermeasure metrics: EER, normalised minimum DCF and normalised minimum t-DCF.

Scores are oriented so that higher means more bonafide.  At threshold ``tau``
a trial is accepted as bonafide when ``score >= tau``, giving

    P_miss(tau) = fraction of bonafide scores below tau
    P_fa(tau)   = fraction of spoof scores at or above tau

Every metric depends on the scores only through their ranks, so any strictly
increasing transform of the scores leaves them unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import ScoreRecord


@dataclass(frozen=True)
class CostModel:
    """Priors and costs; the ASV operating point is only needed for t-DCF."""

    p_spoof: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 10.0
    # tandem cost framework
    p_tar: float = 0.9405
    p_non: float = 0.0095
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    p_miss_asv: float | None = None
    p_fa_asv: float | None = None
    p_fa_spoof_asv: float | None = None

    def __post_init__(self):
        if not 0.0 < self.p_spoof < 1.0:
            raise ValueError("p_spoof must lie in (0, 1)")
        for name in ("c_miss", "c_fa", "c_miss_asv", "c_fa_asv", "c_miss_cm", "c_fa_cm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("p_tar", "p_non"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("p_miss_asv", "p_fa_asv", "p_fa_spoof_asv"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def has_asv_rates(self) -> bool:
        return None not in (self.p_miss_asv, self.p_fa_asv, self.p_fa_spoof_asv)


def split_scores(records: Iterable[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    """(bonafide scores, spoof scores); records labelled 'unknown' are ignored."""
    bona, spoof = [], []
    for r in records:
        if r.label == "bonafide":
            bona.append(r.score)
        elif r.label == "spoof":
            spoof.append(r.score)
    return np.asarray(bona, dtype=np.float64), np.asarray(spoof, dtype=np.float64)


def _check_classes(bona: np.ndarray, spoof: np.ndarray) -> None:
    if bona.size == 0 or spoof.size == 0:
        raise ValueError("metrics need at least one bonafide and one spoof score")
    if not (np.isfinite(bona).all() and np.isfinite(spoof).all()):
        raise ValueError("scores must be finite")


def operating_points(bona, spoof) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (every distinct score, then +inf) with P_miss and P_fa at each.

    P_miss is non-decreasing and P_fa non-increasing along the returned order.
    """
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    _check_classes(bona, spoof)
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    p_miss = np.searchsorted(bona, thresholds, side="left") / bona.size
    p_fa = 1.0 - np.searchsorted(spoof, thresholds, side="left") / spoof.size
    return thresholds, p_miss, p_fa


def eer_from_scores(bona, spoof) -> tuple[float, float]:
    """Equal error rate by linear interpolation between adjacent operating points.

    The first operating point (lowest threshold) where P_miss >= P_fa closes the
    crossing; the EER is where the segment from the previous point meets the
    diagonal.  The returned threshold is interpolated with the same weight
    (an infinite upper threshold is replaced by the largest score).
    """
    thr, p_miss, p_fa = operating_points(bona, spoof)
    i = int(np.argmax(p_miss >= p_fa))  # exists: at +inf, P_miss = 1 and P_fa = 0
    if i == 0 or p_miss[i] == p_fa[i]:
        return float(p_miss[i]), float(thr[i] if np.isfinite(thr[i]) else thr[i - 1])
    # previous point has p_miss < p_fa; intersect the segment with p_miss = p_fa
    d_prev = p_fa[i - 1] - p_miss[i - 1]
    d_cur = p_miss[i] - p_fa[i]
    w = d_prev / (d_prev + d_cur)
    eer = p_miss[i - 1] + w * (p_miss[i] - p_miss[i - 1])
    hi = thr[i] if np.isfinite(thr[i]) else thr[i - 1]
    tau = thr[i - 1] + w * (hi - thr[i - 1])
    return float(eer), float(tau)


def compute_eer(records: Sequence[ScoreRecord]) -> tuple[float, float]:
    return eer_from_scores(*split_scores(records))


def min_dcf_from_scores(bona, spoof, cost: CostModel = CostModel()) -> tuple[float, float]:
    """Minimum over thresholds of the normalised detection cost

        (c_miss (1 - p_spoof) P_miss + c_fa p_spoof P_fa) / min(c_miss (1 - p_spoof), c_fa p_spoof)

    The denominator is the cheaper of the two default decisions (reject all,
    accept all), so the result never exceeds 1.
    """
    thr, p_miss, p_fa = operating_points(bona, spoof)
    w_miss = cost.c_miss * (1.0 - cost.p_spoof)
    w_fa = cost.c_fa * cost.p_spoof
    dcf = (w_miss * p_miss + w_fa * p_fa) / min(w_miss, w_fa)
    # the accept-all point (P_miss = 0, P_fa = 1) sits at the lowest threshold
    i = int(np.argmin(dcf))
    return float(min(dcf[i], 1.0)), float(thr[i])


def compute_min_dcf(records: Sequence[ScoreRecord], cost: CostModel = CostModel()) -> tuple[float, float]:
    return min_dcf_from_scores(*split_scores(records), cost)


def tdcf_constants(cost: CostModel) -> tuple[float, float]:
    """(C1, C2) of the constrained tandem cost C1 P_miss_cm + C2 P_fa_cm.

        C1 = p_tar (c_miss_cm - c_miss_asv P_miss_asv) - p_non c_fa_asv P_fa_asv
        C2 = c_fa_cm p_spoof P_fa_spoof_asv
    """
    if not cost.has_asv_rates:
        raise ValueError("t-DCF needs the ASV rates p_miss_asv, p_fa_asv and p_fa_spoof_asv")
    c1 = cost.p_tar * (cost.c_miss_cm - cost.c_miss_asv * cost.p_miss_asv) \
        - cost.p_non * cost.c_fa_asv * cost.p_fa_asv
    c2 = cost.c_fa_cm * cost.p_spoof * cost.p_fa_spoof_asv
    return float(c1), float(c2)


def min_tdcf_from_scores(bona, spoof, cost: CostModel) -> tuple[float, float]:
    """Minimum of (C1 P_miss_cm + C2 P_fa_cm) / min(C1, C2) over thresholds."""
    c1, c2 = tdcf_constants(cost)
    if min(c1, c2) <= 0:
        raise ValueError(f"degenerate tandem constants C1={c1:g}, C2={c2:g}: normalisation undefined")
    thr, p_miss, p_fa = operating_points(bona, spoof)
    tdcf = (c1 * p_miss + c2 * p_fa) / min(c1, c2)
    i = int(np.argmin(tdcf))
    return float(tdcf[i]), float(thr[i])


def compute_min_tdcf(records: Sequence[ScoreRecord], cost: CostModel) -> tuple[float, float]:
    return min_tdcf_from_scores(*split_scores(records), cost)


def metrics_report(records: Sequence[ScoreRecord], cost: CostModel = CostModel()) -> dict[str, float]:
    bona, spoof = split_scores(records)
    eer, eer_thr = eer_from_scores(bona, spoof)
    mdcf, mdcf_thr = min_dcf_from_scores(bona, spoof, cost)
    out = {"EER": eer, "EER_threshold": eer_thr, "minDCF": mdcf, "minDCF_threshold": mdcf_thr}
    if cost.has_asv_rates:
        out["min_tDCF"], out["min_tDCF_threshold"] = min_tdcf_from_scores(bona, spoof, cost)
    return out


def format_report(report: dict[str, float]) -> str:
    return "\n".join(f"{k} {v:.6f}" for k, v in report.items())


def write_det_csv(path, records: Sequence[ScoreRecord]) -> None:
    """DET operating points as CSV: threshold, p_miss, p_fa."""
    thr, p_miss, p_fa = operating_points(*split_scores(records))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "p_miss", "p_fa"])
        for t, m, f in zip(thr, p_miss, p_fa):
            writer.writerow([repr(float(t)), repr(float(m)), repr(float(f))])
