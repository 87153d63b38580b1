"""Objective quality measures and the grouped evaluation report.

No time-alignment search is done: estimate and reference are compared
sample by sample, so a global shift lowers every score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dsp import StftConfig, Waveform, istft, magnitude, stft
from .errors import ContractError, DataError

SI_SDR_CAP = 100.0
SEG_CLAMP = (-10.0, 35.0)
ACTIVE_DBFS = -40.0
METRICS = ("si_sdr", "seg_snr", "mag_mse")
REPORT_COLUMNS = ("split", "noise_kind", "snr_db", "metric", "noisy_value", "enhanced_value", "delta")


def _arr(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def _pair(est, ref) -> tuple[np.ndarray, np.ndarray]:
    est, ref = _arr(est), _arr(ref)
    if est.shape != ref.shape or est.ndim != 1:
        raise DataError(f"estimate {est.shape} and reference {ref.shape} must be equal-length 1-D signals")
    return est, ref


def si_sdr(est, ref, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, clipped to ``[-cap, cap]``."""
    est, ref = _pair(est, ref)
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise DataError("SI-SDR is undefined for a silent reference")
    target = (float(est @ ref) / ref_energy) * ref
    err = float(np.sum((target - est) ** 2))
    sig = float(target @ target)
    if err == 0.0:
        return cap
    if sig == 0.0:
        return -cap
    return float(np.clip(10.0 * np.log10(sig / err), -cap, cap))


def seg_snr(est, ref, frame: int = 320, hop: int = 160, clamp=SEG_CLAMP,
            active_dbfs: float = ACTIVE_DBFS) -> float:
    """Mean clamped per-frame SNR over frames whose reference is active.

    A frame is active when its reference mean power exceeds
    ``active_dbfs`` relative to full scale. Returns NaN when no frame is
    active. A frame with no error scores the upper clamp.
    """
    est, ref = _pair(est, ref)
    if len(ref) < frame:
        return math.nan
    n = 1 + (len(ref) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    r, e = ref[idx], ref[idx] - est[idx]
    sig = np.sum(r * r, axis=1)
    active = 10.0 * np.log10(np.maximum(sig / frame, 1e-300)) > active_dbfs
    if not active.any():
        return math.nan
    sig, noise = sig[active], np.sum(e * e, axis=1)[active]
    with np.errstate(divide="ignore"):
        per = 10.0 * np.log10(sig / noise)
    return float(np.mean(np.clip(per, *clamp)))


def mag_mse(est_mag: np.ndarray, ref_mag: np.ndarray) -> float:
    est_mag, ref_mag = np.asarray(est_mag), np.asarray(ref_mag)
    if est_mag.shape != ref_mag.shape:
        raise DataError(f"magnitude shapes {est_mag.shape} and {ref_mag.shape} differ")
    return float(np.mean((est_mag - ref_mag) ** 2))


Enhancer = Callable[[np.ndarray], np.ndarray]
"""Maps a noisy magnitude (T, F) to an enhanced magnitude (T, F)."""


def identity_enhancer(mag: np.ndarray) -> np.ndarray:
    return mag


def score(noisy: np.ndarray, clean: np.ndarray, enhancer: Enhancer, cfg: StftConfig) -> dict[str, tuple[float, float]]:
    """metric -> (noisy value, enhanced value) on the frame-covered samples."""
    spec_x = stft(noisy, cfg)
    mag_x = magnitude(spec_x)
    mag_s = magnitude(stft(clean, cfg))
    mag_e = np.asarray(enhancer(mag_x), dtype=np.float64)
    if mag_e.shape != mag_x.shape:
        raise ContractError(f"enhancer returned {mag_e.shape} for input {mag_x.shape}")
    n = min(cfg.covered_length(mag_x.shape[0]), len(clean))
    x_rt = istft(mag_x, cfg, phase_source=spec_x, length=n)
    est = istft(mag_e, cfg, phase_source=spec_x, length=n)
    ref = clean[:n]
    # noisy side goes through the same analysis/synthesis round trip
    return {
        "si_sdr": (si_sdr(x_rt, ref), si_sdr(est, ref)),
        "seg_snr": (seg_snr(x_rt, ref), seg_snr(est, ref)),
        "mag_mse": (mag_mse(mag_x, mag_s), mag_mse(mag_e, mag_s)),
    }


@dataclass
class Row:
    split: str
    noise_kind: str
    snr_db: float
    metric: str
    noisy_value: float
    enhanced_value: float
    utterance: str = ""

    @property
    def delta(self) -> float:
        return self.enhanced_value - self.noisy_value


@dataclass
class EvalReport:
    """Per-utterance rows plus means grouped by (split, noise kind, SNR, metric)."""

    rows: list[Row] = field(default_factory=list)

    def groups(self) -> dict[tuple, list[Row]]:
        out: dict[tuple, list[Row]] = {}
        for r in self.rows:
            out.setdefault((r.split, r.noise_kind, r.snr_db, r.metric), []).append(r)
        return out

    def aggregate(self) -> list[tuple]:
        """One (split, kind, snr, metric, noisy mean, enhanced mean, delta mean) per cell.

        NaN values (segSNR with no active frame) are left out of the means.
        """
        out = []
        for key, rows in sorted(self.groups().items()):
            noisy = _nanmean([r.noisy_value for r in rows])
            enh = _nanmean([r.enhanced_value for r in rows])
            out.append(key + (noisy, enh, enh - noisy))
        return out

    def mean(self, metric: str, which: str = "delta", **where) -> float:
        vals = [getattr(r, which) for r in self.rows if r.metric == metric
                and all(getattr(r, k) == v for k, v in where.items())]
        return _nanmean(vals)

    def to_tsv(self) -> str:
        lines = ["\t".join(REPORT_COLUMNS)]
        for split, kind, snr, metric, noisy, enh, delta in self.aggregate():
            lines.append(f"{split}\t{kind}\t{snr:g}\t{metric}\t{noisy:.6f}\t{enh:.6f}\t{delta:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {
            "note": "PESQ/STOI are not computed; SI-SDR, segmental SNR and magnitude MSE are reported instead.",
            "columns": list(REPORT_COLUMNS),
            "aggregate": [dict(zip(REPORT_COLUMNS, a)) for a in self.aggregate()],
            "rows": [dict(utterance=r.utterance, split=r.split, noise_kind=r.noise_kind, snr_db=r.snr_db,
                          metric=r.metric, noisy_value=r.noisy_value, enhanced_value=r.enhanced_value,
                          delta=r.delta) for r in self.rows],
        }
        return json.dumps(payload, indent=1, allow_nan=True)

    def save(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        tsv, js = prefix.with_suffix(".tsv"), prefix.with_suffix(".json")
        tsv.write_text(self.to_tsv(), encoding="utf-8")
        js.write_text(self.to_json(), encoding="utf-8")
        return tsv, js


def _nanmean(vals: Sequence[float]) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_records(records, enhancer: Enhancer, cfg: StftConfig) -> EvalReport:
    from .data import mix_record

    report = EvalReport()
    for rec in records:
        noisy, clean = mix_record(rec)
        for metric, (nv, ev) in score(noisy, clean, enhancer, cfg).items():
            report.rows.append(Row(rec.split, rec.noise_kind, rec.snr_db, metric, nv, ev, rec.clean))
    return report
