"""Binaural generation metrics and the mono-mono reference predictor.

Definitions (all computed on stereo pairs, channel order L, R):

* ``stft_d``: sum over channels of the Frobenius distance between complex
  spectrograms, divided by the frame count.
* ``mag_d``: the same on magnitude spectrograms.
* ``phs_d``: mean wrapped absolute phase difference of the L-R spectrograms.
* ``env_d``: sum over channels of the L2 distance between Hilbert envelopes,
  divided by the sample count.
* ``wav_d``: 1e3 times the stereo L2 waveform distance divided by the sample count.
* ``snr_db``: 10 log10(sum gt^2 / sum (gt - pred)^2); ``inf`` for a perfect match.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import hilbert

from .dsp import DEFAULT_STFT, StftConfig, recover_channels, stft

METRIC_NAMES = ("stft_d", "env_d", "mag_d", "phs_d", "wav_d", "snr_db")

METRIC_DEFINITIONS = {
    "stft_d": "sum_ch ||S_pred - S_gt||_F / frames",
    "env_d": "sum_ch ||env_pred - env_gt||_2 / samples (Hilbert envelope)",
    "mag_d": "sum_ch || |S_pred| - |S_gt| ||_F / frames",
    "phs_d": "mean |wrap(angle(D_pred) - angle(D_gt))|, D = S_L - S_R",
    "wav_d": "1e3 * ||w_pred - w_gt||_2 (both channels) / samples",
    "snr_db": "10 log10(sum gt^2 / sum (gt - pred)^2); null when infinite",
}


def _check_pair(name: str, pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim < 2 or pred.shape[0] != 2:
        raise ValueError(f"{name}: expected a stereo pair with leading axis 2, got {pred.shape}")
    return pred, gt


def stft_distance(pred, gt) -> float:
    """``pred``/``gt`` are (2, F, T) complex stereo spectrograms."""
    pred, gt = _check_pair("stft_distance", pred, gt)
    frames = gt.shape[-1]
    return sum(float(np.linalg.norm(pred[c] - gt[c])) for c in range(2)) / frames


def mag_distance(pred, gt) -> float:
    pred, gt = _check_pair("mag_distance", pred, gt)
    frames = gt.shape[-1]
    return sum(float(np.linalg.norm(np.abs(pred[c]) - np.abs(gt[c]))) for c in range(2)) / frames


def wrap_angle(x: np.ndarray) -> np.ndarray:
    """Principal value in (-pi, pi]."""
    return np.pi - np.mod(np.pi - x, 2 * np.pi)


def phs_distance(pred, gt) -> float:
    pred, gt = _check_pair("phs_distance", pred, gt)
    d_pred = pred[0] - pred[1]
    d_gt = gt[0] - gt[1]
    return float(np.mean(np.abs(wrap_angle(np.angle(d_pred) - np.angle(d_gt)))))


def envelope(x: np.ndarray) -> np.ndarray:
    return np.abs(hilbert(x, axis=-1))


def env_distance(pred, gt) -> float:
    """``pred``/``gt`` are (2, T') stereo waveforms."""
    pred, gt = _check_pair("env_distance", pred, gt)
    n = gt.shape[-1]
    return sum(float(np.linalg.norm(envelope(pred[c]) - envelope(gt[c]))) for c in range(2)) / n


def wav_distance(pred, gt) -> float:
    pred, gt = _check_pair("wav_distance", pred, gt)
    return 1e3 * float(np.linalg.norm(pred - gt)) / gt.shape[-1]


def snr(pred, gt) -> float:
    pred, gt = _check_pair("snr", pred, gt)
    signal = math.fsum(np.square(gt).ravel())
    if signal <= 0:
        raise ValueError("snr: ground truth is silent")
    noise = math.fsum(np.square(gt - pred).ravel())
    if noise == 0:
        return math.inf
    return 10 * math.log10(signal / noise)


def mono_mono_baseline(mono: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predict a zero difference spectrogram: both channels get half the mixture."""
    return recover_channels(mono, np.zeros_like(mono))


def clip_metrics(pred_wav, gt_wav, cfg: StftConfig = DEFAULT_STFT) -> dict[str, float]:
    pred_wav, gt_wav = np.asarray(pred_wav), np.asarray(gt_wav)
    ps, gs = stft(pred_wav, cfg), stft(gt_wav, cfg)
    return {
        "stft_d": stft_distance(ps, gs),
        "env_d": env_distance(pred_wav, gt_wav),
        "mag_d": mag_distance(ps, gs),
        "phs_d": phs_distance(ps, gs),
        "wav_d": wav_distance(pred_wav, gt_wav),
        "snr_db": snr(pred_wav, gt_wav),
    }


def _json_value(v: float):
    return None if (isinstance(v, float) and not math.isfinite(v)) else v


@dataclass
class MetricReport:
    per_clip: list[tuple[str, dict[str, float]]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def add(self, clip_id: str, values: dict[str, float]) -> None:
        self.per_clip.append((clip_id, values))

    @property
    def aggregate(self) -> dict[str, float]:
        out = {}
        for name in METRIC_NAMES:
            vals = [m[name] for _, m in self.per_clip]
            out[name] = math.fsum(vals) / len(vals) if vals else math.nan
        return out

    def to_dict(self) -> dict:
        return {
            "config": {**self.config, "metric_definitions": METRIC_DEFINITIONS},
            "per_clip": [
                {"clip_id": cid, **{k: _json_value(m[k]) for k in METRIC_NAMES}} for cid, m in self.per_clip
            ],
            "aggregate": {k: _json_value(v) for k, v in self.aggregate.items()},
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("clip_id",) + METRIC_NAMES)
        for cid, m in self.per_clip:
            w.writerow([cid] + ["" if not math.isfinite(m[k]) else repr(float(m[k])) for k in METRIC_NAMES])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        cfg = {k: v for k, v in d.get("config", {}).items() if k != "metric_definitions"}
        rep = cls(config=cfg, skipped=list(d.get("skipped", [])))
        for row in d["per_clip"]:
            rep.add(row["clip_id"], {k: (math.inf if row[k] is None else row[k]) for k in METRIC_NAMES})
        return rep

    def table(self) -> str:
        agg = self.aggregate
        head = " ".join(f"{k:>10s}" for k in METRIC_NAMES)
        vals = " ".join(f"{agg[k]:10.4f}" for k in METRIC_NAMES)
        return f"{head}\n{vals}"
