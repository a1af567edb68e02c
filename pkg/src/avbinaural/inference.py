"""Full-clip binauralisation: window planning, five-crop schedule, overlap averaging."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import CROP_H, CROP_W, FRAME_H, FRAME_W, SEGMENT_SAMPLES, ClipManifest, LoadedClip, frame_index_for
from .dsp import DEFAULT_STFT, SAMPLE_RATE, StftConfig, istft, recover_channels, stft
from .metrics import MetricReport, clip_metrics

log = logging.getLogger(__name__)

WINDOW_S = 0.63
HOP_S = 0.1
HOP_SAMPLES = int(round(HOP_S * SAMPLE_RATE))

REGIONS = ("TL", "TR", "BL", "BR", "C")
REGION_OFFSETS = {
    "TL": (0, 0),
    "TR": (0, FRAME_W - CROP_W),
    "BL": (FRAME_H - CROP_H, 0),
    "BR": (FRAME_H - CROP_H, FRAME_W - CROP_W),
    "C": ((FRAME_H - CROP_H) // 2, (FRAME_W - CROP_W) // 2),
}

# A predictor maps complex mono spectrograms (B, F, T) and uint8/float crops
# (B, 224, 448, 3) to complex difference spectrograms (B, F, T).
Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class WindowEntry:
    start_s: float
    start_sample: int
    frame_index: int
    tdss_region: str
    tail: bool = False


@dataclass
class WindowPlan:
    entries: list[WindowEntry]
    total_samples: int
    window_samples: int = SEGMENT_SAMPLES
    window_len_s: float = WINDOW_S
    hop_s: float = HOP_S

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_tail(self) -> bool:
        return bool(self.entries) and self.entries[-1].tail

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.total_samples, dtype=np.int64)
        for e in self.entries:
            count[e.start_sample : e.start_sample + self.window_samples] += 1
        return count


def region_for(frame_index: int) -> str:
    return REGIONS[frame_index % 5]


def plan_windows(duration_s: float, fps: int = 10, n_samples: int | None = None) -> WindowPlan:
    """Regular windows every 0.1 s plus, if needed, one window aligned to the clip end."""
    if n_samples is None:
        n_samples = int(round(duration_s * SAMPLE_RATE))
    if n_samples < SEGMENT_SAMPLES:
        raise ValueError(f"plan_windows: clip of {n_samples} samples is shorter than one window")
    n_frames = max(int(round(n_samples / SAMPLE_RATE * fps)), 1)

    def entry(start: int, tail=False) -> WindowEntry:
        s = start / SAMPLE_RATE
        idx = frame_index_for(s, fps, n_frames)
        return WindowEntry(s, start, idx, region_for(idx), tail)

    entries = [entry(k * HOP_SAMPLES) for k in range((n_samples - SEGMENT_SAMPLES) // HOP_SAMPLES + 1)]
    if entries[-1].start_sample + SEGMENT_SAMPLES < n_samples:
        entries.append(entry(n_samples - SEGMENT_SAMPLES, tail=True))
    return WindowPlan(entries, n_samples)


def crop_at(frame: np.ndarray, offset: tuple[int, int]) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.shape[:2] != (FRAME_H, FRAME_W):
        raise ValueError(f"expected a {FRAME_H}x{FRAME_W} frame, got {frame.shape[:2]}")
    r, c = offset
    return frame[r : r + CROP_H, c : c + CROP_W]


def tdss_crop(frame: np.ndarray, frame_index: int) -> np.ndarray:
    """Crop the region the five-step schedule assigns to ``frame_index``."""
    return crop_at(frame, REGION_OFFSETS[region_for(frame_index)])


def centre_crop(frame: np.ndarray) -> np.ndarray:
    return crop_at(frame, REGION_OFFSETS["C"])


def overlap_integrate(window_preds: Sequence[tuple[int, np.ndarray]], total_len: int) -> np.ndarray:
    """Average overlapping window predictions sample by sample.

    Predictions may carry leading channel axes; the last axis is time.
    """
    if not window_preds:
        raise ValueError("overlap_integrate: no windows")
    lead = np.shape(window_preds[0][1])[:-1]
    mean = np.zeros(lead + (total_len,))
    count = np.zeros(total_len, dtype=np.int64)
    # running mean in start order: exact for constant predictions, and the
    # result does not depend on the order windows were produced in
    for start, pred in sorted(window_preds, key=lambda w: w[0]):
        sl = slice(start, start + np.shape(pred)[-1])
        count[sl] += 1
        mean[..., sl] += (pred - mean[..., sl]) / count[sl]
    if np.any(count == 0):
        first = int(np.argmin(count > 0))
        raise RuntimeError(f"overlap_integrate: sample {first} is not covered by any window")
    return mean


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


def zero_predictor(mono_specs: np.ndarray, crops: np.ndarray) -> np.ndarray:
    """Mono-mono reference: no difference signal at all."""
    return np.zeros_like(mono_specs)


def model_predictor(model) -> Predictor:
    from .model import preprocess_frames

    model.eval()

    def predict(mono_specs, crops):
        return model.predict_diff(mono_specs, preprocess_frames(crops, model.dtype))

    return predict


# ---------------------------------------------------------------------------
# clips and splits
# ---------------------------------------------------------------------------


def binauralize_clip(
    mono: np.ndarray,
    frame_at: Callable[[int], np.ndarray],
    predictor: Predictor,
    tdss: bool = True,
    fps: int = 10,
    batch: int = 16,
    threads: int = 1,
    cfg: StftConfig = DEFAULT_STFT,
) -> np.ndarray:
    """Stereo (2, T') waveform for a mono (T',) waveform.

    ``frame_at(i)`` returns the 480 x 240 frame with global index ``i``. Windows
    are evaluated in fixed chunks of ``batch`` so results do not depend on
    ``threads``.
    """
    mono = np.asarray(mono, dtype=np.float64)
    plan = plan_windows(mono.shape[-1] / SAMPLE_RATE, fps, n_samples=mono.shape[-1])
    chunks = [plan.entries[i : i + batch] for i in range(0, len(plan), batch)]

    def run(chunk: list[WindowEntry]):
        segs = np.stack([mono[e.start_sample : e.start_sample + SEGMENT_SAMPLES] for e in chunk])
        specs = stft(segs, cfg)
        crops = np.stack(
            [tdss_crop(frame_at(e.frame_index), e.frame_index) if tdss else centre_crop(frame_at(e.frame_index))
             for e in chunk]
        )
        try:
            diff = predictor(specs, crops)
        except Exception as exc:
            raise RuntimeError(f"window at {chunk[0].start_s:.2f}s failed: {exc}") from exc
        left, right = recover_channels(specs, diff)
        wl = istft(left, cfg, SEGMENT_SAMPLES)
        wr = istft(right, cfg, SEGMENT_SAMPLES)
        return [(e.start_sample, np.stack([wl[i], wr[i]])) for i, e in enumerate(chunk)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    preds = [w for r in results for w in r]
    return overlap_integrate(preds, mono.shape[-1])


@dataclass
class EvalOptions:
    tdss: bool = True
    batch: int = 16
    threads: int = 1
    target_rms: float = 0.1
    label: str = ""
    extra: dict = field(default_factory=dict)


def evaluate_split(manifest: ClipManifest, predictor: Predictor, opts: EvalOptions | None = None) -> MetricReport:
    """Binauralise each clip from its mono mixture and score against the stereo ground truth.

    The mixture is level-normalised before prediction and the output is scaled
    back, so metrics are on the original recording level.
    """
    opts = opts or EvalOptions()
    report = MetricReport(config={"tdss": opts.tdss, "label": opts.label, **opts.extra})
    for rec in manifest:
        try:
            clip = LoadedClip(rec, opts.target_rms)
            mono = clip.stereo[0] + clip.stereo[1]
            pred = binauralize_clip(
                mono, clip.frame, predictor, opts.tdss, rec.fps, opts.batch, opts.threads
            )
            values = clip_metrics(pred / clip.scale, clip.raw.samples)
        except (ValueError, OSError, RuntimeError) as exc:
            log.warning("skipping %s: %s", rec.clip_id, exc)
            report.skipped.append(rec.clip_id)
            continue
        if not all(math.isfinite(v) or v == math.inf for v in values.values()):
            report.skipped.append(rec.clip_id)
            continue
        report.add(rec.clip_id, values)
    return report
