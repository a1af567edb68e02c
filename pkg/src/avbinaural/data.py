"""Synthetic binaural scenes, clip manifests, training-pair sampling and augmentation."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dsp import SAMPLE_RATE, WaveformClip, load_clip, rms_normalize, write_wav

log = logging.getLogger(__name__)

FPS = 10
CLIP_SECONDS = 10.0
SEGMENT_SECONDS = 0.63
SEGMENT_SAMPLES = int(round(SEGMENT_SECONDS * SAMPLE_RATE))  # 10080
FRAME_W, FRAME_H = 480, 240
CROP_W, CROP_H = 448, 224
BACKGROUND, BLOB = 16, 230
BLOB_SIZE = 40
MAX_ITD_S = 0.6e-3


class ManifestError(ValueError):
    """Malformed manifest line or missing referenced files."""


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    """One source panned at azimuth ``x`` in [0, 1] (0 = hard left).

    ``azimuth_end`` makes the source drift linearly over the clip. With ``itd``
    the far ear also hears the source late by up to 0.6 ms.
    """

    azimuth: float
    source: str = "tones"
    n_tones: int = 3
    azimuth_end: float | None = None
    duration_s: float = CLIP_SECONDS
    seed: int = 0
    itd: bool = False

    def __post_init__(self):
        for x in (self.azimuth, self.azimuth_end):
            if x is not None and not 0.0 <= x <= 1.0:
                raise ValueError(f"azimuth {x} outside [0, 1]")
        if self.source not in ("tones", "noise"):
            raise ValueError(f"unknown source kind {self.source!r}")

    def azimuth_at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.azimuth_end is None:
            return np.full_like(t, self.azimuth)
        frac = np.clip(t / self.duration_s, 0.0, 1.0)
        return self.azimuth + (self.azimuth_end - self.azimuth) * frac


def _source_renderer(spec: SceneSpec, rng: np.random.Generator, n: int):
    """Return f(t) evaluating the dry source at (possibly fractional) times in seconds."""
    if spec.source == "tones":
        freqs = rng.uniform(200.0, 4000.0, spec.n_tones)
        phases = rng.uniform(0, 2 * np.pi, spec.n_tones)
        amps = rng.uniform(0.5, 1.0, spec.n_tones)
        amps *= 0.6 / amps.sum()

        def render(t):
            return sum(a * np.sin(2 * np.pi * f * t + p) for a, f, p in zip(amps, freqs, phases))

        return render
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    spectrum[(freqs < 200) | (freqs > 4000)] = 0
    band = np.fft.irfft(spectrum, n)
    band *= 0.15 / np.sqrt(np.mean(band**2))
    grid = np.arange(n) / SAMPLE_RATE

    def render(t):
        return np.interp(t, grid, band)

    return render


def render_frame(x: float) -> np.ndarray:
    """480 x 240 RGB frame, dark background and a bright square centred at (x * 480, 120)."""
    img = np.full((FRAME_H, FRAME_W, 3), BACKGROUND, dtype=np.uint8)
    cx, cy, half = x * FRAME_W, FRAME_H / 2, BLOB_SIZE / 2
    c0, c1 = max(int(round(cx - half)), 0), min(int(round(cx + half)), FRAME_W)
    r0, r1 = int(cy - half), int(cy + half)
    img[r0:r1, c0:c1] = BLOB
    return img


def generate_synthetic_clip(spec: SceneSpec) -> tuple[WaveformClip, np.ndarray]:
    """Stereo audio under a constant-power pan and the matching (T, H, W, 3) frames."""
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration_s * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    render = _source_renderer(spec, rng, n)
    x = spec.azimuth_at(t)
    theta = x * np.pi / 2
    if spec.itd:
        # far ear lags; the lag grows linearly with distance from the midline
        lag = MAX_ITD_S * np.abs(x - 0.5) * 2
        left_lag = np.where(x > 0.5, lag, 0.0)
        right_lag = np.where(x < 0.5, lag, 0.0)
        left = np.cos(theta) * render(t - left_lag)
        right = np.sin(theta) * render(t - right_lag)
    else:
        s = render(t)
        left, right = np.cos(theta) * s, np.sin(theta) * s
    n_frames = int(round(spec.duration_s * FPS))
    frames = np.stack([render_frame(float(spec.azimuth_at(np.array(i / FPS)))) for i in range(n_frames)])
    clip = WaveformClip.stereo(left, right)
    clip.meta.update(azimuth=spec.azimuth, seed=spec.seed)
    return clip, frames


def stratified_azimuths(n: int, rng: np.random.Generator) -> np.ndarray:
    """One draw per equal-width stratum of [0, 1], in shuffled order."""
    x = (np.arange(n) + rng.uniform(0, 1, n)) / n
    return rng.permutation(x)


# ---------------------------------------------------------------------------
# image helpers
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping; returns float32."""
    img = np.asarray(img, dtype=np.float32)
    H, W = img.shape[:2]
    if (H, W) == (height, width):
        return img.copy()

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(np.float32)

    r0, r1, fr = coords(height, H)
    c0, c1, fc = coords(width, W)
    fr = fr[:, None, None] if img.ndim == 3 else fr[:, None]
    fc = fc[None, :, None] if img.ndim == 3 else fc[None, :]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


@dataclass
class AugmentParams:
    row: int = 0
    col: int = 0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            row=int(rng.integers(0, FRAME_H - CROP_H + 1)),
            col=int(rng.integers(0, FRAME_W - CROP_W + 1)),
            brightness=float(rng.uniform(0.9, 1.1)),
            contrast=float(rng.uniform(0.9, 1.1)),
            saturation=float(rng.uniform(0.9, 1.1)),
        )


def augment_train(frame: np.ndarray, rng: np.random.Generator | None = None, params: AugmentParams | None = None):
    """Random 224 x 448 crop plus brightness/contrast/saturation jitter (float32, 0..255)."""
    if params is None:
        params = AugmentParams.draw(rng)
    img = np.asarray(frame, dtype=np.float32)
    if img.shape[:2] != (FRAME_H, FRAME_W):
        img = resize_bilinear(img, FRAME_H, FRAME_W)
    img = img[params.row : params.row + CROP_H, params.col : params.col + CROP_W]
    img = img * np.float32(params.brightness)
    gray = img.mean(axis=2, keepdims=True)
    img = (img - gray.mean()) * np.float32(params.contrast) + gray.mean()
    gray = img.mean(axis=2, keepdims=True)
    img = gray + (img - gray) * np.float32(params.saturation)
    return np.clip(img, 0, 255).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

REQUIRED_FIELDS = ("clip_id", "audio_path", "frames_dir")


@dataclass
class ClipRecord:
    clip_id: str
    audio_path: Path
    frames_dir: Path
    fps: int = FPS
    duration_s: float = CLIP_SECONDS
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def frame_path(self, index: int) -> Path:
        return self.frames_dir / f"{index:06d}.png"

    @property
    def n_frames(self) -> int:
        return int(round(self.fps * self.duration_s))

    def to_json(self, root: Path) -> dict:
        return {
            "clip_id": self.clip_id,
            "audio_path": str(self.audio_path.relative_to(root)),
            "frames_dir": str(self.frames_dir.relative_to(root)),
            "fps": self.fps,
            "duration_s": self.duration_s,
            "split": self.split,
            **self.extra,
        }


@dataclass
class ClipManifest:
    records: list[ClipRecord] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> "ClipManifest":
        return ClipManifest([r for r in self.records if r.split == name], self.root)


def load_manifest(path: str | Path, check_files: bool = True) -> ClipManifest:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            for key in REQUIRED_FIELDS:
                if key not in obj:
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            split = obj.get("split", "train")
            if split not in ("train", "val", "test"):
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            known = set(REQUIRED_FIELDS) | {"fps", "duration_s", "split"}
            records.append(
                ClipRecord(
                    clip_id=str(obj["clip_id"]),
                    audio_path=root / obj["audio_path"],
                    frames_dir=root / obj["frames_dir"],
                    fps=int(obj.get("fps", FPS)),
                    duration_s=float(obj.get("duration_s", CLIP_SECONDS)),
                    split=split,
                    extra={k: v for k, v in obj.items() if k not in known},
                )
            )
    if not records:
        warnings.warn(f"manifest {path} is empty", stacklevel=2)
    if check_files:
        problems = []
        for r in records:
            if not r.audio_path.is_file():
                problems.append(f"{r.clip_id}: missing audio {r.audio_path}")
            if not r.frames_dir.is_dir():
                problems.append(f"{r.clip_id}: missing frames directory {r.frames_dir}")
                continue
            count = len(list(r.frames_dir.glob("*.png")))
            if abs(count - r.n_frames) > 1:
                problems.append(f"{r.clip_id}: {count} frames, expected {r.n_frames}")
        if problems:
            raise ManifestError("manifest validation failed:\n  " + "\n  ".join(problems))
    return ClipManifest(records, root)


def write_manifest(path: str | Path, records: list[ClipRecord]) -> None:
    path = Path(path)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(path.parent), sort_keys=True) + "\n")


def split_counts(n: int, ratios=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """Floor the val/test shares; the remainder goes to train (64 -> 52/6/6)."""
    val = int(math.floor(n * ratios[1]))
    test = int(math.floor(n * ratios[2]))
    return n - val - test, val, test


def write_synthetic_dataset(
    root: str | Path,
    n_clips: int = 64,
    seed: int = 7,
    ratios=(0.8, 0.1, 0.1),
    itd: bool = False,
    drift_fraction: float = 0.25,
    duration_s: float = CLIP_SECONDS,
    source: str = "tones",
) -> Path:
    """Render ``n_clips`` scenes to WAV + PNG frames and write ``manifest.jsonl``."""
    from .rng import RngStreams

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = RngStreams(seed).stream("synth")
    azimuths = stratified_azimuths(n_clips, rng)
    n_train, n_val, _ = split_counts(n_clips, ratios)
    records = []
    for i, x in enumerate(azimuths):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        end = None
        if rng.uniform() < drift_fraction:
            end = float(np.clip(x + rng.uniform(-0.1, 0.1), 0.0, 1.0))
        spec = SceneSpec(
            azimuth=float(x),
            azimuth_end=end,
            source=source,
            seed=int(rng.integers(0, 2**31)),
            itd=itd,
            duration_s=duration_s,
        )
        clip, frames = generate_synthetic_clip(spec)
        cid = f"clip{i:04d}"
        audio = root / "audio" / f"{cid}.wav"
        fdir = root / "frames" / cid
        audio.parent.mkdir(parents=True, exist_ok=True)
        fdir.mkdir(parents=True, exist_ok=True)
        write_wav(audio, clip.samples)
        for k, frame in enumerate(frames):
            Image.fromarray(frame).save(fdir / f"{k:06d}.png", optimize=False)
        records.append(
            ClipRecord(cid, audio, fdir, FPS, duration_s, split, extra={"azimuth": float(x), "azimuth_end": end})
        )
    write_manifest(root / "manifest.jsonl", records)
    return root / "manifest.jsonl"


# ---------------------------------------------------------------------------
# clip access and training pairs
# ---------------------------------------------------------------------------


class LoadedClip:
    """Audio held in memory (level-normalised); frames decoded on demand."""

    def __init__(self, record: ClipRecord, target_rms: float = 0.1):
        self.record = record
        raw = load_clip(record.audio_path)
        if raw.channels != ("L", "R"):
            raise ValueError(f"{record.clip_id}: expected stereo ground truth")
        self.raw = raw
        self.clip, self.scale = rms_normalize(raw, target_rms)
        self.n_frames = min(record.n_frames, len(list(record.frames_dir.glob("*.png"))))

    @property
    def stereo(self) -> np.ndarray:
        return self.clip.samples

    def frame(self, index: int) -> np.ndarray:
        with Image.open(self.record.frame_path(index)) as im:
            arr = np.asarray(im.convert("RGB"))
        if arr.shape[:2] != (FRAME_H, FRAME_W):
            arr = resize_bilinear(arr, FRAME_H, FRAME_W)
        return arr


def frame_index_for(start_s: float, fps: int, n_frames: int) -> int:
    """Frame nearest the centre of the 0.63 s window starting at ``start_s``."""
    idx = int(math.floor((start_s + SEGMENT_SECONDS / 2) * fps + 1e-9))
    return min(max(idx, 0), n_frames - 1)


def previous_frame_index(index: int, n_frames: int) -> int:
    if n_frames < 2:
        raise ValueError("clip has a single frame; no neighbouring frame for the positive")
    return index - 1 if index > 0 else index + 1


@dataclass
class TrainingPair:
    mono: np.ndarray  # (SEGMENT_SAMPLES,)
    stereo: np.ndarray  # (2, SEGMENT_SAMPLES)
    frame_t: np.ndarray  # (240, 480, 3)
    frame_prev: np.ndarray
    start_s: float
    frame_index: int
    clip_id: str = ""


def sample_training_pair(clip: LoadedClip, rng: np.random.Generator) -> TrainingPair:
    n = clip.stereo.shape[1]
    if n < SEGMENT_SAMPLES + SAMPLE_RATE // clip.record.fps:
        raise ValueError(f"{clip.record.clip_id}: clip too short for a training segment")
    start = int(rng.integers(0, n - SEGMENT_SAMPLES + 1))
    start_s = start / SAMPLE_RATE
    idx = frame_index_for(start_s, clip.record.fps, clip.n_frames)
    prev = previous_frame_index(idx, clip.n_frames)
    stereo = clip.stereo[:, start : start + SEGMENT_SAMPLES]
    return TrainingPair(
        mono=stereo[0] + stereo[1],
        stereo=stereo,
        frame_t=clip.frame(idx),
        frame_prev=clip.frame(prev),
        start_s=start_s,
        frame_index=idx,
        clip_id=clip.record.clip_id,
    )


class ClipPool:
    """Loaded clips of one split; skips clips that are silent or too short."""

    def __init__(self, manifest: ClipManifest, target_rms: float = 0.1):
        self.clips: list[LoadedClip] = []
        for r in manifest:
            try:
                c = LoadedClip(r, target_rms)
            except ValueError as e:
                log.warning("skipping %s: %s", r.clip_id, e)
                continue
            if c.stereo.shape[1] < SEGMENT_SAMPLES + SAMPLE_RATE // r.fps:
                log.warning("skipping %s: shorter than one segment", r.clip_id)
                continue
            self.clips.append(c)

    def __len__(self) -> int:
        return len(self.clips)

    def sample(self, rng: np.random.Generator, n: int) -> list[TrainingPair]:
        picks = rng.integers(0, len(self.clips), size=n)
        return [sample_training_pair(self.clips[i], rng) for i in picks]
