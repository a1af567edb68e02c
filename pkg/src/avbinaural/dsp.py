"""Signal-processing kernels: STFT/ISTFT, channel algebra, RMS levels, WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 16000
TARGET_RMS = 0.1


class SilentInputError(ValueError):
    """The clip has (numerically) no energy and cannot be level-normalised."""


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    center_pad: bool = True
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.win_length > self.fft_size:
            raise ValueError(f"window of {self.win_length} samples exceeds fft_size {self.fft_size}")
        if self.hop_length < 1:
            raise ValueError("hop must be at least one sample")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        """Periodic Hann of ``win_length`` zero-padded (centred) to ``fft_size``."""
        w = get_window("hann", self.win_length, fftbins=True)
        left = (self.fft_size - self.win_length) // 2
        return np.pad(w, (left, self.fft_size - self.win_length - left))

    def num_frames(self, n_samples: int) -> int:
        if self.center_pad:
            return n_samples // self.hop_length + 1
        return (n_samples - self.fft_size) // self.hop_length + 1


DEFAULT_STFT = StftConfig()


@dataclass
class WaveformClip:
    """Audio samples shaped (channels, length) with named channels from {L, R, M}."""

    samples: np.ndarray
    channels: tuple[str, ...]
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if len(self.channels) != self.samples.shape[0]:
            raise ValueError(f"{len(self.channels)} channel names for {self.samples.shape[0]} channels")
        if not set(self.channels) <= {"L", "R", "M"}:
            raise ValueError(f"unknown channel names {self.channels}")

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def channel(self, name: str) -> np.ndarray:
        if name not in self.channels:
            raise ValueError(f"clip has no {name!r} channel (has {self.channels})")
        return self.samples[self.channels.index(name)]

    @classmethod
    def stereo(cls, left, right, sample_rate: int = SAMPLE_RATE) -> "WaveformClip":
        return cls(np.stack([np.asarray(left), np.asarray(right)]), ("L", "R"), sample_rate)


def stft(x: np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Complex spectrogram shaped (freq_bins, frames); works on (..., T) input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ValueError("stft: empty input")
    n, hop = cfg.fft_size, cfg.hop_length
    if cfg.center_pad:
        pad = n // 2
        mode = "reflect" if x.shape[-1] > pad else "constant"
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        x = np.pad(x, widths, mode=mode)
    if x.shape[-1] < n:
        raise ValueError(f"stft: input of {x.shape[-1]} samples shorter than fft_size {n}")
    frames = np.lib.stride_tricks.sliding_window_view(x, n, axis=-1)[..., ::hop, :]
    spec = np.fft.rfft(frames * cfg.window(), axis=-1)
    return np.swapaxes(spec, -1, -2)


def istft(spec: np.ndarray, cfg: StftConfig = DEFAULT_STFT, out_len: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`.

    Each output sample is the sum of windowed frames divided by the summed squared
    window at that sample; samples with window power below 1e-8 come out as 0.
    """
    spec = np.asarray(spec)
    if spec.shape[-2] != cfg.freq_bins:
        raise ValueError(f"istft: expected {cfg.freq_bins} bins, got {spec.shape[-2]}")
    n, hop = cfg.fft_size, cfg.hop_length
    win = cfg.window()
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=n, axis=-1) * win
    n_frames = frames.shape[-2]
    total = n + hop * (n_frames - 1)
    lead = frames.shape[:-2]
    y = np.zeros(lead + (total,))
    wsum = np.zeros(total)
    for k in range(n_frames):
        y[..., k * hop : k * hop + n] += frames[..., k, :]
        wsum[k * hop : k * hop + n] += win * win
    ok = wsum >= 1e-8
    y = np.where(ok, y / np.where(ok, wsum, 1.0), 0.0)
    if cfg.center_pad:
        y = y[..., n // 2 :]
    if out_len is None:
        out_len = hop * (n_frames - 1) if cfg.center_pad else total
    if y.shape[-1] >= out_len:
        return y[..., :out_len]
    return np.concatenate([y, np.zeros(lead + (out_len - y.shape[-1],))], axis=-1)


def make_mono(clip: WaveformClip) -> WaveformClip:
    """Mono mixture as the plain sum L + R."""
    mono = clip.channel("L") + clip.channel("R")
    return WaveformClip(mono[None, :], ("M",), clip.sample_rate)


def difference_spectrogram(clip: WaveformClip, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    return stft(clip.channel("L") - clip.channel("R"), cfg)


def recover_channels(mono: np.ndarray, diff: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if np.shape(mono) != np.shape(diff):
        raise ValueError(f"recover_channels: mono {np.shape(mono)} vs diff {np.shape(diff)}")
    return (mono + diff) / 2, (mono - diff) / 2


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def rms_normalize(clip: WaveformClip, target_rms: float = TARGET_RMS) -> tuple[WaveformClip, float]:
    """Scale every channel so the mono mixture has ``target_rms``; returns (clip, scale)."""
    if "M" in clip.channels:
        mono = clip.channel("M")
    else:
        mono = clip.channel("L") + clip.channel("R")
    level = rms(mono)
    if level <= 1e-8:
        raise SilentInputError(f"clip RMS {level:.3g} is below 1e-8")
    s = target_rms / level
    if abs(s - 1.0) < 1e-12:
        s = 1.0
    return WaveformClip(clip.samples * s, clip.channels, clip.sample_rate, dict(clip.meta)), s


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM)
# ---------------------------------------------------------------------------


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Return samples shaped (channels, length) in [-1, 1) and the sample rate."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getsampwidth() != 2:
                raise ValueError(f"{path}: only 16-bit PCM is supported")
            n_ch, sr, n = f.getnchannels(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: unreadable WAV file ({exc or 'truncated'})") from None
    data = np.frombuffer(raw, dtype="<i2").reshape(-1, n_ch).T
    return data.astype(np.float64) / 32768.0, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    samples = np.atleast_2d(samples)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(samples.shape[0])
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.T.tobytes())


def load_clip(path: str | Path) -> WaveformClip:
    data, sr = read_wav(path)
    if sr != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {sr} Hz, expected {SAMPLE_RATE} Hz (no resampling)")
    names = ("L", "R") if data.shape[0] == 2 else ("M",)
    return WaveformClip(data, names, sr)
