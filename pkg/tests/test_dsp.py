import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbinaural.dsp import (
    DEFAULT_STFT,
    SilentInputError,
    StftConfig,
    WaveformClip,
    difference_spectrogram,
    istft,
    load_clip,
    make_mono,
    recover_channels,
    rms,
    rms_normalize,
    stft,
    write_wav,
)


def naive_stft(x, cfg):
    """Direct DFT of each centred, reflect-padded, windowed frame."""
    n, hop = cfg.fft_size, cfg.hop_length
    xp = np.pad(x, n // 2, mode="reflect")
    win = cfg.window()
    frames = cfg.num_frames(len(x))
    k = np.arange(cfg.freq_bins)[:, None]
    m = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * m / n)
    return np.stack([basis @ (xp[t * hop : t * hop + n] * win) for t in range(frames)], axis=1)


def test_frame_geometry():
    assert DEFAULT_STFT.win_length == 400
    assert DEFAULT_STFT.hop_length == 160
    assert DEFAULT_STFT.freq_bins == 257
    assert stft(np.zeros(10080)).shape == (257, 64)


def test_window_is_periodic_hann_centred():
    w = DEFAULT_STFT.window()
    assert w.shape == (512,)
    assert np.all(w[:56] == 0) and np.all(w[456:] == 0)
    core = w[56:456]
    ref = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    np.testing.assert_allclose(core, ref, atol=1e-15)


def test_stft_matches_direct_dft(rng):
    x = rng.standard_normal(2000)
    np.testing.assert_allclose(stft(x), naive_stft(x, DEFAULT_STFT), atol=1e-9)


def test_impulse_at_frame_centre_has_flat_magnitude():
    x = np.zeros(4000)
    x[160 * 10] = 1.0  # centre of frame 10
    S = stft(x)
    np.testing.assert_allclose(np.abs(S[:, 10]), 1.0, atol=1e-12)


def test_istft_roundtrip_interior(rng):
    for _ in range(20):
        x = rng.standard_normal(10080)
        y = istft(stft(x), out_len=len(x))
        assert np.max(np.abs(y[400:-400] - x[400:-400])) < 1e-10


def test_istft_pads_when_asked_for_more_samples(rng):
    x = rng.standard_normal(1000)
    y = istft(stft(x), out_len=2000)
    assert y.shape == (2000,)


def test_stft_rejects_empty():
    with pytest.raises(ValueError):
        stft(np.zeros(0))


def test_istft_wrong_bins():
    with pytest.raises(ValueError):
        istft(np.zeros((100, 5), complex))


def test_config_rejects_oversized_window():
    with pytest.raises(ValueError):
        StftConfig(window_ms=40.0, fft_size=512)


def test_mono_and_difference_algebra(rng):
    left, right = rng.standard_normal(5000), rng.standard_normal(5000)
    clip = WaveformClip.stereo(left, right)
    mono = make_mono(clip)
    assert mono.channels == ("M",)
    np.testing.assert_allclose(mono.samples[0], left + right)
    sm, sd = stft(mono.samples[0]), difference_spectrogram(clip)
    rl, rr = recover_channels(sm, sd)
    assert np.max(np.abs(rl - stft(left))) < 1e-9
    assert np.max(np.abs(rr - stft(right))) < 1e-9


def test_recover_channels_shape_mismatch():
    with pytest.raises(ValueError):
        recover_channels(np.zeros((3, 4)), np.zeros((3, 5)))


def test_zero_difference_gives_half_mono(rng):
    m = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
    l, r = recover_channels(m, np.zeros_like(m))
    np.testing.assert_array_equal(l, m / 2)
    np.testing.assert_array_equal(r, m / 2)


def test_rms_normalize_hits_target(rng):
    clip = WaveformClip.stereo(rng.standard_normal(3000) * 3, rng.standard_normal(3000))
    out, scale = rms_normalize(clip, 0.1)
    assert rms(out.channel("L") + out.channel("R")) == pytest.approx(0.1, rel=1e-12)
    np.testing.assert_allclose(out.samples, clip.samples * scale)


def test_rms_normalize_unity_when_already_at_target():
    x = np.ones(100) * 0.05
    clip = WaveformClip.stereo(x, x)  # mono = 0.1 everywhere
    out, scale = rms_normalize(clip, 0.1)
    assert scale == 1.0
    np.testing.assert_array_equal(out.samples, clip.samples)


def test_silent_clip_rejected():
    with pytest.raises(SilentInputError):
        rms_normalize(WaveformClip.stereo(np.zeros(100), np.zeros(100)))


def test_waveform_clip_validation():
    with pytest.raises(ValueError):
        WaveformClip(np.zeros((2, 10)), ("L",))


def test_wav_roundtrip(tmp_path, rng):
    x = rng.uniform(-0.5, 0.5, (2, 1600))
    write_wav(tmp_path / "a.wav", x)
    clip = load_clip(tmp_path / "a.wav")
    assert clip.channels == ("L", "R")
    assert np.max(np.abs(clip.samples - x)) <= 0.5 / 32768 + 1e-12


def test_wrong_sample_rate_rejected(tmp_path):
    write_wav(tmp_path / "b.wav", np.zeros((1, 100)), sample_rate=8000)
    with pytest.raises(ValueError, match="sample rate"):
        load_clip(tmp_path / "b.wav")


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=700, max_value=4000), st.integers(min_value=0, max_value=2**31))
def test_roundtrip_property(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = istft(stft(x), out_len=n)
    assert np.max(np.abs(y[300:-300] - x[300:-300])) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31))
def test_stft_is_linear(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal(1200), r.standard_normal(1200)
    c = r.standard_normal()
    np.testing.assert_allclose(stft(a + c * b), stft(a) + c * stft(b), atol=1e-9)
