import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avbinaural.data import (
    BACKGROUND,
    BLOB,
    CROP_H,
    CROP_W,
    FRAME_H,
    FRAME_W,
    SEGMENT_SAMPLES,
    AugmentParams,
    ClipPool,
    ManifestError,
    SceneSpec,
    augment_train,
    frame_index_for,
    generate_synthetic_clip,
    load_manifest,
    previous_frame_index,
    render_frame,
    resize_bilinear,
    sample_training_pair,
    split_counts,
    stratified_azimuths,
    write_synthetic_dataset,
)
from avbinaural.dsp import difference_spectrogram, make_mono, recover_channels, stft


def _scene(x, **kw):
    kw.setdefault("duration_s", 1.0)
    return generate_synthetic_clip(SceneSpec(azimuth=x, seed=11, **kw))


# --- generator -------------------------------------------------------------


def test_midpoint_pan_is_symmetric():
    clip, frames = _scene(0.5)
    left, right = clip.samples
    np.testing.assert_allclose(left, right, atol=1e-12)
    np.testing.assert_allclose(np.abs(difference_spectrogram(clip)), 0, atol=1e-9)
    # blob centred horizontally and vertically
    cols = np.where(frames[0, 120, :, 0] == BLOB)[0]
    rows = np.where(frames[0, :, 240, 0] == BLOB)[0]
    assert cols.mean() == pytest.approx(239.5, abs=0.5)
    assert rows.mean() == pytest.approx(119.5, abs=0.5)


def test_full_left_pan():
    clip, _ = _scene(0.0)
    left, right = clip.samples
    assert np.max(np.abs(right)) == 0.0
    np.testing.assert_allclose(difference_spectrogram(clip), stft(left), atol=1e-12)


@pytest.mark.parametrize("x", [0.0, 0.13, 0.5, 0.77, 1.0])
def test_total_power_invariant(x):
    clip, _ = _scene(x)
    ref, _ = _scene(0.0)  # all energy in L = the dry source itself
    s2 = np.sum(ref.samples[0] ** 2)
    assert np.sum(clip.samples**2) == pytest.approx(s2, abs=1e-6)


@pytest.mark.parametrize("x", [0.0, 0.3, 0.5, 1.0])
@pytest.mark.parametrize("itd", [False, True])
def test_generator_is_its_own_oracle(x, itd):
    clip, _ = _scene(x, itd=itd)
    mono = stft(make_mono(clip).samples[0])
    left, right = recover_channels(mono, difference_spectrogram(clip))
    np.testing.assert_allclose(left, stft(clip.samples[0]), atol=1e-6)
    np.testing.assert_allclose(right, stft(clip.samples[1]), atol=1e-6)


def test_left_dominance_monotone():
    xs = np.round(np.arange(11) * 0.1, 10)
    ratio = []
    for x in xs:
        clip, _ = _scene(float(x))
        left, right = np.abs(clip.samples).sum(axis=1)
        if x < 0.5:
            assert left > right
        ratio.append(left - right)
    assert np.all(np.diff(ratio) < 0)


def test_generator_deterministic_and_drifts():
    a, fa = _scene(0.2, azimuth_end=0.8)
    b, fb = _scene(0.2, azimuth_end=0.8)
    assert np.array_equal(a.samples, b.samples) and np.array_equal(fa, fb)
    first = np.where(fa[0, 120, :, 0] == BLOB)[0].mean()
    last = np.where(fa[-1, 120, :, 0] == BLOB)[0].mean()
    assert last > first + 200
    assert fa.shape == (10, FRAME_H, FRAME_W, 3)


def test_render_frame_pixels():
    img = render_frame(0.25)
    assert img.dtype == np.uint8 and img.shape == (240, 480, 3)
    assert set(np.unique(img)) == {BACKGROUND, BLOB}
    assert np.sum(img[..., 0] == BLOB) == 40 * 40


def test_scene_rejects_bad_azimuth():
    with pytest.raises(ValueError):
        SceneSpec(azimuth=1.5)
    with pytest.raises(ValueError):
        SceneSpec(azimuth=0.5, source="violin")


def test_itd_delays_far_ear():
    clip, _ = _scene(0.1, itd=True, source="noise")
    left, right = clip.samples
    lags = np.arange(-20, 21)
    xc = [np.dot(left[40:-40], np.roll(right, -k)[40:-40]) for k in lags]
    assert lags[int(np.argmax(xc))] > 0  # right ear (far side) hears it later


# --- sampling helpers ------------------------------------------------------


def test_frame_index_examples():
    assert frame_index_for(3.0, 10, 100) == 33
    assert frame_index_for(0.0, 10, 100) == 3
    assert previous_frame_index(3, 100) == 2
    assert previous_frame_index(0, 100) == 1
    with pytest.raises(ValueError):
        previous_frame_index(0, 1)


def test_split_counts():
    assert split_counts(64) == (52, 6, 6)
    assert split_counts(10) == (8, 1, 1)


def test_stratified_deciles_populated(rng):
    x = stratified_azimuths(64, rng)
    counts = np.bincount(np.minimum((x * 10).astype(int), 9), minlength=10)
    assert counts.min() >= 1 and 0 <= x.min() and x.max() <= 1


# --- images ----------------------------------------------------------------


def test_resize_identity_and_constant(rng):
    img = rng.uniform(0, 255, (30, 40, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize_bilinear(img, 30, 40), img)
    const = np.full((17, 23, 3), 77.0)
    np.testing.assert_allclose(resize_bilinear(const, 240, 480), 77.0, atol=1e-4)


def test_resize_half_pixel_centres():
    # upsampling [0, 10] by 2 with half-pixel centres: sources -0.25, 0.25, 0.75, 1.25
    row = np.array([[0.0, 10.0]])
    out = resize_bilinear(row, 1, 4)
    np.testing.assert_allclose(out[0], [0.0, 2.5, 7.5, 10.0])


def test_augment_identity_is_top_left_crop(rng):
    frame = rng.integers(0, 256, (240, 480, 3)).astype(np.uint8)
    out = augment_train(frame, params=AugmentParams())
    assert out.shape == (CROP_H, CROP_W, 3)
    np.testing.assert_allclose(out, frame[:224, :448], atol=1e-4)


def test_augment_brightness_scales_mean(rng):
    frame = rng.integers(20, 200, (240, 480, 3)).astype(np.uint8)
    base = augment_train(frame, params=AugmentParams())
    bright = augment_train(frame, params=AugmentParams(brightness=1.1))
    assert bright.mean() == pytest.approx(1.1 * base.mean(), rel=1e-5)


def test_augment_clamps_and_resizes(rng):
    frame = np.full((120, 240, 3), 250, dtype=np.uint8)
    out = augment_train(frame, params=AugmentParams(brightness=1.1))
    assert out.shape == (224, 448, 3) and out.max() == 255.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_draw_ranges(seed):
    p = AugmentParams.draw(np.random.default_rng(seed))
    assert 0 <= p.row <= 16 and 0 <= p.col <= 32
    for s in (p.brightness, p.contrast, p.saturation):
        assert 0.9 <= s <= 1.1


# --- manifests -------------------------------------------------------------


def test_empty_manifest_warns(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("")
    with pytest.warns(UserWarning, match="empty"):
        m = load_manifest(path)
    assert len(m) == 0


def test_manifest_missing_field_names_line_and_field(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"clip_id": "a", "audio_path": "a.wav", "frames_dir": "a"}) + "\n"
                    + json.dumps({"clip_id": "b", "frames_dir": "b"}) + "\n")
    with pytest.raises(ManifestError, match=r":2: missing field 'audio_path'"):
        load_manifest(path, check_files=False)


def test_manifest_bad_json_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(ManifestError, match=":1: invalid JSON"):
        load_manifest(path)


def test_manifest_lists_every_missing_file(tmp_path):
    path = tmp_path / "m.jsonl"
    lines = [json.dumps({"clip_id": c, "audio_path": f"{c}.wav", "frames_dir": c}) for c in ("a", "b")]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    msg = str(err.value)
    for c in ("a", "b"):
        assert f"{c}: missing audio" in msg and f"{c}: missing frames" in msg


def test_synthetic_dataset_round_trip(tiny_dataset):
    m = load_manifest(tiny_dataset)
    assert len(m) == 10
    assert [len(m.split(s)) for s in ("train", "val", "test")] == [8, 1, 1]
    r = m.records[0]
    assert r.frame_path(42).name == "000042.png"
    assert len(list(r.frames_dir.glob("*.png"))) == 20


def test_frame_count_mismatch_detected(tiny_dataset, tmp_path):
    import shutil

    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset.parent, root)
    frames = sorted((root / "frames" / "clip0000").glob("*.png"))
    for f in frames[-3:]:
        f.unlink()
    with pytest.raises(ManifestError, match="clip0000: 17 frames, expected 20"):
        load_manifest(root / "manifest.jsonl")


def test_synth_is_byte_deterministic(tmp_path):
    a = write_synthetic_dataset(tmp_path / "a", n_clips=3, seed=5, duration_s=1.0)
    b = write_synthetic_dataset(tmp_path / "b", n_clips=3, seed=5, duration_s=1.0)
    files_a = sorted(p.relative_to(a.parent) for p in a.parent.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b.parent) for p in b.parent.rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (a.parent / f).read_bytes() == (b.parent / f).read_bytes()


# --- training pairs --------------------------------------------------------


def test_training_pairs(tiny_dataset):
    pool = ClipPool(load_manifest(tiny_dataset).split("train"))
    rng = np.random.default_rng(0)
    for p in pool.sample(rng, 20):
        assert p.stereo.shape == (2, SEGMENT_SAMPLES)
        np.testing.assert_array_equal(p.mono, p.stereo[0] + p.stereo[1])
        assert p.frame_index == frame_index_for(p.start_s, 10, 20)
        assert p.frame_t.shape == (240, 480, 3)
    clip = pool.clips[0]
    mono = clip.stereo[0] + clip.stereo[1]
    assert np.sqrt(np.mean(mono**2)) == pytest.approx(0.1, rel=1e-9)


def test_segment_starts_uniform():
    clip, _ = generate_synthetic_clip(SceneSpec(azimuth=0.3, seed=1))

    class Fake:
        # stands in for LoadedClip without touching the disk
        stereo = clip.samples
        n_frames = 100

        class record:
            fps = 10
            clip_id = "fake"

        @staticmethod
        def frame(i):
            return np.zeros((1,), np.uint8)

    rng = np.random.default_rng(0)
    starts = np.array([sample_training_pair(Fake, rng).start_s for _ in range(10_000)])
    assert starts.min() >= 0 and starts.max() <= 10 - 0.63
    hist = np.histogram(starts, bins=10, range=(0, 10 - 0.63))[0]
    assert hist.max() / hist.min() < 1.3


def test_too_short_clip_skipped(tmp_path, caplog):
    m = write_synthetic_dataset(tmp_path / "short", n_clips=2, seed=1, duration_s=0.6, ratios=(1.0, 0.0, 0.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pool = ClipPool(load_manifest(m, check_files=False))
    assert len(pool) == 0
    assert "shorter than one segment" in caplog.text
