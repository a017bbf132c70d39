import numpy as np
import pytest
from scipy.io import wavfile

from duetdance.errors import DuetError
from duetdance.music import (MUSIC_DIM, SAMPLE_RATE, AudioClip,
                             detect_music_beats, extract_features, load_audio,
                             synth_click_track)


def test_load_silence_wav(tmp_path):
    path = tmp_path / "silence.wav"
    wavfile.write(path, SAMPLE_RATE, np.zeros(SAMPLE_RATE, dtype=np.int16))
    clip = load_audio(path)
    assert clip.sample_rate == SAMPLE_RATE
    assert clip.samples.shape[0] == SAMPLE_RATE
    assert np.abs(clip.samples).max() == 0.0


def test_load_pcm16_fullscale_sine(tmp_path):
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    sine = np.sin(2 * np.pi * 220.0 * t)
    data = np.round(sine * 32767).astype(np.int16)
    path = tmp_path / "sine.wav"
    wavfile.write(path, SAMPLE_RATE, data)
    clip = load_audio(path)
    assert abs(clip.samples.max() - 1.0) <= 1.0 / 32768


def test_load_resamples_48k(tmp_path):
    n = 48_000
    path = tmp_path / "noise48k.wav"
    rng = np.random.default_rng(0)
    wavfile.write(path, 48_000, (rng.normal(size=n) * 0.1).astype(np.float32))
    clip = load_audio(path)
    expected = n * SAMPLE_RATE / 48_000
    assert abs(clip.samples.shape[0] - expected) <= 1


def test_load_stereo_averaged(tmp_path):
    data = np.zeros((1000, 2), dtype=np.float32)
    data[:, 0] = 0.5
    data[:, 1] = -0.5
    path = tmp_path / "stereo.wav"
    wavfile.write(path, SAMPLE_RATE, data)
    clip = load_audio(path)
    assert np.abs(clip.samples).max() < 1e-7


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "not_audio.wav"
    path.write_bytes(b"this is not a wav file at all")
    with pytest.raises(DuetError) as exc:
        load_audio(path)
    assert exc.value.code == "unsupported-audio"


def test_feature_shape_and_alignment():
    audio = AudioClip(samples=np.zeros(4 * SAMPLE_RATE))
    feats = extract_features(audio, 120)
    assert feats.frames.shape == (120, MUSIC_DIM)


def test_features_on_silence():
    audio = AudioClip(samples=np.zeros(2 * SAMPLE_RATE))
    feats = extract_features(audio, 60)
    assert np.all(np.isfinite(feats.frames))
    chroma = feats.frames[:, 80:]
    # uniform after the energy floor
    assert np.abs(chroma - 1.0 / 12).max() < 1e-9
    assert np.allclose(chroma.sum(axis=1), 1.0)


def test_chroma_pitch_class_of_a4():
    t = np.arange(2 * SAMPLE_RATE) / SAMPLE_RATE
    audio = AudioClip(samples=0.5 * np.sin(2 * np.pi * 440.0 * t))
    feats = extract_features(audio, 60)
    chroma = feats.frames[:, 80:]
    hits = (chroma.argmax(axis=1) == 9).mean()
    assert hits > 0.95


def test_features_deterministic():
    rng = np.random.default_rng(3)
    samples = rng.normal(size=2 * SAMPLE_RATE) * 0.1
    a = extract_features(AudioClip(samples=samples), 50).frames
    b = extract_features(AudioClip(samples=samples.copy()), 50).frames
    assert np.array_equal(a, b)


def test_features_too_short():
    audio = AudioClip(samples=np.zeros(SAMPLE_RATE))
    with pytest.raises(DuetError) as exc:
        extract_features(audio, 31)
    assert exc.value.code == "audio-too-short"


def test_click_track_beat_times():
    audio, beats = synth_click_track(120.0, 4.0, seed=0)
    assert np.allclose(beats, np.arange(0, 4.0, 0.5))
    assert audio.samples.shape[0] == 4 * SAMPLE_RATE


def test_click_track_deterministic():
    a1, _ = synth_click_track(97.0, 3.0, seed=5)
    a2, _ = synth_click_track(97.0, 3.0, seed=5)
    assert np.array_equal(a1.samples, a2.samples)


def test_click_track_bad_bpm():
    with pytest.raises(DuetError) as exc:
        synth_click_track(30.0, 4.0, seed=0)
    assert exc.value.code == "bad-bpm"


def test_beat_detection_recovers_clicks():
    for bpm in (90.0, 120.0, 150.0):
        audio, truth = synth_click_track(bpm, 8.0, seed=1)
        detected = detect_music_beats(audio)
        assert detected.shape[0] > 0
        assert np.all(np.diff(detected) > 0)
        hits = 0
        for tb in truth:
            if np.abs(detected - tb).min() <= 0.034:
                hits += 1
        assert hits / truth.shape[0] >= 0.9


def test_beat_detection_silence_empty():
    audio = AudioClip(samples=np.zeros(2 * SAMPLE_RATE))
    assert detect_music_beats(audio).shape[0] == 0
