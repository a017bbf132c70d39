import numpy as np
import pytest

from duetdance import metrics
from duetdance.dataset import (DatasetConfig, DatasetManifest, augment_mirror,
                               build_dataset, compute_stats, load_clip,
                               load_stats, save_clip, window_split)
from duetdance.representation import (FEATURE_DIM, DuetClip, decode_features,
                                      normalize)


def _clip(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return DuetClip(features=rng.normal(size=(n, FEATURE_DIM)))


def test_window_split_counts():
    clip = _clip(600)
    windows = window_split(clip, 400, 100)
    assert len(windows) == 3
    assert [w.frames for w in windows] == [400, 400, 400]
    assert np.array_equal(windows[1].features, clip.features[100:500])


def test_window_split_exact_fit():
    assert len(window_split(_clip(400), 400, 100)) == 1


def test_window_split_too_short_is_empty():
    assert window_split(_clip(399), 400, 100) == []


def test_augment_mirror_doubles(skel, sample_clip):
    clips = [sample_clip, sample_clip]
    out = augment_mirror(clips, skel)
    assert len(out) == 4
    assert out[0] is clips[0]


def test_augment_mirror_preserves_contact_frequency(skel, sample_clip):
    out = augment_mirror([sample_clip], skel)
    cf0 = metrics.contact_frequency(decode_features(out[0], skel), skel)
    cf1 = metrics.contact_frequency(decode_features(out[1], skel), skel)
    assert abs(cf0 - cf1) < 1e-9


def test_compute_stats_constant_clip():
    clip = DuetClip(features=np.ones((10, FEATURE_DIM)) * 3.0)
    stats = compute_stats([clip])
    assert np.allclose(stats.mean, 3.0)
    assert np.allclose(stats.std, 1e-8)


def test_compute_stats_normalized_dataset():
    clips = [_clip(50, seed=s) for s in range(4)]
    stats = compute_stats(clips)
    normed = [normalize(c, stats) for c in clips]
    restat = compute_stats(normed)
    assert np.abs(restat.mean).max() < 1e-6
    assert np.abs(restat.std - 1.0).max() < 1e-6


def test_compute_stats_order_invariant():
    clips = [_clip(30, seed=s) for s in range(3)]
    s1 = compute_stats(clips)
    s2 = compute_stats(clips[::-1])
    assert np.allclose(s1.mean, s2.mean)
    assert np.allclose(s1.std, s2.std)


def test_clip_archive_roundtrip(tmp_path, sample_clip):
    music = np.random.default_rng(0).normal(size=(sample_clip.frames, 92))
    save_clip(tmp_path / "c", sample_clip, music=music, metadata={"beats": [0.0, 0.5]})
    clip, m, meta = load_clip(tmp_path / "c")
    assert clip.frames == sample_clip.frames
    assert np.abs(clip.features - sample_clip.features).max() < 1e-6
    assert m.shape == music.shape
    assert meta["beats"] == [0.0, 0.5]


def test_stats_archive_roundtrip(tmp_path):
    stats = compute_stats([_clip(40, seed=1)])
    from duetdance.dataset import save_stats
    save_stats(tmp_path / "stats", stats)
    loaded = load_stats(tmp_path / "stats")
    assert np.array_equal(loaded.mean, stats.mean)
    assert np.array_equal(loaded.std, stats.std)


@pytest.mark.slow
def test_build_small_dataset(tmp_path, skel):
    cfg = DatasetConfig(seed=1, n_train_bases=2, n_test_bases=1, duration=17.0)
    manifest = build_dataset(cfg, skel, tmp_path)
    # 2 bases x 2 windows x mirror = 8 train; 1 base x 2 windows = 2 test
    assert len(manifest.ids("train")) == 8
    assert len(manifest.ids("test")) == 2
    reloaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert reloaded.ids("train") == manifest.ids("train")
    clip, music, meta = load_clip(tmp_path / "clips" / "train_0000")
    assert clip.frames == 400
    assert music.shape == (400, 92)
    assert meta["split"] == "train"
    stats = load_stats(tmp_path / "stats")
    assert stats.mean.shape == (FEATURE_DIM,)
