import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duetdance.errors import DuetError
from duetdance.representation import (CONTACTS, FEATURE_DIM, PERSON_DIM,
                                      DuetClip, FeatureStats, canonicalize,
                                      decode_features, denormalize,
                                      detect_foot_contacts, encode_features,
                                      mirror_swap, normalize, person_slice)
from duetdance.skeleton import default_skeleton

from conftest import make_motion


def world_error(m1, m2, skel):
    p1a, p1b = m1.world_positions(skel)
    p2a, p2b = m2.world_positions(skel)
    return max(np.abs(p1a - p2a).max(), np.abs(p1b - p2b).max())


# --- canonicalize ---------------------------------------------------------

def test_canonicalize_puts_a_at_origin_facing_z(skel, sample_motion):
    canon = canonicalize(sample_motion)
    assert np.linalg.norm(canon.root_pos_a[0]) < 1e-9
    forward = canon.root_rot_a[0] @ [0, 0, 1]
    assert forward[2] > 0
    assert abs(forward[0]) < 1e-9


def test_canonicalize_identity_on_canonical(skel, sample_motion):
    canon = canonicalize(sample_motion)
    again = canonicalize(canon)
    assert np.array_equal(again.root_pos_a, canon.root_pos_a)
    assert np.array_equal(again.root_rot_a, canon.root_rot_a)
    assert np.array_equal(again.root_pos_b, canon.root_pos_b)
    assert np.array_equal(again.local_rot_b, canon.local_rot_b)


def test_canonicalize_translation_invariance(skel, sample_motion):
    canon = canonicalize(sample_motion)
    shifted = canon.copy()
    shifted.root_pos_a = shifted.root_pos_a + np.array([5.0, 0.0, 5.0])
    shifted.root_pos_b = shifted.root_pos_b + np.array([5.0, 0.0, 5.0])
    back = canonicalize(shifted)
    assert np.abs(back.root_pos_a - canon.root_pos_a).max() < 1e-9
    assert np.abs(back.root_pos_b - canon.root_pos_b).max() < 1e-9


def test_canonicalize_preserves_distances(skel, sample_motion):
    canon = canonicalize(sample_motion)
    d_before = np.linalg.norm(sample_motion.root_pos_a - sample_motion.root_pos_b, axis=1)
    d_after = np.linalg.norm(canon.root_pos_a - canon.root_pos_b, axis=1)
    assert np.abs(d_before - d_after).max() < 1e-9
    e_before = world_error(sample_motion, sample_motion, skel)  # zero, sanity
    assert e_before == 0.0
    pa, pb = sample_motion.world_positions(skel)
    ca, cb = canon.world_positions(skel)
    pair_before = np.linalg.norm(pa[:, :, None, :] - pb[:, None, :, :], axis=-1)
    pair_after = np.linalg.norm(ca[:, :, None, :] - cb[:, None, :, :], axis=-1)
    assert np.abs(pair_before - pair_after).max() < 1e-9


def test_canonicalize_degenerate_facing(skel, sample_motion):
    bad = sample_motion.copy()
    # rotate A's frame-0 orientation so its forward axis is vertical
    tilt = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])  # +90 deg about X
    bad.root_rot_a = bad.root_rot_a.copy()
    bad.root_rot_a[0] = tilt
    with pytest.raises(DuetError) as exc:
        canonicalize(bad)
    assert exc.value.code == "degenerate-facing"


# --- encode / decode ------------------------------------------------------

def test_encode_width_and_contacts(skel, sample_clip):
    assert sample_clip.features.shape[1] == FEATURE_DIM
    for p in (0, 1):
        contacts = sample_clip.features[:, person_slice(p)][:, CONTACTS]
        assert set(np.unique(contacts)) <= {0.0, 1.0}


def test_encode_requires_canonical(skel, sample_motion):
    with pytest.raises(DuetError) as exc:
        encode_features(sample_motion, skel)
    assert exc.value.code == "not-canonical"


def test_encode_static_pose_zero_velocity(skel, sample_motion):
    canon = canonicalize(sample_motion)
    static = canon.copy()
    for name in ("root_pos_a", "root_rot_a", "local_rot_a",
                 "root_pos_b", "root_rot_b", "local_rot_b"):
        arr = getattr(static, name)
        setattr(static, name, np.repeat(arr[:1], arr.shape[0], axis=0))
    clip = encode_features(static, skel)
    a = clip.features[:, person_slice(0)]
    assert np.abs(a[:, 0:3]).max() == 0.0          # t-delta
    assert np.abs(a[:, 198:264]).max() == 0.0      # joint velocities


def test_relational_offset_definition(skel, sample_motion):
    canon = canonicalize(sample_motion)
    clip = encode_features(canon, skel)
    t_eps = clip.features[:, person_slice(1)][:, 0:3]
    assert np.allclose(t_eps, canon.root_pos_b - canon.root_pos_a, atol=1e-12)


def test_roundtrip_world_error(skel):
    for seed in (11, 12):
        motion = make_motion(seed=seed, profile=0.5, skel=skel)[0]
        canon = canonicalize(motion)
        clip = encode_features(canon, skel)
        decoded = decode_features(clip, skel)
        assert world_error(canon, decoded, skel) < 1e-3


def test_decode_zero_deltas_keeps_a_at_origin(skel, sample_clip):
    feats = sample_clip.features.copy()
    feats[:, 0:3] = 0.0
    decoded = decode_features(DuetClip(features=feats), skel)
    assert np.abs(decoded.root_pos_a).max() == 0.0


def test_decode_constant_offset(skel, sample_clip):
    feats = sample_clip.features.copy()
    feats[:, PERSON_DIM:PERSON_DIM + 3] = np.array([0.0, 2.0, 0.0])
    decoded = decode_features(DuetClip(features=feats), skel)
    d = decoded.root_pos_b - decoded.root_pos_a
    assert np.allclose(d, [0.0, 2.0, 0.0])


def test_decode_normalized_requires_stats(skel, sample_clip):
    stats = FeatureStats(mean=np.zeros(FEATURE_DIM), std=np.ones(FEATURE_DIM))
    norm = normalize(sample_clip, stats)
    with pytest.raises(DuetError) as exc:
        decode_features(norm, skel)
    assert exc.value.code == "missing-stats"
    decoded = decode_features(norm, skel, stats=stats)
    assert world_error(decode_features(sample_clip, skel), decoded, skel) < 1e-9


# --- foot contacts --------------------------------------------------------

def test_contacts_stationary_feet():
    pos = np.zeros((10, 4, 3))
    assert np.all(detect_foot_contacts(pos) == 1.0)


def test_contacts_fast_feet():
    t = np.arange(10) / 30.0
    pos = np.zeros((10, 4, 3))
    pos[:, :, 0] = t[:, None] * 1.0  # 1 m/s
    assert np.all(detect_foot_contacts(pos) == 0.0)


def test_contacts_threshold_is_strict():
    # unit steps with fps as the scale keep the speed product exact
    pos = np.zeros((10, 4, 3))
    pos[:, :, 0] = np.arange(10.0)[:, None]
    assert np.all(detect_foot_contacts(pos, fps=0.15) == 0.0)  # speed == 0.15
    assert np.all(detect_foot_contacts(pos, fps=0.1499) == 1.0)


def test_contacts_frame0_copies_frame1():
    pos = np.zeros((5, 4, 3))
    pos[1:, :, 0] = 1.0  # jump between frames 0->1, then static
    c = detect_foot_contacts(pos)
    assert np.all(c[0] == c[1])


# --- mirror swap ----------------------------------------------------------

def test_mirror_swap_involution(skel, sample_clip):
    twice = mirror_swap(mirror_swap(sample_clip, skel), skel)
    d1 = decode_features(sample_clip, skel)
    d2 = decode_features(twice, skel)
    assert world_error(d1, d2, skel) < 1e-3


def test_mirror_swap_exchanges_labels(skel, sample_clip):
    swapped = mirror_swap(sample_clip, skel)
    orig = decode_features(sample_clip, skel)
    swap = decode_features(swapped, skel)
    pa, pb = orig.world_positions(skel)
    sa, sb = swap.world_positions(skel)
    assert np.abs(sa - pb).max() < 1e-3
    assert np.abs(sb - pa).max() < 1e-3


def test_mirror_swap_preserves_root_distance(skel, sample_clip):
    swapped = mirror_swap(sample_clip, skel)
    d0 = np.linalg.norm(sample_clip.features[:, PERSON_DIM:PERSON_DIM + 3], axis=1)
    d1 = np.linalg.norm(swapped.features[:, PERSON_DIM:PERSON_DIM + 3], axis=1)
    assert np.abs(d0 - d1).max() < 1e-12


def test_mirror_swap_rejects_normalized(skel, sample_clip):
    stats = FeatureStats(mean=np.zeros(FEATURE_DIM), std=np.ones(FEATURE_DIM))
    with pytest.raises(DuetError) as exc:
        mirror_swap(normalize(sample_clip, stats), skel)
    assert exc.value.code == "cannot-mirror-normalized"


# --- normalization --------------------------------------------------------

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_normalize_roundtrip(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(8, FEATURE_DIM))
    clip = DuetClip(features=feats)
    stats = FeatureStats(mean=rng.normal(size=FEATURE_DIM),
                         std=np.abs(rng.normal(size=FEATURE_DIM)) + 0.1)
    back = denormalize(normalize(clip, stats), stats)
    assert np.abs(back.features - feats).max() < 1e-9


def test_normalize_at_mean_is_zero():
    mean = np.linspace(-1, 1, FEATURE_DIM)
    clip = DuetClip(features=np.tile(mean, (4, 1)))
    stats = FeatureStats(mean=mean, std=np.ones(FEATURE_DIM))
    assert np.abs(normalize(clip, stats).features).max() == 0.0


def test_std_floor_keeps_finite():
    stats = FeatureStats(mean=np.zeros(FEATURE_DIM), std=np.zeros(FEATURE_DIM))
    assert stats.std.min() == pytest.approx(1e-8)
    clip = DuetClip(features=np.ones((3, FEATURE_DIM)))
    assert np.all(np.isfinite(normalize(clip, stats).features))
