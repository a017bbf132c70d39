import numpy as np
import pytest

from duetdance import metrics
from duetdance.errors import DuetError
from duetdance.skeleton import CONTACT_JOINTS
from duetdance.synth import SynthSpec, synth_duet


def test_determinism(skel):
    spec = SynthSpec(seed=5, bpm=100.0, duration=15.0, interaction_profile=0.3,
                     genre_id=2)
    m1, a1, b1, c1 = synth_duet(spec, skel)
    m2, a2, b2, c2 = synth_duet(spec, skel)
    assert np.array_equal(m1.root_pos_a, m2.root_pos_a)
    assert np.array_equal(m1.root_pos_b, m2.root_pos_b)
    assert np.array_equal(m1.local_rot_a, m2.local_rot_a)
    assert np.array_equal(a1.samples, a2.samples)
    assert np.array_equal(b1, b2)
    assert c1 == c2


@pytest.mark.parametrize("profile", [0.0, 0.2, 0.8, 1.0])
def test_contact_fraction_tracks_profile(skel, profile):
    spec = SynthSpec(seed=9, bpm=120.0, duration=17.0,
                     interaction_profile=profile, genre_id=0)
    motion, _, _, contact = synth_duet(spec, skel)
    assert abs(contact * 100 - profile * 100) <= 5.0
    assert abs(metrics.contact_frequency(motion, skel) - contact * 100) < 1e-9


def test_beat_alignment_of_output(skel):
    spec = SynthSpec(seed=4, bpm=150.0, duration=15.0, interaction_profile=0.5,
                     genre_id=3)
    motion, _, beats, _ = synth_duet(spec, skel)
    assert metrics.beat_alignment(motion, beats, skel) >= 0.9


def test_beat_locked_motion_exact_alignment(skel):
    # zero-interaction duets at fast tempo stop exactly on the beat grid
    spec = SynthSpec(seed=11, bpm=120.0, duration=17.0,
                     interaction_profile=0.0, genre_id=1)
    motion, _, beats, _ = synth_duet(spec, skel)
    assert metrics.beat_alignment(motion, beats, skel) == pytest.approx(1.0, abs=1e-9)


def test_wrist_clamp_during_holds(skel):
    spec = SynthSpec(seed=21, bpm=120.0, duration=17.0,
                     interaction_profile=0.9, genre_id=0)
    motion, _, _, contact = synth_duet(spec, skel)
    pa, pb = motion.world_positions(skel)
    wrist_gap = np.linalg.norm(pa[:, 21] - pb[:, 20], axis=1)
    # most held frames keep the wrist pair within the clamp distance
    assert (wrist_gap < 0.05).mean() > 0.55


def test_rotations_valid(skel):
    spec = SynthSpec(seed=2, bpm=90.0, duration=15.0, interaction_profile=0.4,
                     genre_id=4)
    motion, _, _, _ = synth_duet(spec, skel)
    motion.validate()


def test_feet_near_ground(skel):
    spec = SynthSpec(seed=3, bpm=120.0, duration=15.0, interaction_profile=0.0,
                     genre_id=0)
    motion, _, _, _ = synth_duet(spec, skel)
    pa, _ = motion.world_positions(skel)
    feet = pa[:, CONTACT_JOINTS, 1]
    assert feet.min() > -0.35
    assert np.percentile(feet, 10) < 0.25


def test_bad_spec_rejected(skel):
    with pytest.raises(DuetError) as exc:
        synth_duet(SynthSpec(seed=0, bpm=30.0), skel)
    assert exc.value.code == "bad-spec"
    with pytest.raises(DuetError):
        synth_duet(SynthSpec(seed=0, duration=5.0), skel)
    with pytest.raises(DuetError):
        synth_duet(SynthSpec(seed=0, interaction_profile=1.5), skel)
