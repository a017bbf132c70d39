import numpy as np
import pytest

from duetdance.representation import canonicalize, encode_features
from duetdance.skeleton import default_skeleton
from duetdance.synth import SynthSpec, synth_duet


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


def make_motion(seed=3, bpm=120.0, duration=17.0, profile=0.4, genre=1, skel=None):
    skel = skel or default_skeleton()
    spec = SynthSpec(seed=seed, bpm=bpm, duration=duration,
                     interaction_profile=profile, genre_id=genre)
    motion, audio, beats, contact = synth_duet(spec, skel)
    return motion, audio, beats, contact


@pytest.fixture(scope="session")
def sample_motion(skel):
    return make_motion(skel=skel)[0]


@pytest.fixture(scope="session")
def sample_clip(skel, sample_motion):
    return encode_features(canonicalize(sample_motion), skel)


def random_rotations(rng, shape):
    """Random rotation matrices via QR with positive-determinant fix."""
    flat = int(np.prod(shape)) if shape else 1
    mats = []
    for _ in range(flat):
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q *= np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 2] *= -1
        mats.append(q)
    return np.array(mats).reshape(shape + (3, 3))
