import numpy as np
import pytest

from duetdance.errors import DuetError
from duetdance.skeleton import (JOINT_COUNT, Skeleton, default_skeleton,
                                forward_kinematics, standing_root_height)

from conftest import random_rotations


def brute_force_fk(local_rotations, root_orientation, root_position, skel):
    """Independent per-joint chain multiplication, no vectorization."""
    j = skel.joint_count
    pos = np.zeros((j, 3))
    glob = [None] * j
    glob[0] = np.array(root_orientation)
    pos[0] = root_position
    for jt in range(1, j):
        par = int(skel.parents[jt])
        pos[jt] = pos[par] + glob[par] @ skel.offsets[jt]
        glob[jt] = glob[par] @ local_rotations[jt - 1]
    return pos


def test_default_skeleton_shape():
    skel = default_skeleton()
    assert skel.joint_count == JOINT_COUNT
    assert skel.parents[0] == -1
    assert np.all(skel.parents[1:] < np.arange(1, JOINT_COUNT))


def test_identity_fk_sums_offsets():
    skel = default_skeleton()
    eye = np.broadcast_to(np.eye(3), (skel.joint_count - 1, 3, 3))
    pos = forward_kinematics(eye, np.eye(3), np.zeros(3), skel)
    expected = np.zeros((skel.joint_count, 3))
    for j in range(1, skel.joint_count):
        expected[j] = expected[skel.parents[j]] + skel.offsets[j]
    assert np.allclose(pos, expected)


def test_two_joint_chain_rotation():
    # child offset (0,1,0), parent rotated 90 degrees about X -> child at (0,0,1)
    skel = Skeleton(names=["root", "child"], parents=np.array([-1, 0]),
                    offsets=np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    rot_x = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    pos = forward_kinematics(np.eye(3)[None], rot_x, np.zeros(3), skel)
    assert np.allclose(pos[1], [0.0, 0.0, 1.0], atol=1e-12)


def test_fk_matches_brute_force_oracle():
    skel = default_skeleton()
    rng = np.random.default_rng(7)
    for _ in range(50):
        local = random_rotations(rng, (skel.joint_count - 1,))
        root_rot = random_rotations(rng, ())
        root_pos = rng.normal(size=3)
        fast = forward_kinematics(local, root_rot, root_pos, skel)
        slow = brute_force_fk(local, root_rot, root_pos, skel)
        assert np.abs(fast - slow).max() < 1e-6


def test_fk_batched_matches_per_frame():
    skel = default_skeleton()
    rng = np.random.default_rng(8)
    n = 5
    local = random_rotations(rng, (n, skel.joint_count - 1))
    root_rot = random_rotations(rng, (n,))
    root_pos = rng.normal(size=(n, 3))
    batched = forward_kinematics(local, root_rot, root_pos, skel)
    for i in range(n):
        single = forward_kinematics(local[i], root_rot[i], root_pos[i], skel)
        assert np.allclose(batched[i], single)


def test_skeleton_json_roundtrip(tmp_path):
    skel = default_skeleton()
    path = tmp_path / "skeleton.json"
    skel.save(path)
    loaded = Skeleton.load(path)
    assert loaded.names == skel.names
    assert np.array_equal(loaded.parents, skel.parents)
    assert np.array_equal(loaded.offsets, skel.offsets)


def test_bad_skeleton_rejected():
    with pytest.raises(DuetError) as exc:
        Skeleton(names=["a", "b"], parents=np.array([-1, 5]),
                 offsets=np.zeros((2, 3)))
    assert exc.value.code == "bad-skeleton"


def test_standing_root_height_positive():
    assert 0.5 < standing_root_height(default_skeleton()) < 1.2
