import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duetdance.errors import DuetError
from duetdance.rotations import (is_rotation, matrix_from_rot6d,
                                 rot6d_from_matrix, yaw_matrix)

from conftest import random_rotations


def test_identity_encoding():
    r6 = rot6d_from_matrix(np.eye(3))
    assert np.allclose(r6, [1, 0, 0, 0, 1, 0])
    assert np.allclose(matrix_from_rot6d(r6), np.eye(3))


def test_encode_decode_fixed_point():
    rng = np.random.default_rng(0)
    rots = random_rotations(rng, (50,))
    r6 = rot6d_from_matrix(rots)
    back = matrix_from_rot6d(r6)
    assert np.abs(back - rots).max() < 1e-6
    assert np.abs(rot6d_from_matrix(back) - r6).max() < 1e-6


def test_decode_orthonormalizes_noisy_input():
    rng = np.random.default_rng(1)
    rots = random_rotations(rng, (20,))
    noisy = rot6d_from_matrix(rots) + rng.normal(scale=0.05, size=(20, 6))
    decoded = matrix_from_rot6d(noisy)
    assert is_rotation(decoded, tol=1e-9)


def test_degenerate_rotation_rejected():
    with pytest.raises(DuetError) as exc:
        matrix_from_rot6d(np.zeros(6))
    assert exc.value.code == "degenerate-rotation"
    with pytest.raises(DuetError):
        matrix_from_rot6d(np.array([1.0, 0, 0, 2.0, 0, 0]))


@given(st.floats(-10, 10))
@settings(max_examples=50, deadline=None)
def test_yaw_matrix_is_rotation(angle):
    m = yaw_matrix(angle)
    assert is_rotation(m, tol=1e-12)
    # vertical axis untouched
    assert np.allclose(m @ [0, 1, 0], [0, 1, 0])


def test_yaw_matrix_forward():
    m = yaw_matrix(np.pi / 2)
    assert np.allclose(m @ [0, 0, 1], [1, 0, 0], atol=1e-12)
