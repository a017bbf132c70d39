"""Kinematic tree: joint hierarchy, rest offsets, and forward kinematics.

The canonical skeleton has 22 body joints in an SMPL-like ordering with the
pelvis as the root.  Offsets are in meters, Y is up, +Z is the rest facing
direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DuetError

JOINT_COUNT = 22

JOINT_NAMES = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
]

_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]

_OFFSETS = [
    [0.000, 0.000, 0.000],   # pelvis
    [0.090, -0.065, 0.000],  # left_hip
    [-0.090, -0.065, 0.000], # right_hip
    [0.000, 0.110, -0.015],  # spine1
    [0.000, -0.380, 0.000],  # left_knee
    [0.000, -0.380, 0.000],  # right_knee
    [0.000, 0.130, 0.010],   # spine2
    [0.000, -0.400, -0.020], # left_ankle
    [0.000, -0.400, -0.020], # right_ankle
    [0.000, 0.060, 0.005],   # spine3
    [0.000, -0.060, 0.130],  # left_foot
    [0.000, -0.060, 0.130],  # right_foot
    [0.000, 0.200, -0.010],  # neck
    [0.070, 0.150, -0.010],  # left_collar
    [-0.070, 0.150, -0.010], # right_collar
    [0.000, 0.120, 0.020],   # head
    [0.110, 0.020, 0.000],   # left_shoulder
    [-0.110, 0.020, 0.000],  # right_shoulder
    [0.270, 0.000, 0.000],   # left_elbow
    [-0.270, 0.000, 0.000],  # right_elbow
    [0.260, 0.000, 0.000],   # left_wrist
    [-0.260, 0.000, 0.000],  # right_wrist
]

# Heel/toe joints used for foot contacts, ordered L-heel, L-toe, R-heel, R-toe.
CONTACT_JOINTS = (7, 10, 8, 11)

# End-effectors (feet, head, hands) carry extra weight in interaction losses.
END_EFFECTORS = (10, 11, 15, 20, 21)


@dataclass
class Skeleton:
    """Joint hierarchy with per-joint parent indices and rest offsets (m)."""

    names: list[str]
    parents: np.ndarray
    offsets: np.ndarray
    _children_cache: list[list[int]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        j = len(self.names)
        if self.parents.shape != (j,) or self.offsets.shape != (j, 3):
            raise DuetError("bad-skeleton", "parents/offsets shape mismatch")
        if self.parents[0] != -1:
            raise DuetError("bad-skeleton", "joint 0 must be the root")
        if np.any(self.parents[1:] >= np.arange(1, j)) or np.any(self.parents[1:] < 0):
            raise DuetError("bad-skeleton", "parent index must be smaller than joint index")
        if not np.all(np.isfinite(self.offsets)):
            raise DuetError("bad-skeleton", "non-finite rest offsets")

    @property
    def joint_count(self) -> int:
        return len(self.names)

    def to_json(self) -> str:
        doc = {
            "joints": [
                {"name": n, "parent": int(p), "offset": [float(v) for v in o]}
                for n, p, o in zip(self.names, self.parents, self.offsets)
            ]
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Skeleton":
        doc = json.loads(text)
        joints = doc["joints"]
        return cls(
            names=[j["name"] for j in joints],
            parents=np.array([j["parent"] for j in joints]),
            offsets=np.array([j["offset"] for j in joints]),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Skeleton":
        with open(path) as f:
            return cls.from_json(f.read())


def default_skeleton() -> Skeleton:
    """The canonical 22-joint skeleton."""
    return Skeleton(names=list(JOINT_NAMES), parents=np.array(_PARENTS),
                    offsets=np.array(_OFFSETS))


def standing_root_height(skel: Skeleton) -> float:
    """Root height above the lowest joint of the rest pose (identity FK)."""
    pos = forward_kinematics(
        np.broadcast_to(np.eye(3), (skel.joint_count - 1, 3, 3)),
        np.eye(3), np.zeros(3), skel)
    return float(-pos[:, 1].min())


def forward_kinematics(local_rotations: np.ndarray, root_orientation: np.ndarray,
                       root_position: np.ndarray, skel: Skeleton) -> np.ndarray:
    """World joint positions from local joint rotations and the root transform.

    ``local_rotations`` has shape (..., J-1, 3, 3) for the non-root joints,
    ``root_orientation`` (..., 3, 3), ``root_position`` (..., 3).  For each
    non-root joint ``position[j] = position[parent] + global_rot[parent] @
    offset[j]`` with global rotations composed down the tree.  Returns
    positions of shape (..., J, 3).
    """
    local_rotations = np.asarray(local_rotations, dtype=np.float64)
    root_orientation = np.asarray(root_orientation, dtype=np.float64)
    root_position = np.asarray(root_position, dtype=np.float64)
    j = skel.joint_count
    batch = root_position.shape[:-1]

    glob_rot = [None] * j
    pos = [None] * j
    glob_rot[0] = np.broadcast_to(root_orientation, batch + (3, 3))
    pos[0] = np.broadcast_to(root_position, batch + (3,))
    for jt in range(1, j):
        par = int(skel.parents[jt])
        off = skel.offsets[jt]
        pos[jt] = pos[par] + np.einsum("...ij,j->...i", glob_rot[par], off)
        glob_rot[jt] = glob_rot[par] @ local_rotations[..., jt - 1, :, :]
    return np.stack(pos, axis=-2)
