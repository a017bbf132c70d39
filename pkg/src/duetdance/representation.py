"""Unified two-person motion representation.

A duet clip packs both dancers into one 536-wide feature row per frame.  Per
person the layout is::

    [0:3]     root translation (A: delta from own previous frame,
               B: offset from A's root at the same frame, world axes)
    [3:9]     root orientation, 6-D
    [9:72]    root-invariant local joint positions, 21 x 3
    [72:198]  local joint rotations, 21 x 6-D
    [198:264] local joint velocities (per-frame deltas), 22 x 3
    [264:268] binary heel/toe ground contacts

Person A occupies channels 0:268 and person B 268:536.  A's absolute world
path is recovered by integrating the deltas from the origin, B's by adding
the relational offset to A's path; everything else is root-relative.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DuetError
from .rotations import matrix_from_rot6d, rot6d_from_matrix, is_rotation
from .skeleton import CONTACT_JOINTS, Skeleton, forward_kinematics

FPS = 30
FEATURE_DIM = 536
PERSON_DIM = 268
STD_FLOOR = 1e-8

# channel slices within one person block
TRANS = slice(0, 3)
ROOT_6D = slice(3, 9)
JOINT_POS = slice(9, 72)
JOINT_6D = slice(72, 198)
JOINT_VEL = slice(198, 264)
CONTACTS = slice(264, 268)

FOOT_CONTACT_SPEED = 0.15  # m/s, strict upper bound for a planted foot


def person_slice(person: int) -> slice:
    return slice(person * PERSON_DIM, (person + 1) * PERSON_DIM)


@dataclass
class FeatureStats:
    """Per-channel mean/std for Z-normalization; std floored at 1e-8."""

    mean: np.ndarray
    std: np.ndarray
    stats_id: str | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise DuetError("shape-mismatch", "stats mean/std shape mismatch")
        self.std = np.maximum(self.std, STD_FLOOR)


@dataclass
class GlobalDuetMotion:
    """World-space duet motion: root transforms plus local joint rotations."""

    fps: float
    root_pos_a: np.ndarray    # (N, 3)
    root_rot_a: np.ndarray    # (N, 3, 3)
    local_rot_a: np.ndarray   # (N, J-1, 3, 3)
    root_pos_b: np.ndarray
    root_rot_b: np.ndarray
    local_rot_b: np.ndarray

    @property
    def frames(self) -> int:
        return self.root_pos_a.shape[0]

    def validate(self) -> None:
        n = self.frames
        if n < 2:
            raise DuetError("bad-length", "motion needs at least 2 frames")
        for name in ("root_rot_a", "root_rot_b", "local_rot_a", "local_rot_b"):
            if not is_rotation(getattr(self, name), tol=1e-6):
                raise DuetError("bad-rotation", f"{name} is not orthonormal")

    def copy(self) -> "GlobalDuetMotion":
        return GlobalDuetMotion(
            fps=self.fps,
            root_pos_a=self.root_pos_a.copy(), root_rot_a=self.root_rot_a.copy(),
            local_rot_a=self.local_rot_a.copy(), root_pos_b=self.root_pos_b.copy(),
            root_rot_b=self.root_rot_b.copy(), local_rot_b=self.local_rot_b.copy())

    def world_positions(self, skel: Skeleton) -> tuple[np.ndarray, np.ndarray]:
        """World joint positions for both persons, each (N, J, 3)."""
        pos_a = forward_kinematics(self.local_rot_a, self.root_rot_a,
                                   self.root_pos_a, skel)
        pos_b = forward_kinematics(self.local_rot_b, self.root_rot_b,
                                   self.root_pos_b, skel)
        return pos_a, pos_b


@dataclass
class DuetClip:
    """N x 536 unified feature matrix at 30 FPS."""

    features: np.ndarray
    fps: float = FPS
    normalized: bool = False
    stats_id: str | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != FEATURE_DIM:
            raise DuetError("shape-mismatch",
                            f"clip features must be (N, {FEATURE_DIM})")
        if not np.all(np.isfinite(self.features)):
            raise DuetError("invalid-features", "non-finite clip features")

    @property
    def frames(self) -> int:
        return self.features.shape[0]


def canonicalize(motion: GlobalDuetMotion) -> GlobalDuetMotion:
    """Yaw-rotate and translate the duet so A starts at the origin facing +Z.

    One rotation about the vertical axis and one translation are applied to
    every frame of both persons, preserving all relative distances.  Raises
    ``degenerate-facing`` when A's forward axis is vertical.
    """
    forward = motion.root_rot_a[0] @ np.array([0.0, 0.0, 1.0])
    fx, fz = forward[0], forward[2]
    horiz = np.hypot(fx, fz)
    if horiz < 1e-6:
        raise DuetError("degenerate-facing")
    angle = -np.arctan2(fx, fz)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    shift = -(rot @ motion.root_pos_a[0])
    if abs(angle) < 1e-12 and np.abs(shift).max() < 1e-12:
        return motion.copy()
    return GlobalDuetMotion(
        fps=motion.fps,
        root_pos_a=motion.root_pos_a @ rot.T + shift,
        root_rot_a=rot @ motion.root_rot_a,
        local_rot_a=motion.local_rot_a.copy(),
        root_pos_b=motion.root_pos_b @ rot.T + shift,
        root_rot_b=rot @ motion.root_rot_b,
        local_rot_b=motion.local_rot_b.copy(),
    )


def detect_foot_contacts(heel_toe_positions: np.ndarray, fps: float = FPS) -> np.ndarray:
    """Binary contacts (N, 4) from heel/toe world positions (N, 4, 3).

    A joint is in contact when its speed is strictly below 0.15 m/s; frame 0
    copies frame 1.
    """
    p = np.asarray(heel_toe_positions, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] < 2:
        raise DuetError("bad-length", "need (N>=2, K, 3) positions")
    speed = np.linalg.norm(np.diff(p, axis=0), axis=-1) * fps
    contacts = np.empty(p.shape[:2], dtype=np.float64)
    contacts[1:] = (speed < FOOT_CONTACT_SPEED).astype(np.float64)
    contacts[0] = contacts[1]
    return contacts


def _person_features(root_pos, root_rot, local_rot, world_pos, trans_channel):
    n = root_pos.shape[0]
    block = np.zeros((n, PERSON_DIM))
    block[:, TRANS] = trans_channel
    block[:, ROOT_6D] = rot6d_from_matrix(root_rot)
    # positions of all joints expressed in the root frame (root entry is zero)
    rel = world_pos - root_pos[:, None, :]
    local_pos = np.einsum("nji,nkj->nki", root_rot, rel)
    block[:, JOINT_POS] = local_pos[:, 1:, :].reshape(n, -1)
    block[:, JOINT_6D] = rot6d_from_matrix(local_rot).reshape(n, -1)
    vel = np.zeros_like(local_pos)
    vel[1:] = np.diff(local_pos, axis=0)
    block[:, JOINT_VEL] = vel.reshape(n, -1)
    block[:, CONTACTS] = detect_foot_contacts(world_pos[:, CONTACT_JOINTS, :])
    return block


def encode_features(motion: GlobalDuetMotion, skel: Skeleton,
                    stats: FeatureStats | None = None) -> DuetClip:
    """Encode canonicalized world-space motion into the 536-D representation."""
    if np.linalg.norm(motion.root_pos_a[0]) > 1e-6:
        raise DuetError("not-canonical",
                        "frame-0 root of person A must sit at the origin")
    if motion.frames < 2:
        raise DuetError("bad-length", "motion needs at least 2 frames")
    pos_a, pos_b = motion.world_positions(skel)

    t_delta = np.zeros_like(motion.root_pos_a)
    t_delta[1:] = np.diff(motion.root_pos_a, axis=0)
    t_eps = motion.root_pos_b - motion.root_pos_a

    feats = np.concatenate([
        _person_features(motion.root_pos_a, motion.root_rot_a,
                         motion.local_rot_a, pos_a, t_delta),
        _person_features(motion.root_pos_b, motion.root_rot_b,
                         motion.local_rot_b, pos_b, t_eps),
    ], axis=1)
    clip = DuetClip(features=feats, fps=motion.fps)
    if stats is not None:
        clip = normalize(clip, stats)
    return clip


def decode_features(clip: DuetClip, skel: Skeleton,
                    stats: FeatureStats | None = None) -> GlobalDuetMotion:
    """Reconstruct world-space motion from a duet clip.

    A's root path is the integral of its deltas from the origin; B's root is
    A's plus the relational offset.  Rotations come from the 6-D blocks; the
    position/velocity/contact channels are derived data and are ignored.
    """
    if clip.normalized:
        if stats is None:
            raise DuetError("missing-stats", "normalized clip needs stats to decode")
        clip = denormalize(clip, stats)
    f = clip.features
    if not np.all(np.isfinite(f)):
        raise DuetError("invalid-features")
    a, b = f[:, person_slice(0)], f[:, person_slice(1)]
    n = f.shape[0]
    j1 = skel.joint_count - 1

    root_pos_a = np.cumsum(a[:, TRANS], axis=0)
    root_pos_b = root_pos_a + b[:, TRANS]
    return GlobalDuetMotion(
        fps=clip.fps,
        root_pos_a=root_pos_a,
        root_rot_a=matrix_from_rot6d(a[:, ROOT_6D]),
        local_rot_a=matrix_from_rot6d(a[:, JOINT_6D].reshape(n, j1, 6)),
        root_pos_b=root_pos_b,
        root_rot_b=matrix_from_rot6d(b[:, ROOT_6D]),
        local_rot_b=matrix_from_rot6d(b[:, JOINT_6D].reshape(n, j1, 6)),
    )


def mirror_swap(clip: DuetClip, skel: Skeleton) -> DuetClip:
    """Exchange the two dancers' roles, re-deriving the relational channels.

    The decoded world motion of the result equals the input's with the person
    labels swapped; applying the swap twice returns the original clip.
    """
    if clip.normalized:
        raise DuetError("cannot-mirror-normalized")
    f = clip.features
    root_a = np.cumsum(f[:, person_slice(0)][:, TRANS], axis=0)
    root_b = root_a + f[:, person_slice(1)][:, TRANS]

    out = np.concatenate([f[:, person_slice(1)], f[:, person_slice(0)]], axis=1).copy()
    new_delta = np.empty_like(root_b)
    # frame 0 keeps B's starting offset so the decoded origin-anchored paths
    # line up with the unswapped decode
    new_delta[0] = root_b[0]
    new_delta[1:] = np.diff(root_b, axis=0)
    out[:, 0:3] = new_delta
    out[:, PERSON_DIM:PERSON_DIM + 3] = root_a - root_b
    return DuetClip(features=out, fps=clip.fps)


def normalize(clip: DuetClip, stats: FeatureStats) -> DuetClip:
    """Z-normalize per channel."""
    if clip.normalized:
        raise DuetError("already-normalized")
    if stats.mean.shape[0] != clip.features.shape[1]:
        raise DuetError("shape-mismatch", "stats dimension mismatch")
    feats = (clip.features - stats.mean) / stats.std
    return DuetClip(features=feats, fps=clip.fps, normalized=True,
                    stats_id=stats.stats_id)


def denormalize(clip: DuetClip, stats: FeatureStats) -> DuetClip:
    """Invert :func:`normalize`."""
    if not clip.normalized:
        raise DuetError("not-normalized")
    if stats.mean.shape[0] != clip.features.shape[1]:
        raise DuetError("shape-mismatch", "stats dimension mismatch")
    feats = clip.features * stats.std + stats.mean
    return DuetClip(features=feats, fps=clip.fps, normalized=False)
