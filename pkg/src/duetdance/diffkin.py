"""Differentiable kinematics on torch tensors.

Mirrors the numpy decode path (delta integration, 6-D rotation decoding,
forward kinematics) so that training losses can reach world-space joint
positions; cross-checked against the numpy implementation in the tests.
"""

from __future__ import annotations

import numpy as np
import torch

from .representation import JOINT_6D, PERSON_DIM, ROOT_6D, TRANS
from .skeleton import Skeleton


def rot6d_to_matrix(r6: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt decode of (..., 6) into rotation matrices (..., 3, 3)."""
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    x = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    b = b - (x * b).sum(dim=-1, keepdim=True) * x
    y = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    z = torch.cross(x, y, dim=-1)
    return torch.stack([x, y, z], dim=-1)


def _depth_levels(skel: Skeleton) -> list[np.ndarray]:
    """Joints grouped by tree depth (root first); same-depth joints batch."""
    depth = np.zeros(skel.joint_count, dtype=np.int64)
    for jt in range(1, skel.joint_count):
        depth[jt] = depth[skel.parents[jt]] + 1
    return [np.nonzero(depth == d)[0] for d in range(depth.max() + 1)]


def forward_kinematics_torch(local_rot: torch.Tensor, root_rot: torch.Tensor,
                             root_pos: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    """FK over (..., J-1, 3, 3), (..., 3, 3), (..., 3) -> (..., J, 3).

    Joints at equal tree depth are processed together, which keeps the op
    count at the tree depth rather than the joint count.
    """
    offsets = torch.as_tensor(skel.offsets, dtype=root_pos.dtype,
                              device=root_pos.device)
    levels = _depth_levels(skel)

    produced = [0]
    glob = root_rot[..., None, :, :]
    pos = root_pos[..., None, :]
    glob_all = glob
    pos_all = pos
    for level in levels[1:]:
        idx_in_produced = torch.as_tensor(
            [produced.index(int(skel.parents[j])) for j in level])
        parent_glob = glob_all.index_select(-3, idx_in_produced)
        parent_pos = pos_all.index_select(-2, idx_in_produced)
        offs = offsets[level]
        new_pos = parent_pos + torch.einsum("...kij,kj->...ki", parent_glob, offs)
        locals_k = local_rot.index_select(-3, torch.as_tensor(level - 1))
        new_glob = parent_glob @ locals_k
        glob_all = torch.cat([glob_all, new_glob], dim=-3)
        pos_all = torch.cat([pos_all, new_pos], dim=-2)
        produced.extend(int(j) for j in level)

    order = torch.as_tensor(np.argsort(np.array(produced)))
    return pos_all.index_select(-2, order)


def _person_world(block: torch.Tensor, root_pos: torch.Tensor,
                  skel: Skeleton) -> torch.Tensor:
    j1 = skel.joint_count - 1
    root_rot = rot6d_to_matrix(block[..., ROOT_6D])
    local = rot6d_to_matrix(block[..., JOINT_6D].reshape(block.shape[:-1] + (j1, 6)))
    return forward_kinematics_torch(local, root_rot, root_pos, skel)


def features_to_world(x: torch.Tensor, skel: Skeleton
                      ) -> tuple[torch.Tensor, torch.Tensor]:
    """World joint positions of both persons from un-normalized features.

    ``x`` is (..., N, 536) with the frame axis second to last; returns two
    (..., N, J, 3) tensors.  A's root integrates its deltas from the origin.
    """
    a = x[..., :PERSON_DIM]
    b = x[..., PERSON_DIM:]
    root_a = torch.cumsum(a[..., TRANS], dim=-2)
    root_b = root_a + b[..., TRANS]
    return (_person_world(a, root_a, skel), _person_world(b, root_b, skel))
