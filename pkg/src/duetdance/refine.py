"""Root-trajectory refinement.

A convolutional regressor predicts the six root-trajectory channels (A's
per-frame delta and B's relational offset) from the remaining 530 local
channels; refined clips splice the predictions in while leaving every local
channel untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .archive import read_archive, write_archive
from .errors import DuetError
from .representation import FEATURE_DIM, PERSON_DIM, DuetClip, FeatureStats, denormalize

REFINER_FORMAT = "duet-refiner-v1"

LOCAL_DIM = FEATURE_DIM - 6
TRAJ_DIM = 6

# channels dropped from the full layout: A's root delta and B's root offset
_TRAJ_COLS = np.array([0, 1, 2, PERSON_DIM, PERSON_DIM + 1, PERSON_DIM + 2])
_LOCAL_COLS = np.setdiff1d(np.arange(FEATURE_DIM), _TRAJ_COLS)


@dataclass
class LocalFeatures:
    frames: np.ndarray  # (N, 530)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != LOCAL_DIM:
            raise DuetError("shape-mismatch", f"local features must be (N, {LOCAL_DIM})")


@dataclass
class TrajFeatures:
    frames: np.ndarray  # (N, 6)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != TRAJ_DIM:
            raise DuetError("shape-mismatch", f"trajectory features must be (N, {TRAJ_DIM})")
        if not np.all(np.isfinite(self.frames)):
            raise DuetError("invalid-features")


def extract_local(clip: DuetClip) -> LocalFeatures:
    """Drop the six trajectory channels, preserving the order of the rest."""
    if clip.features.shape[1] != FEATURE_DIM:
        raise DuetError("shape-mismatch")
    return LocalFeatures(frames=clip.features[:, _LOCAL_COLS].copy())


def extract_traj(clip: DuetClip) -> TrajFeatures:
    if clip.features.shape[1] != FEATURE_DIM:
        raise DuetError("shape-mismatch")
    return TrajFeatures(frames=clip.features[:, _TRAJ_COLS].copy())


class _Res(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.c1 = nn.Conv1d(width, width, 3, padding=1)
        self.c2 = nn.Conv1d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.c2(torch.relu(self.c1(torch.relu(x))))


class TrajRegressor(nn.Module):
    """Full-temporal-resolution 1-D conv stack, 530 channels in, 6 out."""

    def __init__(self, width: int = 256, blocks: int = 3):
        super().__init__()
        self.width = width
        self.blocks = blocks
        self.inp = nn.Conv1d(LOCAL_DIM, width, 3, padding=1)
        self.res = nn.Sequential(*[_Res(width) for _ in range(blocks)])
        self.out = nn.Conv1d(width, TRAJ_DIM, 3, padding=1)
        self.trained = False

    def forward(self, local: torch.Tensor) -> torch.Tensor:
        h = self.inp(local.transpose(-1, -2))
        return self.out(self.res(h)).transpose(-1, -2)


def predict_traj(local: LocalFeatures, model: TrajRegressor) -> TrajFeatures:
    """Per-frame trajectory prediction; deterministic in evaluation mode."""
    if not model.trained:
        raise DuetError("untrained")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(local.frames.astype(np.float32))[None]
        pred = model(x)[0].numpy().astype(np.float64)
    return TrajFeatures(frames=pred)


def refine_clip(clip: DuetClip, model: TrajRegressor,
                stats: FeatureStats | None = None) -> DuetClip:
    """Replace the trajectory channels with regressor predictions.

    All 530 local channels pass through bit-identically.  Normalized clips
    need ``stats`` to de-normalize first.
    """
    if clip.normalized:
        if stats is None:
            raise DuetError("missing-stats")
        clip = denormalize(clip, stats)
    pred = predict_traj(extract_local(clip), model)
    feats = clip.features.copy()
    feats[:, _TRAJ_COLS] = pred.frames
    return DuetClip(features=feats, fps=clip.fps)


def refine_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Position term on the integrated A-path plus a velocity term.

    Both are sums of per-frame vector norms, so a constant velocity bias b
    contributes N*|b| through the velocity term and ~N^2/2*|b| through the
    integrated positions.  B's offset channels are already positional and are
    covered by the velocity term directly.
    """
    if pred.shape != gt.shape:
        raise DuetError("shape-mismatch")
    pos_err = (torch.cumsum(pred[..., 0:3], dim=-2)
               - torch.cumsum(gt[..., 0:3], dim=-2))
    position = pos_err.norm(dim=-1).sum()
    velocity = (pred - gt).norm(dim=-1).sum()
    return position + velocity


def save_refiner_checkpoint(path, model: TrajRegressor,
                            meta: dict | None = None) -> None:
    entries = {f"param/{k}": v.detach().cpu().numpy()
               for k, v in model.state_dict().items()}
    metadata = dict(meta or {})
    metadata["config"] = json.dumps({"width": model.width, "blocks": model.blocks})
    metadata["trained"] = bool(model.trained)
    write_archive(path, entries, REFINER_FORMAT, metadata=metadata)


def load_refiner_checkpoint(path) -> tuple[TrajRegressor, dict]:
    entries, manifest = read_archive(path, expected_format=REFINER_FORMAT)
    cfg = json.loads(manifest.metadata["config"])
    model = TrajRegressor(width=cfg["width"], blocks=cfg["blocks"])
    state = {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in entries.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.trained = bool(manifest.metadata.get("trained", False))
    model.eval()
    return model, manifest.metadata
