"""Evaluation metrics: reconstruction errors, Frechet-style distribution
distances over a learned feature space, contact statistics, foot skating, and
beat alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .archive import read_archive, write_archive
from .errors import DuetError
from .representation import PERSON_DIM, DuetClip, GlobalDuetMotion
from .skeleton import CONTACT_JOINTS, Skeleton

EXTRACTOR_FORMAT = "duet-extractor-v1"

CONTACT_RADIUS = 0.40       # m, inter-person joint contact threshold
FOOT_HEIGHT_GATE = 0.08     # m, a foot below this height counts as grounded
BAS_SIGMA = 0.1             # s, Gaussian width of the beat alignment kernel
BEAT_NMS_FRAMES = 5


def recon_errors(gt: GlobalDuetMotion, rec: GlobalDuetMotion, skel: Skeleton) -> dict:
    """MPJPE (mm, per person), MPJVE (mm/frame, per person), and RDE (mm)."""
    if gt.frames != rec.frames:
        raise DuetError("length-mismatch")
    ga, gb = gt.world_positions(skel)
    ra, rb = rec.world_positions(skel)

    def mpjpe(p, q):
        return float(np.linalg.norm(p - q, axis=-1).mean() * 1000.0)

    def mpjve(p, q):
        return float(np.linalg.norm(np.diff(p, axis=0) - np.diff(q, axis=0),
                                    axis=-1).mean() * 1000.0)

    d_gt = np.linalg.norm(gt.root_pos_a - gt.root_pos_b, axis=-1)
    d_rec = np.linalg.norm(rec.root_pos_a - rec.root_pos_b, axis=-1)
    return {
        "mpjpe_a": mpjpe(ga, ra),
        "mpjpe_b": mpjpe(gb, rb),
        "mpjve_a": mpjve(ga, ra),
        "mpjve_b": mpjve(gb, rb),
        "rde": float(np.abs(d_gt - d_rec).mean() * 1000.0),
    }


@dataclass
class GaussianMoments:
    """Mean and covariance of a feature sample."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.shape[0],) * 2:
            raise DuetError("shape-mismatch", "covariance shape mismatch")
        if np.abs(self.cov - self.cov.T).max() > 1e-9:
            raise DuetError("not-symmetric", "covariance is not symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-8:
            raise DuetError("not-psd", "covariance has negative eigenvalues")

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "GaussianMoments":
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] < 2:
            raise DuetError("too-few-samples")
        cov = np.cov(x, rowvar=False)
        cov = (cov + cov.T) / 2.0
        return cls(mean=x.mean(axis=0), cov=cov)


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The matrix square root goes through eigendecompositions with negative
    eigenvalues (numerical noise) clipped at -1e-8.
    """
    if a.mean.shape != b.mean.shape:
        raise DuetError("dimension-mismatch")

    def _clip(vals):
        if vals.min() < -1e-8:
            raise DuetError("not-psd", "product matrix is not PSD")
        return np.maximum(vals, 0.0)

    vals_a, vecs_a = np.linalg.eigh(a.cov)
    sqrt_a = (vecs_a * np.sqrt(_clip(vals_a))) @ vecs_a.T
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = (inner + inner.T) / 2.0
    vals = _clip(np.linalg.eigvalsh(inner))
    trace_sqrt = np.sqrt(vals).sum()

    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)


class _PersonAutoencoder(nn.Module):
    """Small temporal autoencoder over one person's 268-channel block."""

    def __init__(self, frames: int, latent: int = 64, width: int = 96):
        super().__init__()
        if frames % 8 != 0:
            raise DuetError("bad-length", "extractor window must divide by 8")
        self.frames = frames
        self.latent = latent
        self.enc = nn.Sequential(
            nn.Conv1d(PERSON_DIM, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv1d(width, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.Conv1d(width, width, 4, stride=2, padding=1), nn.ReLU(),
        )
        self.to_latent = nn.Linear(width, latent)
        self.from_latent = nn.Linear(latent, width * (frames // 8))
        self.width = width
        self.dec = nn.Sequential(
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1), nn.ReLU(),
            nn.ConvTranspose1d(width, PERSON_DIM, 4, stride=2, padding=1),
        )

    def encode(self, x):
        h = self.enc(x).mean(dim=2)
        return self.to_latent(h)

    def forward(self, x):
        z = self.encode(x)
        h = self.from_latent(z).view(-1, self.width, self.frames // 8)
        return self.dec(h), z


class MotionFeatureExtractor:
    """Frozen per-person feature encoder used by FID/PFID/Div.

    Latents are 64-D per person per window; the paired latent concatenates the
    two persons (128-D).  Inputs are z-scored with statistics recorded at
    training time.
    """

    def __init__(self, net: _PersonAutoencoder, mean: np.ndarray, std: np.ndarray,
                 train_loss: float = float("nan")):
        self.net = net.eval()
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(std, dtype=np.float64), 1e-8)
        self.train_loss = train_loss

    @property
    def frames(self) -> int:
        return self.net.frames

    def _prep(self, block: np.ndarray) -> torch.Tensor:
        if block.shape[0] != self.frames:
            raise DuetError("length-mismatch",
                            f"extractor expects {self.frames}-frame windows")
        x = (block - self.mean) / self.std
        return torch.from_numpy(x.astype(np.float32)).T.unsqueeze(0)

    def encode_clip(self, clip: DuetClip) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Latents (z_a, z_b, paired) for one un-normalized clip."""
        if clip.normalized:
            raise DuetError("cannot-extract-normalized")
        with torch.no_grad():
            za = self.net.encode(self._prep(clip.features[:, :PERSON_DIM]))[0].numpy()
            zb = self.net.encode(self._prep(clip.features[:, PERSON_DIM:]))[0].numpy()
        return za, zb, np.concatenate([za, zb])


def save_extractor(path, extractor: MotionFeatureExtractor,
                   meta: dict | None = None) -> None:
    entries = {f"param/{k}": v.detach().cpu().numpy()
               for k, v in extractor.net.state_dict().items()}
    entries["norm/mean"] = extractor.mean
    entries["norm/std"] = extractor.std
    metadata = dict(meta or {})
    metadata.update({"frames": extractor.net.frames,
                     "latent": extractor.net.latent,
                     "width": extractor.net.width,
                     "train_loss": extractor.train_loss})
    write_archive(path, entries, EXTRACTOR_FORMAT, metadata=metadata)


def load_extractor(path) -> MotionFeatureExtractor:
    entries, manifest = read_archive(path, expected_format=EXTRACTOR_FORMAT)
    meta = manifest.metadata
    net = _PersonAutoencoder(frames=int(meta["frames"]), latent=int(meta["latent"]),
                             width=int(meta["width"]))
    state = {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in entries.items() if k.startswith("param/")}
    net.load_state_dict(state)
    return MotionFeatureExtractor(net, entries["norm/mean"], entries["norm/std"],
                                  train_loss=float(meta.get("train_loss", "nan")))


def fid_pfid_div(gen_clips: list[DuetClip], gt_clips: list[DuetClip],
                 extractor: MotionFeatureExtractor) -> dict:
    """FID averaged over persons, PFID over paired latents, Div over generated."""
    if len(gen_clips) < 2 or len(gt_clips) < 2:
        raise DuetError("too-few-clips")

    def latents(clips):
        za, zb, pair = [], [], []
        for c in clips:
            a, b, p = extractor.encode_clip(c)
            za.append(a), zb.append(b), pair.append(p)
        return np.stack(za), np.stack(zb), np.stack(pair)

    ga, gb, gp = latents(gen_clips)
    ra, rb, rp = latents(gt_clips)
    fid_a = frechet_distance(GaussianMoments.from_samples(ga),
                             GaussianMoments.from_samples(ra))
    fid_b = frechet_distance(GaussianMoments.from_samples(gb),
                             GaussianMoments.from_samples(rb))
    pfid = frechet_distance(GaussianMoments.from_samples(gp),
                            GaussianMoments.from_samples(rp))
    dists = np.linalg.norm(gp[:, None, :] - gp[None, :, :], axis=-1)
    iu = np.triu_indices(len(gen_clips), k=1)
    return {"fid": (fid_a + fid_b) / 2.0, "pfid": pfid, "div": float(dists[iu].mean())}


def contact_frequency(motion: GlobalDuetMotion, skel: Skeleton) -> float:
    """Percentage of frames with any inter-person joint pair under 40 cm."""
    pa, pb = motion.world_positions(skel)
    diff = pa[:, :, None, :] - pb[:, None, :, :]
    min_dist = np.linalg.norm(diff, axis=-1).min(axis=(1, 2))
    return float((min_dist < CONTACT_RADIUS).mean() * 100.0)


def foot_skate(motion: GlobalDuetMotion, skel: Skeleton,
               height_gate: float = FOOT_HEIGHT_GATE, ground_y: float = 0.0) -> float:
    """Mean horizontal heel/toe speed while the joint is near the ground.

    Averaged over frames, the four heel/toe joints, and the two persons;
    zero for perfectly planted contacts.
    """
    pa, pb = motion.world_positions(skel)
    fps = motion.fps

    def person_value(pos):
        feet = pos[:, CONTACT_JOINTS, :]
        horiz = feet[:, :, [0, 2]]
        speed = np.linalg.norm(np.diff(horiz, axis=0), axis=-1) * fps
        low = feet[1:, :, 1] < (ground_y + height_gate)
        return float((speed * low).mean())

    return (person_value(pa) + person_value(pb)) / 2.0


def ground_align(motion: GlobalDuetMotion, skel: Skeleton,
                 percentile: float = 5.0) -> GlobalDuetMotion:
    """Shift the duet vertically so the low heel/toe percentile sits at y=0.

    Evaluation plumbing for decoded clips, whose canonical frame anchors
    person A's first root at the origin rather than the floor.
    """
    pa, pb = motion.world_positions(skel)
    heights = np.concatenate([pa[:, CONTACT_JOINTS, 1].ravel(),
                              pb[:, CONTACT_JOINTS, 1].ravel()])
    shift = np.array([0.0, -np.percentile(heights, percentile), 0.0])
    out = motion.copy()
    out.root_pos_a = out.root_pos_a + shift
    out.root_pos_b = out.root_pos_b + shift
    return out


def _motion_beat_times(pos: np.ndarray, fps: float) -> np.ndarray:
    """Local minima of mean joint speed (centered differences, +-5-frame NMS)."""
    n = pos.shape[0]
    if n < 2 * BEAT_NMS_FRAMES + 3:
        return np.zeros(0)
    speed = np.linalg.norm(pos[2:] - pos[:-2], axis=-1).mean(axis=1) * fps / 2.0
    # speed[i] corresponds to frame i+1
    beats = []
    last = -10 * BEAT_NMS_FRAMES
    for i in range(BEAT_NMS_FRAMES, speed.shape[0] - BEAT_NMS_FRAMES):
        window = speed[i - BEAT_NMS_FRAMES:i + BEAT_NMS_FRAMES + 1]
        if speed[i] <= window.min() and (i + 1) - last > BEAT_NMS_FRAMES:
            beats.append(i + 1)
            last = i + 1
    return np.array(beats) / fps


def beat_alignment(motion: GlobalDuetMotion, music_beats: np.ndarray,
                   skel: Skeleton, sigma: float = BAS_SIGMA) -> float:
    """Beat alignment score in [0, 1], averaged over the two persons.

    Each kinematic beat contributes exp(-(dt)^2 / (2 sigma^2)) against its
    nearest music beat; a person with no kinematic beats scores 0.
    """
    music_beats = np.asarray(music_beats, dtype=np.float64)
    if music_beats.size == 0:
        raise DuetError("no-beats")
    pa, pb = motion.world_positions(skel)

    def person_score(pos):
        beats = _motion_beat_times(pos, motion.fps)
        if beats.size == 0:
            return 0.0
        dt = np.abs(beats[:, None] - music_beats[None, :]).min(axis=1)
        return float(np.exp(-(dt ** 2) / (2.0 * sigma ** 2)).mean())

    return (person_score(pa) + person_score(pb)) / 2.0
