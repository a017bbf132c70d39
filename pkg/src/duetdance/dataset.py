"""Dataset construction: windowing, person-swap augmentation, normalization
statistics, and clip archive I/O for the synthetic corpus."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .archive import read_archive, write_archive
from .errors import DuetError
from .music import extract_features
from .representation import (DuetClip, FeatureStats, STD_FLOOR, canonicalize,
                             encode_features, mirror_swap)
from .skeleton import Skeleton
from .synth import SynthSpec, synth_duet

CLIP_FORMAT = "duet-clip-v1"
STATS_FORMAT = "duet-stats-v1"

# beat intervals of a whole number of frames at 30 FPS keep the synthetic
# oracle's kinematic beats exactly on the frame grid
BPM_PALETTE = (60.0, 72.0, 90.0, 100.0, 120.0, 150.0, 180.0)


@dataclass
class DatasetConfig:
    seed: int = 0
    n_train_bases: int = 64
    n_test_bases: int = 32
    duration: float = 17.0
    window: int = 400
    stride: int = 100
    bpm_palette: tuple = BPM_PALETTE
    interaction_range: tuple = (0.2, 0.8)
    mirror_train: bool = True


def window_split(clip: DuetClip, window: int, stride: int) -> list[DuetClip]:
    """Windows starting at 0, stride, 2*stride, ... while they fit; a window
    longer than the clip yields an empty list."""
    if stride < 1:
        raise DuetError("bad-stride")
    out = []
    start = 0
    while start + window <= clip.frames:
        out.append(DuetClip(features=clip.features[start:start + window].copy(),
                            fps=clip.fps, normalized=clip.normalized,
                            stats_id=clip.stats_id))
        start += stride
    return out


def augment_mirror(clips: list[DuetClip], skel: Skeleton) -> list[DuetClip]:
    """Double the dataset with person-swapped copies (originals first)."""
    return list(clips) + [mirror_swap(c, skel) for c in clips]


def compute_stats(clips: list[DuetClip], stats_id: str | None = None) -> FeatureStats:
    """Per-channel mean/std over all frames of all clips, std floored at 1e-8."""
    if not clips:
        raise DuetError("empty-dataset")
    count = 0
    total = np.zeros(clips[0].features.shape[1])
    total_sq = np.zeros_like(total)
    for c in clips:
        count += c.frames
        total += c.features.sum(axis=0)
        total_sq += (c.features ** 2).sum(axis=0)
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return FeatureStats(mean=mean, std=np.maximum(np.sqrt(var), STD_FLOOR),
                        stats_id=stats_id)


def save_stats(path, stats: FeatureStats) -> None:
    write_archive(path, {"mean": stats.mean, "std": stats.std}, STATS_FORMAT,
                  metadata={"stats_id": stats.stats_id or ""})


def load_stats(path) -> FeatureStats:
    entries, manifest = read_archive(path, expected_format=STATS_FORMAT)
    return FeatureStats(mean=entries["mean"], std=entries["std"],
                        stats_id=manifest.metadata.get("stats_id") or None)


def save_clip(path, clip: DuetClip, music: np.ndarray | None = None,
              metadata: dict | None = None) -> None:
    entries = {"features": clip.features.astype(np.float32)}
    if music is not None:
        entries["music"] = music.astype(np.float32)
    meta = dict(metadata or {})
    meta.update({"fps": clip.fps, "normalized": clip.normalized,
                 "stats_id": clip.stats_id or ""})
    write_archive(path, entries, CLIP_FORMAT, metadata=meta)


def load_clip(path) -> tuple[DuetClip, np.ndarray | None, dict]:
    entries, manifest = read_archive(path, expected_format=CLIP_FORMAT)
    meta = manifest.metadata
    clip = DuetClip(features=entries["features"].astype(np.float64),
                    fps=meta.get("fps", 30.0),
                    normalized=bool(meta.get("normalized", False)),
                    stats_id=meta.get("stats_id") or None)
    music = entries.get("music")
    if music is not None:
        music = music.astype(np.float64)
    return clip, music, meta


@dataclass
class DatasetManifest:
    config: dict
    clips: list = field(default_factory=list)  # {id, split, spec, window_start, beats}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"config": self.config, "clips": self.clips}, f, indent=1,
                      sort_keys=True)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            doc = json.load(f)
        return cls(config=doc["config"], clips=doc["clips"])

    def ids(self, split: str | None = None) -> list[str]:
        return [c["id"] for c in self.clips if split is None or c["split"] == split]


def _spec_for_base(cfg: DatasetConfig, index: int) -> SynthSpec:
    rng = np.random.default_rng(cfg.seed * 100_003 + index)
    lo, hi = cfg.interaction_range
    return SynthSpec(
        seed=int(rng.integers(0, 2**31 - 1)),
        bpm=float(cfg.bpm_palette[int(rng.integers(len(cfg.bpm_palette)))]),
        duration=cfg.duration,
        interaction_profile=float(rng.uniform(lo, hi)),
        genre_id=int(rng.integers(0, 5)),
    )


def build_dataset(cfg: DatasetConfig, skel: Skeleton, out_dir: str) -> DatasetManifest:
    """Synthesize, canonicalize, encode, window, and archive the corpus.

    Train windows are augmented by person interchange; statistics come from
    the train split only.
    """
    clips_dir = os.path.join(out_dir, "clips")
    os.makedirs(clips_dir, exist_ok=True)
    manifest = DatasetManifest(config=asdict(cfg))
    train_clips = []

    def process_base(base_idx, split):
        spec = _spec_for_base(cfg, base_idx)
        motion, audio, beats, contact = synth_duet(spec, skel)
        motion = canonicalize(motion)
        clip = encode_features(motion, skel)
        music = extract_features(audio, clip.frames).frames
        windows = window_split(clip, cfg.window, cfg.stride)
        records = []
        for w_idx, wclip in enumerate(windows):
            start = w_idx * cfg.stride
            wmusic = music[start:start + cfg.window]
            wbeats = [float(b - start / clip.fps) for b in beats
                      if start / clip.fps <= b < (start + cfg.window) / clip.fps]
            records.append((wclip, wmusic, {
                "spec": asdict(spec), "window_start": start, "beats": wbeats,
                "contact_fraction": contact, "split": split,
                "base_index": base_idx,
            }))
        return records

    def add(records, split, mirrored, skel):
        base = [(c, m, meta) for c, m, meta in records]
        if mirrored:
            base = base + [(mirror_swap(c, skel), m,
                            {**meta, "mirrored": True}) for c, m, meta in records]
        for c, m, meta in base:
            cid = f"{split}_{len(manifest.ids(split)):04d}"
            save_clip(os.path.join(clips_dir, cid), c, music=m, metadata=meta)
            manifest.clips.append({"id": cid, "split": split, **{
                k: meta[k] for k in ("spec", "window_start", "beats",
                                     "contact_fraction", "base_index")},
                "mirrored": bool(meta.get("mirrored", False))})
            if split == "train":
                train_clips.append(c)

    for i in range(cfg.n_train_bases):
        add(process_base(i, "train"), "train", cfg.mirror_train, skel)
    for i in range(cfg.n_test_bases):
        add(process_base(cfg.n_train_bases + i, "test"), "test", False, skel)

    stats = compute_stats(train_clips, stats_id=f"stats-seed{cfg.seed}")
    save_stats(os.path.join(out_dir, "stats"), stats)
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
