"""Hierarchical two-person motion VQ-VAE.

Two 1-D convolutional encoders produce latents at coarse (top) and fine
(bottom) temporal resolutions; each level is quantized against its own
EMA-maintained codebook with stale-code resets.  The decoder consumes both
quantized streams plus an optional music embedding and reconstructs the
536-channel feature sequence.  Training losses cover feature reconstruction,
velocity, commitment, world-space joint positions after forward kinematics,
and inter-person relative distances.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .archive import read_archive, write_archive
from .diffkin import features_to_world
from .errors import DuetError
from .representation import FEATURE_DIM, DuetClip, FeatureStats
from .skeleton import END_EFFECTORS, Skeleton

VQ_FORMAT = "duet-vq-v1"


@dataclass
class HierVQConfig:
    eta_bot: int = 4
    eta_top: int = 8
    code_dim_top: int = 128
    code_dim_bot: int = 128
    codebook_size: int = 512
    beta_top: float = 0.02
    beta_bot: float = 0.02
    lambda_r: float = 1.0
    lambda_v: float = 0.5
    lambda_com: float = 1.0
    lambda_fk: float = 1.0
    lambda_rel: float = 1.0
    ema_decay: float = 0.99
    reset_stale_steps: int = 100
    reset_usage_factor: float = 0.01
    width: int = 128
    music_width: int = 64
    music_dim: int = 92

    def validate(self) -> None:
        if not (self.eta_top > self.eta_bot > 1):
            raise DuetError("bad-config", "need eta_top > eta_bot > 1")
        if self.eta_top % self.eta_bot != 0:
            raise DuetError("bad-config", "eta_top must divide by eta_bot")
        if self.codebook_size < 2:
            raise DuetError("bad-config", "codebook needs at least 2 codes")
        for eta in (self.eta_bot, self.eta_top // self.eta_bot):
            if eta & (eta - 1):
                raise DuetError("bad-config", "temporal scales must be powers of 2")


@dataclass
class TokenPair:
    """Two-level token sequences for one clip."""

    top: np.ndarray
    bot: np.ndarray
    source_frames: int

    def __post_init__(self):
        self.top = np.asarray(self.top, dtype=np.int64)
        self.bot = np.asarray(self.bot, dtype=np.int64)

    def validate(self, cfg: HierVQConfig) -> None:
        if self.source_frames % cfg.eta_top != 0:
            raise DuetError("bad-length")
        if self.top.shape[0] != self.source_frames // cfg.eta_top:
            raise DuetError("bad-length", "top token length mismatch")
        if self.bot.shape[0] != self.source_frames // cfg.eta_bot:
            raise DuetError("bad-length", "bottom token length mismatch")
        for ids in (self.top, self.bot):
            if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.codebook_size:
                raise DuetError("bad-token")


class Codebook(nn.Module):
    """K code vectors with EMA statistics, usage counters, and code reset."""

    def __init__(self, size: int, dim: int, decay: float = 0.99,
                 reset_stale_steps: int = 100, reset_usage_factor: float = 0.01):
        super().__init__()
        self.size = size
        self.dim = dim
        self.decay = decay
        self.reset_stale_steps = reset_stale_steps
        self.reset_usage_factor = reset_usage_factor
        self.register_buffer("codes", torch.randn(size, dim) * 0.1)
        self.register_buffer("ema_counts", torch.zeros(size))
        self.register_buffer("ema_sums", torch.zeros(size, dim))
        self.register_buffer("stale_steps", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @torch.no_grad()
    def _bootstrap(self, latents: torch.Tensor, rng: np.random.Generator) -> None:
        n = latents.shape[0]
        reps = int(np.ceil(self.size / n))
        tiled = latents.repeat(reps, 1)[: self.size]
        noise = torch.as_tensor(
            rng.normal(scale=0.01, size=(self.size, self.dim)),
            dtype=latents.dtype)
        self.codes.copy_(tiled + noise)
        self.ema_sums.copy_(self.codes)
        self.ema_counts.fill_(1.0)
        self.initialized.fill_(True)

    def quantize(self, latents: torch.Tensor
                 ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Nearest-code lookup; ties break toward the smallest index."""
        if latents.shape[-1] != self.dim:
            raise DuetError("shape-mismatch", "latent width does not match codebook")
        flat = latents.reshape(-1, self.dim)
        dists = (flat.pow(2).sum(1, keepdim=True)
                 - 2.0 * flat @ self.codes.T
                 + self.codes.pow(2).sum(1)[None, :])
        ids = dists.argmin(dim=1)
        sq = dists.gather(1, ids[:, None]).squeeze(1).clamp_min(0.0)
        quantized = self.codes[ids]
        shape = latents.shape[:-1]
        return (quantized.reshape(latents.shape), ids.reshape(shape),
                sq.reshape(shape))

    @torch.no_grad()
    def ema_update_and_reset(self, latents: torch.Tensor, ids: torch.Tensor,
                             rng: np.random.Generator) -> None:
        """One EMA step plus replacement of codes stale for too long."""
        flat = latents.detach().reshape(-1, self.dim)
        flat_ids = ids.reshape(-1)
        n = flat.shape[0]
        if n == 0:
            raise DuetError("empty-batch")
        if not bool(self.initialized):
            self._bootstrap(flat, rng)
            return

        counts = torch.bincount(flat_ids, minlength=self.size).to(flat.dtype)
        sums = torch.zeros_like(self.ema_sums)
        sums.index_add_(0, flat_ids, flat)

        d = self.decay
        self.ema_counts.mul_(d).add_(counts, alpha=1.0 - d)
        self.ema_sums.mul_(d).add_(sums, alpha=1.0 - d)
        self.codes.copy_(self.ema_sums / (self.ema_counts[:, None] + 1e-6))

        threshold = self.reset_usage_factor * n / self.size
        stale = self.ema_counts < threshold
        self.stale_steps[stale] += 1
        self.stale_steps[~stale] = 0
        expired = torch.nonzero(self.stale_steps >= self.reset_stale_steps).squeeze(1)
        if expired.numel():
            picks = rng.integers(0, n, size=expired.numel())
            fresh = flat[torch.as_tensor(picks, dtype=torch.long)]
            self.codes[expired] = fresh
            self.ema_sums[expired] = fresh
            self.ema_counts[expired] = 1.0
            self.stale_steps[expired] = 0

    def utilization(self) -> float:
        """Fraction of codes with non-negligible EMA usage."""
        return float((self.ema_counts > 1e-3).float().mean())


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, 3, padding=1)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        h = self.conv2(torch.relu(self.conv1(torch.relu(x))))
        return x + h


def _down_stack(width, factor, n_res=2):
    layers = []
    steps = int(np.log2(factor))
    for _ in range(steps):
        layers.append(nn.Conv1d(width, width, 4, stride=2, padding=1))
        layers.extend(ResBlock(width) for _ in range(n_res))
    return nn.Sequential(*layers)


def _up_stack(width, factor, n_res=2):
    layers = []
    steps = int(np.log2(factor))
    for _ in range(steps):
        layers.extend(ResBlock(width) for _ in range(n_res))
        layers.append(nn.ConvTranspose1d(width, width, 4, stride=2, padding=1))
    return nn.Sequential(*layers)


class MusicEncoder(nn.Module):
    """Downsamples per-frame music features to the bottom latent rate."""

    def __init__(self, in_dim, width, factor):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(in_dim, width, 3, padding=1), nn.ReLU(),
            _down_stack(width, factor, n_res=1),
            nn.Conv1d(width, width, 3, padding=1),
        )

    def forward(self, music):
        return self.net(music)


class HierVQVAE(nn.Module):
    def __init__(self, cfg: HierVQConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.width
        ratio = cfg.eta_top // cfg.eta_bot

        self.enc_bottom = nn.Sequential(
            nn.Conv1d(FEATURE_DIM, w, 3, padding=1), nn.ReLU(),
            _down_stack(w, cfg.eta_bot))
        self.enc_top = nn.Sequential(
            _down_stack(w, ratio),
            nn.Conv1d(w, cfg.code_dim_top, 3, padding=1))
        self.dec_top = nn.Sequential(
            nn.Conv1d(cfg.code_dim_top, w, 3, padding=1),
            _up_stack(w, ratio))
        self.merge_bottom = nn.Conv1d(2 * w, cfg.code_dim_bot, 1)
        self.proj_bottom = nn.Conv1d(cfg.code_dim_bot, w, 1)
        self.music_enc = MusicEncoder(cfg.music_dim, cfg.music_width, cfg.eta_bot)
        self.decoder = nn.Sequential(
            nn.Conv1d(2 * w + cfg.music_width, w, 3, padding=1), nn.ReLU(),
            _up_stack(w, cfg.eta_bot),
            nn.Conv1d(w, FEATURE_DIM, 3, padding=1))
        self.book_top = Codebook(cfg.codebook_size, cfg.code_dim_top,
                                 cfg.ema_decay, cfg.reset_stale_steps,
                                 cfg.reset_usage_factor)
        self.book_bot = Codebook(cfg.codebook_size, cfg.code_dim_bot,
                                 cfg.ema_decay, cfg.reset_stale_steps,
                                 cfg.reset_usage_factor)

    # x is (B, N, FEATURE_DIM) normalized features throughout

    def encode_hierarchy(self, x: torch.Tensor
                         ) -> tuple[torch.Tensor, torch.Tensor]:
        """Pre-quantization top latents and bottom encoder features.

        Returns z_top_pre (B, N/eta_top, D_top) and e_bot (B, N/eta_bot, w).
        """
        if x.shape[-2] % self.cfg.eta_top != 0:
            raise DuetError("bad-length",
                            f"frames must divide by {self.cfg.eta_top}")
        h = x.transpose(1, 2)
        e_bot = self.enc_bottom(h)
        z_top = self.enc_top(e_bot)
        return z_top.transpose(1, 2), e_bot.transpose(1, 2)

    def bottom_latents(self, e_bot: torch.Tensor, z_top_q: torch.Tensor
                       ) -> tuple[torch.Tensor, torch.Tensor]:
        """Pre-quantization bottom latents plus the upsampled top path."""
        up = self.dec_top(z_top_q.transpose(1, 2))
        merged = self.merge_bottom(torch.cat([e_bot.transpose(1, 2), up], dim=1))
        return merged.transpose(1, 2), up.transpose(1, 2)

    def embed_music(self, music: torch.Tensor | None, n_frames: int,
                    batch: int, dtype=torch.float32) -> torch.Tensor:
        l_bot = n_frames // self.cfg.eta_bot
        if music is None:
            return torch.zeros(batch, l_bot, self.cfg.music_width, dtype=dtype)
        if music.shape[-2] != n_frames:
            raise DuetError("misaligned-latents", "music length mismatch")
        return self.music_enc(music.transpose(1, 2)).transpose(1, 2)

    def decode_motion(self, z_top: torch.Tensor, z_bot: torch.Tensor,
                      z_music: torch.Tensor | None = None,
                      top_upsampled: torch.Tensor | None = None) -> torch.Tensor:
        """Reconstruct (B, N, FEATURE_DIM) from quantized latent streams."""
        ratio = self.cfg.eta_top // self.cfg.eta_bot
        if z_bot.shape[1] != z_top.shape[1] * ratio:
            raise DuetError("misaligned-latents",
                            "bottom stream must be eta_top/eta_bot times longer")
        if top_upsampled is None:
            top_upsampled = self.dec_top(z_top.transpose(1, 2)).transpose(1, 2)
        if z_music is None:
            z_music = torch.zeros(z_bot.shape[0], z_bot.shape[1],
                                  self.cfg.music_width, dtype=z_bot.dtype)
        if z_music.shape[1] != z_bot.shape[1]:
            raise DuetError("misaligned-latents", "music embedding length mismatch")
        h = torch.cat([top_upsampled, self.proj_bottom(z_bot.transpose(1, 2)).transpose(1, 2),
                       z_music], dim=2)
        return self.decoder(h.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor, music: torch.Tensor | None = None):
        """Straight-through autoencoding pass for training.

        Returns the reconstruction plus the pre/post-quantization latents and
        token ids of both levels.
        """
        z_top_pre, e_bot = self.encode_hierarchy(x)
        q_top, ids_top, _ = self.book_top.quantize(z_top_pre)
        z_top = z_top_pre + (q_top - z_top_pre).detach()
        z_bot_pre, up = self.bottom_latents(e_bot, z_top)
        q_bot, ids_bot, _ = self.book_bot.quantize(z_bot_pre)
        z_bot = z_bot_pre + (q_bot - z_bot_pre).detach()
        z_music = self.embed_music(music, x.shape[1], x.shape[0], x.dtype)
        x_hat = self.decode_motion(z_top, z_bot, z_music, top_upsampled=up)
        return {
            "x_hat": x_hat,
            "z_top_pre": z_top_pre, "q_top": q_top, "ids_top": ids_top,
            "z_bot_pre": z_bot_pre, "q_bot": q_bot, "ids_bot": ids_bot,
        }

    @torch.no_grad()
    def tokenize(self, clip: DuetClip, music: np.ndarray | None = None) -> TokenPair:
        """Discrete token pair for one normalized clip (music unused by the
        encoder; accepted for pipeline symmetry)."""
        if not clip.normalized:
            raise DuetError("not-normalized", "tokenize expects a normalized clip")
        self.eval()
        x = torch.from_numpy(clip.features.astype(np.float32))[None]
        z_top_pre, e_bot = self.encode_hierarchy(x)
        q_top, ids_top, _ = self.book_top.quantize(z_top_pre)
        z_bot_pre, _ = self.bottom_latents(e_bot, q_top)
        _, ids_bot, _ = self.book_bot.quantize(z_bot_pre)
        return TokenPair(top=ids_top[0].numpy(), bot=ids_bot[0].numpy(),
                         source_frames=clip.frames)

    @torch.no_grad()
    def detokenize(self, tokens: TokenPair, music: np.ndarray | None = None
                   ) -> DuetClip:
        """Decode a token pair back to a normalized clip."""
        tokens.validate(self.cfg)
        self.eval()
        z_top = self.book_top.codes[torch.from_numpy(tokens.top)][None]
        z_bot = self.book_bot.codes[torch.from_numpy(tokens.bot)][None]
        z_music = None
        if music is not None:
            m = torch.from_numpy(np.asarray(music, dtype=np.float32))[None]
            z_music = self.embed_music(m, tokens.source_frames, 1)
        x_hat = self.decode_motion(z_top, z_bot, z_music)
        return DuetClip(features=x_hat[0].numpy().astype(np.float64),
                        normalized=True)


class SingleVQVAE(nn.Module):
    """Single-level ablation: one codebook at the bottom temporal rate."""

    def __init__(self, cfg: HierVQConfig, width: int | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = width if width is not None else int(cfg.width * 1.5)
        self.width = w
        self.encoder = nn.Sequential(
            nn.Conv1d(FEATURE_DIM, w, 3, padding=1), nn.ReLU(),
            _down_stack(w, cfg.eta_bot, n_res=3),
            nn.Conv1d(w, cfg.code_dim_bot, 3, padding=1))
        self.music_enc = MusicEncoder(cfg.music_dim, cfg.music_width, cfg.eta_bot)
        self.decoder = nn.Sequential(
            nn.Conv1d(cfg.code_dim_bot + cfg.music_width, w, 3, padding=1), nn.ReLU(),
            _up_stack(w, cfg.eta_bot, n_res=3),
            nn.Conv1d(w, FEATURE_DIM, 3, padding=1))
        self.book = Codebook(cfg.codebook_size, cfg.code_dim_bot,
                             cfg.ema_decay, cfg.reset_stale_steps,
                             cfg.reset_usage_factor)

    def forward(self, x: torch.Tensor, music: torch.Tensor | None = None):
        if x.shape[-2] % self.cfg.eta_bot != 0:
            raise DuetError("bad-length")
        z_pre = self.encoder(x.transpose(1, 2)).transpose(1, 2)
        q, ids, _ = self.book.quantize(z_pre)
        z = z_pre + (q - z_pre).detach()
        if music is not None:
            z_music = self.music_enc(music.transpose(1, 2)).transpose(1, 2)
        else:
            z_music = torch.zeros(z.shape[0], z.shape[1], self.cfg.music_width,
                                  dtype=z.dtype)
        x_hat = self.decoder(torch.cat([z, z_music], dim=2).transpose(1, 2)
                             ).transpose(1, 2)
        return {"x_hat": x_hat, "z_pre": z_pre, "q": q, "ids": ids}


def quantize_nearest(book: Codebook, latents: torch.Tensor):
    """Module-level alias of :meth:`Codebook.quantize`."""
    return book.quantize(latents)


def matched_single_width(cfg: HierVQConfig, tolerance: float = 0.05) -> int:
    """Width giving the single-level ablation a parameter count within
    ``tolerance`` of the hierarchical model's."""
    target = sum(p.numel() for p in HierVQVAE(cfg).parameters())
    best_w, best_err = cfg.width, float("inf")
    for w in range(cfg.width // 2, cfg.width * 3, 8):
        n = sum(p.numel() for p in SingleVQVAE(cfg, width=w).parameters())
        err = abs(n - target) / target
        if err < best_err:
            best_w, best_err = w, err
    if best_err > tolerance:
        raise DuetError("bad-config", "cannot parameter-match the ablation")
    return best_w


def relative_distance_loss(pos_a: torch.Tensor, pos_b: torch.Tensor,
                           rec_a: torch.Tensor, rec_b: torch.Tensor,
                           joint_weights: torch.Tensor,
                           gt_dist: torch.Tensor | None = None) -> torch.Tensor:
    """Distance-weighted inter-person relative distance error.

    Pairs closer in the ground truth weigh exponentially more; per-joint
    weights emphasize end-effectors.  Averaged over frames.  ``gt_dist``
    optionally passes the precomputed ground-truth pair distances.
    """
    if gt_dist is None:
        gt_dist = torch.cdist(pos_a, pos_b)
    d_rec = torch.cdist(rec_a, rec_b)
    w = torch.exp(-gt_dist) * (gt_dist - d_rec).abs()
    per_frame = (w.sum(dim=-1) * joint_weights).sum(dim=-1) / pos_a.shape[-2]
    return per_frame.mean()


def end_effector_weights(skel: Skeleton, weight: float = 2.0,
                         dtype=torch.float32) -> torch.Tensor:
    w = torch.ones(skel.joint_count, dtype=dtype)
    w[list(END_EFFECTORS)] = weight
    return w


def fk_loss(x: torch.Tensor, x_hat: torch.Tensor, skel: Skeleton) -> torch.Tensor:
    """Summed squared world-position error of both persons (un-normalized
    feature input)."""
    pa, pb = features_to_world(x, skel)
    ra, rb = features_to_world(x_hat, skel)
    return (pa - ra).pow(2).sum() + (pb - rb).pow(2).sum()


def commitment_loss(z_pre: torch.Tensor, z_q: torch.Tensor, beta: float
                    ) -> torch.Tensor:
    """beta * sum((z_pre - sg[z_q])^2); gradient is 2*beta*(z_pre - z_q)."""
    return beta * (z_pre - z_q.detach()).pow(2).sum()


def _world_terms(x, x_hat, skel, stats, gt_world=None):
    mean = torch.as_tensor(stats.mean, dtype=x.dtype)
    std = torch.as_tensor(stats.std, dtype=x.dtype)
    gt_dist = None
    if gt_world is None:
        with torch.no_grad():
            pa, pb = features_to_world(x * std + mean, skel)
    elif len(gt_world) == 3:
        pa, pb, gt_dist = gt_world
    else:
        pa, pb = gt_world
    ra, rb = features_to_world(x_hat * std + mean, skel)
    l_fk = (pa - ra).pow(2).mean() + (pb - rb).pow(2).mean()
    l_rel = relative_distance_loss(
        pa.flatten(0, 1), pb.flatten(0, 1), ra.flatten(0, 1), rb.flatten(0, 1),
        end_effector_weights(skel, dtype=x.dtype),
        gt_dist=gt_dist.flatten(0, 1) if gt_dist is not None else None)
    return l_fk, l_rel


def vq_losses(x: torch.Tensor, out: dict, skel: Skeleton, stats: FeatureStats,
              cfg: HierVQConfig, gt_world=None) -> dict:
    """All training losses of the hierarchical model (summed-square forms).

    ``gt_world`` optionally passes precomputed ground-truth joint positions
    (pa, pb) so training does not rerun FK on constant targets.
    """
    x_hat = out["x_hat"]
    if x_hat.shape != x.shape:
        raise DuetError("shape-mismatch")
    l_r = (x - x_hat).pow(2).mean()
    l_v = (torch.diff(x, dim=1) - torch.diff(x_hat, dim=1)).pow(2).mean()
    # per-element normalization of the summed commitment form keeps the
    # optimizer balance independent of batch and sequence sizes
    l_com = (commitment_loss(out["z_top_pre"], out["q_top"], cfg.beta_top)
             + commitment_loss(out["z_bot_pre"], out["q_bot"], cfg.beta_bot)
             ) / (out["z_top_pre"].numel() + out["z_bot_pre"].numel())
    l_fk, l_rel = _world_terms(x, x_hat, skel, stats, gt_world)
    total = (cfg.lambda_r * l_r + cfg.lambda_v * l_v + cfg.lambda_com * l_com
             + cfg.lambda_fk * l_fk + cfg.lambda_rel * l_rel)
    return {"l_r": l_r, "l_v": l_v, "l_com": l_com, "l_fk": l_fk,
            "l_rel": l_rel, "l_total": total}


def single_vq_losses(x: torch.Tensor, out: dict, skel: Skeleton,
                     stats: FeatureStats, cfg: HierVQConfig, gt_world=None) -> dict:
    """Loss set of the single-level ablation (same terms, one codebook)."""
    x_hat = out["x_hat"]
    l_r = (x - x_hat).pow(2).mean()
    l_v = (torch.diff(x, dim=1) - torch.diff(x_hat, dim=1)).pow(2).mean()
    l_com = commitment_loss(out["z_pre"], out["q"], cfg.beta_bot) / out["z_pre"].numel()
    l_fk, l_rel = _world_terms(x, x_hat, skel, stats, gt_world)
    total = (cfg.lambda_r * l_r + cfg.lambda_v * l_v + cfg.lambda_com * l_com
             + cfg.lambda_fk * l_fk + cfg.lambda_rel * l_rel)
    return {"l_r": l_r, "l_v": l_v, "l_com": l_com, "l_fk": l_fk,
            "l_rel": l_rel, "l_total": total}


def save_vq_checkpoint(path, model: nn.Module, stats: FeatureStats,
                       metadata: dict | None = None,
                       format_tag: str = VQ_FORMAT) -> None:
    entries = {f"param/{k}": v.detach().cpu().numpy()
               for k, v in model.state_dict().items()}
    entries["stats/mean"] = stats.mean
    entries["stats/std"] = stats.std
    meta = dict(metadata or {})
    meta["config"] = json.dumps(asdict(model.cfg), sort_keys=True)
    meta["model_class"] = type(model).__name__
    if isinstance(model, SingleVQVAE):
        meta["single_width"] = model.width
    write_archive(path, entries, format_tag, metadata=meta)


def load_vq_checkpoint(path, format_tag: str = VQ_FORMAT
                       ) -> tuple[nn.Module, FeatureStats, dict]:
    entries, manifest = read_archive(path, expected_format=format_tag)
    meta = manifest.metadata
    cfg = HierVQConfig(**json.loads(meta["config"]))
    if meta.get("model_class") == "SingleVQVAE":
        model = SingleVQVAE(cfg, width=int(meta["single_width"]))
    else:
        model = HierVQVAE(cfg)
    state = {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in entries.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    stats = FeatureStats(mean=entries["stats/mean"], std=entries["stats/std"],
                         stats_id=meta.get("stats_id") or None)
    return model, stats, meta
