"""Two-stage generative masked transformers over motion tokens.

Training corrupts token sequences BERT-style under a cosine masking schedule
and minimizes the NLL of the original ids at the corrupted positions,
conditioned on music (top stage) plus the complete top-level sequence (bottom
stage).  Inference iteratively fills a fully-masked sequence: sample all
masked positions, keep the most confident, re-mask the rest on the same
cosine schedule, with classifier-free guidance blending conditional and
music-free logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .archive import read_archive, write_archive
from .errors import DuetError

MASKED_FORMAT = "duet-masked-v1"


@dataclass
class GenConfig:
    top_iters: int = 10
    bottom_iters: int = 10
    guidance_scale: float = 4.0
    temperature: float = 1.0
    gumbel_scale: float = 1.0
    cond_dropout: float = 0.10
    seed: int = 0

    def validate(self) -> None:
        if self.top_iters < 1 or self.bottom_iters < 1:
            raise DuetError("bad-config", "need at least one iteration")
        if self.guidance_scale < 0:
            raise DuetError("bad-config", "guidance scale must be >= 0")


@dataclass
class MaskedSeq:
    ids: np.ndarray         # values in {0..K-1} plus MASK = K
    mask_flags: np.ndarray  # True where corruption was applied

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask_flags = np.asarray(self.mask_flags, dtype=bool)
        if self.ids.shape != self.mask_flags.shape:
            raise DuetError("shape-mismatch")


def mask_ratio(tau: float) -> float:
    """Cosine masking schedule, strictly decreasing from 1 at tau=0 to 0."""
    if not (0.0 <= tau <= 1.0):
        raise DuetError("bad-tau")
    return math.cos(math.pi * tau / 2.0)


def apply_training_mask(ids: np.ndarray, rng: np.random.Generator, tau: float,
                        vocab_size: int) -> MaskedSeq:
    """Corrupt ceil(gamma(tau) * L) uniformly chosen positions.

    Of the selected positions 80% become MASK, 10% a random id, and 10% keep
    the original id; all selected positions are flagged for the loss.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min(initial=0) < 0 or ids.max(initial=-1) >= vocab_size:
        raise DuetError("bad-token")
    length = ids.shape[0]
    n_sel = int(math.ceil(mask_ratio(tau) * length))
    out = ids.copy()
    flags = np.zeros(length, dtype=bool)
    if n_sel == 0:
        return MaskedSeq(ids=out, mask_flags=flags)
    selected = rng.choice(length, size=n_sel, replace=False)
    flags[selected] = True
    rolls = rng.random(n_sel)
    randoms = rng.integers(0, vocab_size, size=n_sel)
    for pos, roll, rand_id in zip(selected, rolls, randoms):
        if roll < 0.8:
            out[pos] = vocab_size  # MASK sentinel
        elif roll < 0.9:
            out[pos] = rand_id
    return MaskedSeq(ids=out, mask_flags=flags)


class _MusicDownsampler(nn.Module):
    def __init__(self, in_dim, width, factor):
        super().__init__()
        steps = int(np.log2(factor))
        layers = [nn.Conv1d(in_dim, width, 3, padding=1), nn.ReLU()]
        for _ in range(steps):
            layers += [nn.Conv1d(width, width, 4, stride=2, padding=1), nn.ReLU()]
        layers.append(nn.Conv1d(width, width, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, music):
        return self.net(music.transpose(1, 2)).transpose(1, 2)


class TokenTransformer(nn.Module):
    """Bidirectional transformer over one token stream.

    Conditioning comes in channel-wise: a music embedding at token
    resolution (or a learned null vector when music is absent) and, for the
    bottom stage, embedded top-level tokens repeated to bottom resolution.
    """

    def __init__(self, vocab: int, max_len: int, frames_per_token: int,
                 width: int = 256, layers: int = 4, heads: int = 4,
                 music_dim: int = 92, music_width: int = 128,
                 cond_vocab: int | None = None, cond_upsample: int = 1):
        super().__init__()
        self.vocab = vocab
        self.mask_id = vocab
        self.max_len = max_len
        self.frames_per_token = frames_per_token
        self.cond_upsample = cond_upsample
        self.tok_emb = nn.Embedding(vocab + 1, width)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, width))
        self.music_net = _MusicDownsampler(music_dim, music_width, frames_per_token)
        self.null_music = nn.Parameter(torch.zeros(music_width))
        in_width = width + music_width
        if cond_vocab is not None:
            self.cond_emb = nn.Embedding(cond_vocab, music_width)
            in_width += music_width
        else:
            self.cond_emb = None
        self.fuse = nn.Linear(in_width, width)
        layer = nn.TransformerEncoderLayer(
            d_model=width, nhead=heads, dim_feedforward=2 * width,
            dropout=0.1, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        self.head = nn.Linear(width, vocab)

    def forward(self, ids: torch.Tensor, music: torch.Tensor | None,
                cond_ids: torch.Tensor | None = None) -> torch.Tensor:
        b, length = ids.shape
        if length > self.max_len:
            raise DuetError("bad-length", "sequence exceeds positional table")
        h = self.tok_emb(ids)
        if music is None:
            zm = self.null_music.expand(b, length, -1)
        else:
            zm = self.music_net(music)
            if zm.shape[1] != length:
                raise DuetError("misaligned-latents",
                                "music frames do not match token length")
        parts = [h, zm]
        if self.cond_emb is not None:
            if cond_ids is None:
                raise DuetError("incomplete-top", "missing top-level conditioning")
            ce = self.cond_emb(cond_ids)
            ce = ce.repeat_interleave(self.cond_upsample, dim=1)
            if ce.shape[1] != length:
                raise DuetError("misaligned-latents",
                                "conditioning length does not match tokens")
            parts.append(ce)
        h = self.fuse(torch.cat(parts, dim=2)) + self.pos_emb[:length]
        return self.head(self.encoder(h))


def _nll_on_flags(logits: torch.Tensor, targets: torch.Tensor,
                  flags: torch.Tensor) -> torch.Tensor:
    if not flags.any():
        raise DuetError("empty-mask")
    return F.cross_entropy(logits[flags], targets[flags])


def top_loss(model: TokenTransformer, masked: MaskedSeq, targets: np.ndarray,
             music: torch.Tensor | None) -> torch.Tensor:
    """Mean NLL of the original ids at flagged positions; ``music=None``
    trains the null-conditioned (classifier-free) pathway."""
    ids = torch.from_numpy(masked.ids)[None]
    flags = torch.from_numpy(masked.mask_flags)[None]
    tgt = torch.from_numpy(np.asarray(targets, dtype=np.int64))[None]
    logits = model(ids, music)
    return _nll_on_flags(logits, tgt, flags)


def bottom_loss(model: TokenTransformer, masked: MaskedSeq, targets: np.ndarray,
                music: torch.Tensor | None, t_top: np.ndarray) -> torch.Tensor:
    """As :func:`top_loss`, additionally conditioned on the complete
    top-level token sequence."""
    t_top = np.asarray(t_top, dtype=np.int64)
    if t_top.max(initial=0) >= model.cond_emb.num_embeddings:
        raise DuetError("incomplete-top", "MASK present in top-level tokens")
    ids = torch.from_numpy(masked.ids)[None]
    flags = torch.from_numpy(masked.mask_flags)[None]
    tgt = torch.from_numpy(np.asarray(targets, dtype=np.int64))[None]
    logits = model(ids, music, cond_ids=torch.from_numpy(t_top)[None])
    return _nll_on_flags(logits, tgt, flags)


def cfg_combine(logits_cond: torch.Tensor, logits_uncond: torch.Tensor,
                scale: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if logits_cond.shape != logits_uncond.shape:
        raise DuetError("shape-mismatch")
    return logits_uncond + scale * (logits_cond - logits_uncond)


def _iterative_fill(model: TokenTransformer, music: torch.Tensor | None,
                    cond_ids: torch.Tensor | None, n: int, iters: int,
                    cfg: GenConfig, generator: torch.Generator) -> np.ndarray:
    if n < 1:
        raise DuetError("bad-length")
    ids = torch.full((1, n), model.mask_id, dtype=torch.long)
    fixed = torch.zeros(n, dtype=torch.bool)
    model.eval()
    with torch.no_grad():
        for step in range(1, iters + 1):
            logits_cond = model(ids, music, cond_ids=cond_ids)
            if cfg.guidance_scale == 1.0 or music is None:
                logits = logits_cond
            else:
                logits_uncond = model(ids, None, cond_ids=cond_ids)
                logits = cfg_combine(logits_cond, logits_uncond,
                                     cfg.guidance_scale)
            logits = logits[0] / max(cfg.temperature, 1e-8)
            probs = torch.softmax(logits, dim=-1)
            sampled = torch.multinomial(probs, 1, generator=generator).squeeze(1)
            logp = torch.log_softmax(logits, dim=-1).gather(
                1, sampled[:, None]).squeeze(1)
            anneal = (iters - step) / max(iters - 1, 1)
            if cfg.gumbel_scale > 0 and anneal > 0:
                uniform = torch.rand(n, generator=generator)
                gumbel = -torch.log(-torch.log(uniform.clamp(1e-12, 1.0)))
                logp = logp + cfg.gumbel_scale * anneal * gumbel
            confidence = torch.where(fixed, torch.full_like(logp, float("inf")),
                                     logp)
            new_ids = torch.where(fixed, ids[0], sampled)
            n_remask = int(math.ceil(mask_ratio(step / iters) * n))
            if n_remask > 0:
                remask = confidence.argsort()[:n_remask]
                new_ids[remask] = model.mask_id
                fixed = torch.ones(n, dtype=torch.bool)
                fixed[remask] = False
            else:
                fixed = torch.ones(n, dtype=torch.bool)
            ids = new_ids[None]
    out = ids[0].numpy()
    if (out >= model.vocab).any():
        raise DuetError("bad-token", "MASK survived the schedule")
    return out


def generate_top(model: TokenTransformer, music: np.ndarray | None, n: int,
                 cfg: GenConfig) -> np.ndarray:
    """Fill an empty top-level sequence of length n from music."""
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    m = None
    if music is not None:
        m = torch.from_numpy(np.asarray(music, dtype=np.float32))[None]
    return _iterative_fill(model, m, None, n, cfg.top_iters, cfg, gen)


def generate_bottom(model: TokenTransformer, music: np.ndarray | None,
                    t_top: np.ndarray, n: int, cfg: GenConfig) -> np.ndarray:
    """Fill the bottom-level sequence conditioned on music and top tokens."""
    cfg.validate()
    t_top = np.asarray(t_top, dtype=np.int64)
    if t_top.min(initial=0) < 0 or t_top.max(initial=0) >= model.vocab:
        raise DuetError("incomplete-top")
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    m = None
    if music is not None:
        m = torch.from_numpy(np.asarray(music, dtype=np.float32))[None]
    return _iterative_fill(model, m, torch.from_numpy(t_top)[None], n,
                           cfg.bottom_iters, cfg, gen)


def save_masked_checkpoint(path, top_model: TokenTransformer,
                           bottom_model: TokenTransformer,
                           meta: dict | None = None) -> None:
    entries = {}
    for prefix, model in (("top", top_model), ("bottom", bottom_model)):
        for k, v in model.state_dict().items():
            entries[f"{prefix}/{k}"] = v.detach().cpu().numpy()
    metadata = dict(meta or {})
    metadata["top_config"] = json.dumps({
        "vocab": top_model.vocab, "max_len": top_model.max_len,
        "frames_per_token": top_model.frames_per_token})
    metadata["bottom_config"] = json.dumps({
        "vocab": bottom_model.vocab, "max_len": bottom_model.max_len,
        "frames_per_token": bottom_model.frames_per_token,
        "cond_vocab": bottom_model.cond_emb.num_embeddings,
        "cond_upsample": bottom_model.cond_upsample})
    write_archive(path, entries, MASKED_FORMAT, metadata=metadata)


def load_masked_checkpoint(path) -> tuple[TokenTransformer, TokenTransformer, dict]:
    entries, manifest = read_archive(path, expected_format=MASKED_FORMAT)
    meta = manifest.metadata
    top_cfg = json.loads(meta["top_config"])
    bot_cfg = json.loads(meta["bottom_config"])
    top = TokenTransformer(**top_cfg)
    bottom = TokenTransformer(**bot_cfg)
    for prefix, model in (("top", top), ("bottom", bottom)):
        state = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
                 for k, v in entries.items() if k.startswith(prefix + "/")}
        model.load_state_dict(state)
        model.eval()
    return top, bottom, meta
