"""Training loops for the tokenizer, the masked transformers, the trajectory
refiner, and the metric feature extractor.

All loops are deterministic under a fixed seed: batching uses a seeded
numpy generator, parameter init and sampling use seeded torch generators,
and no worker processes are involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from . import maskgen
from .metrics import MotionFeatureExtractor, _PersonAutoencoder, recon_errors
from .refine import TrajRegressor, _LOCAL_COLS, _TRAJ_COLS, refine_loss
from .representation import (PERSON_DIM, DuetClip, FeatureStats,
                             decode_features, normalize)
from .skeleton import Skeleton
from .diffkin import features_to_world
from .vqvae import (HierVQVAE, SingleVQVAE, single_vq_losses, vq_losses)


@dataclass
class OptimConfig:
    lr: float = 2e-4
    batch_size: int = 8
    epochs: int = 50


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _loss_scalar(value: torch.Tensor, denom: float) -> float:
    return float(value.detach()) / denom


def train_vqvae(model, x: np.ndarray, music: np.ndarray, stats: FeatureStats,
                skel: Skeleton, optim: OptimConfig, seed: int,
                log=None) -> list[dict]:
    """Train a hierarchical or single-level tokenizer on normalized windows.

    ``x`` is (n, N, 536) float32, ``music`` (n, N, 92) float32.  Returns the
    per-epoch history (losses normalized per element, codebook utilization).
    """
    hierarchical = isinstance(model, HierVQVAE)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr)
    xs = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    ms = torch.from_numpy(np.ascontiguousarray(music, dtype=np.float32))
    n = xs.shape[0]
    denom = float(np.prod(x.shape[1:]))
    # ground-truth world positions / pair distances are constant across steps
    with torch.no_grad():
        mean = torch.as_tensor(stats.mean, dtype=torch.float32)
        std = torch.as_tensor(stats.std, dtype=torch.float32)
        gt_parts = [features_to_world(xs[i:i + 16] * std + mean, skel)
                    for i in range(0, n, 16)]
        gt_a = torch.cat([p[0] for p in gt_parts])
        gt_b = torch.cat([p[1] for p in gt_parts])
        gt_d = torch.cat([torch.cdist(gt_a[i:i + 16], gt_b[i:i + 16])
                          for i in range(0, n, 16)])
    history = []
    model.train()
    for epoch in range(optim.epochs):
        sums = {}
        steps = 0
        for idx in _batches(n, optim.batch_size, rng):
            xb = xs[idx]
            mb = ms[idx]
            gt_world = (gt_a[idx], gt_b[idx], gt_d[idx])
            out = model(xb, mb)
            if hierarchical:
                losses = vq_losses(xb, out, skel, stats, model.cfg, gt_world)
            else:
                losses = single_vq_losses(xb, out, skel, stats, model.cfg, gt_world)
            opt.zero_grad()
            losses["l_total"].backward()
            opt.step()
            with torch.no_grad():
                if hierarchical:
                    model.book_top.ema_update_and_reset(out["z_top_pre"],
                                                        out["ids_top"], rng)
                    model.book_bot.ema_update_and_reset(out["z_bot_pre"],
                                                        out["ids_bot"], rng)
                else:
                    model.book.ema_update_and_reset(out["z_pre"], out["ids"], rng)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + _loss_scalar(v, denom * len(idx))
            steps += 1
        record = {k: v / steps for k, v in sums.items()}
        record["epoch"] = epoch
        if hierarchical:
            record["util_top"] = model.book_top.utilization()
            record["util_bot"] = model.book_bot.utilization()
        else:
            record["util"] = model.book.utilization()
        history.append(record)
        if log and (epoch % 10 == 0 or epoch == optim.epochs - 1):
            log(f"epoch {epoch}: total {record['l_total']:.5f}")
    model.eval()
    return history


@torch.no_grad()
def reconstruct_windows(model, x: np.ndarray, music: np.ndarray) -> np.ndarray:
    """Eval-mode reconstructions of normalized windows (either model kind)."""
    model.eval()
    outs = []
    for i in range(0, x.shape[0], 8):
        xb = torch.from_numpy(np.ascontiguousarray(x[i:i + 8], dtype=np.float32))
        mb = torch.from_numpy(np.ascontiguousarray(music[i:i + 8], dtype=np.float32))
        outs.append(model(xb, mb)["x_hat"].numpy())
    return np.concatenate(outs, axis=0)


def eval_reconstruction_mpjpe(model, x: np.ndarray, music: np.ndarray,
                              stats: FeatureStats, skel: Skeleton) -> dict:
    """Mean test-set reconstruction errors after decoding to world space."""
    x_hat = reconstruct_windows(model, x, music)
    keys = ("mpjpe_a", "mpjpe_b", "mpjve_a", "mpjve_b", "rde")
    totals = {k: 0.0 for k in keys}
    for i in range(x.shape[0]):
        gt = decode_features(DuetClip(features=x[i].astype(np.float64),
                                      normalized=True), skel, stats=stats)
        rec = decode_features(DuetClip(features=x_hat[i].astype(np.float64),
                                       normalized=True), skel, stats=stats)
        errs = recon_errors(gt, rec, skel)
        for k in keys:
            totals[k] += errs[k]
    out = {k: v / x.shape[0] for k, v in totals.items()}
    out["mpjpe"] = (out["mpjpe_a"] + out["mpjpe_b"]) / 2.0
    return out


def train_masked_stage(model: maskgen.TokenTransformer, sequences: np.ndarray,
                       music: np.ndarray, optim: OptimConfig, seed: int,
                       cond_sequences: np.ndarray | None = None,
                       cond_dropout: float = 0.10, log=None) -> list[dict]:
    """Masked-token training for one transformer stage.

    ``sequences`` is (n, L) int64 token ids; ``music`` (n, N, 92);
    ``cond_sequences`` the complete top-level ids for the bottom stage.
    Music conditioning is dropped for ~10% of the optimization steps to
    train the classifier-free pathway.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr)
    n, length = sequences.shape
    ms = torch.from_numpy(np.ascontiguousarray(music, dtype=np.float32))
    cond = None
    if cond_sequences is not None:
        cond = torch.from_numpy(np.ascontiguousarray(cond_sequences, dtype=np.int64))
    history = []
    model.train()
    for epoch in range(optim.epochs):
        total, steps = 0.0, 0
        for idx in _batches(n, optim.batch_size, rng):
            ids = np.empty((len(idx), length), dtype=np.int64)
            flags = np.empty((len(idx), length), dtype=bool)
            for row, src in enumerate(idx):
                tau = rng.uniform()
                masked = maskgen.apply_training_mask(sequences[src], rng, tau,
                                                     model.vocab)
                ids[row] = masked.ids
                flags[row] = masked.mask_flags
            flags_t = torch.from_numpy(flags)
            if not flags_t.any():
                continue
            use_music = rng.random() >= cond_dropout
            logits = model(torch.from_numpy(ids),
                           ms[idx] if use_music else None,
                           cond_ids=cond[idx] if cond is not None else None)
            targets = torch.from_numpy(sequences[idx])
            loss = F.cross_entropy(logits[flags_t], targets[flags_t])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            steps += 1
        history.append({"epoch": epoch, "nll": total / max(steps, 1)})
        if log and (epoch % 20 == 0 or epoch == optim.epochs - 1):
            log(f"epoch {epoch}: nll {history[-1]['nll']:.4f}")
    model.eval()
    return history


def train_refiner(model: TrajRegressor, windows: np.ndarray,
                  optim: OptimConfig, seed: int, log=None) -> list[dict]:
    """Train the trajectory regressor on un-normalized feature windows."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=optim.lr)
    local = torch.from_numpy(np.ascontiguousarray(
        windows[:, :, _LOCAL_COLS], dtype=np.float32))
    traj = torch.from_numpy(np.ascontiguousarray(
        windows[:, :, _TRAJ_COLS], dtype=np.float32))
    n = local.shape[0]
    denom = float(windows.shape[1])
    history = []
    model.train()
    for epoch in range(optim.epochs):
        total, steps = 0.0, 0
        for idx in _batches(n, optim.batch_size, rng):
            pred = model(local[idx])
            loss = refine_loss(pred, traj[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) / (denom * len(idx))
            steps += 1
        history.append({"epoch": epoch, "loss": total / max(steps, 1)})
        if log and (epoch % 10 == 0 or epoch == optim.epochs - 1):
            log(f"epoch {epoch}: loss {history[-1]['loss']:.5f}")
    model.trained = True
    model.eval()
    return history


def train_extractor(windows: np.ndarray, frames: int, optim: OptimConfig,
                    seed: int, latent: int = 64, width: int = 96,
                    log=None) -> tuple[MotionFeatureExtractor, list[dict]]:
    """Train the per-person autoencoder behind FID/PFID on ground truth.

    ``windows`` is (n, frames, 536) un-normalized; both person blocks feed
    the same encoder.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    blocks = np.concatenate([windows[:, :, :PERSON_DIM],
                             windows[:, :, PERSON_DIM:]], axis=0)
    mean = blocks.reshape(-1, PERSON_DIM).mean(axis=0)
    std = np.maximum(blocks.reshape(-1, PERSON_DIM).std(axis=0), 1e-8)
    xs = torch.from_numpy(((blocks - mean) / std).astype(np.float32)).transpose(1, 2)

    net = _PersonAutoencoder(frames=frames, latent=latent, width=width)
    opt = torch.optim.Adam(net.parameters(), lr=optim.lr)
    n = xs.shape[0]
    history = []
    net.train()
    for epoch in range(optim.epochs):
        total, steps = 0.0, 0
        for idx in _batches(n, optim.batch_size, rng):
            xb = xs[idx]
            rec, _ = net(xb)
            loss = F.mse_loss(rec, xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            steps += 1
        history.append({"epoch": epoch, "mse": total / max(steps, 1)})
        if log and (epoch % 10 == 0 or epoch == optim.epochs - 1):
            log(f"epoch {epoch}: mse {history[-1]['mse']:.5f}")
    net.eval()
    return (MotionFeatureExtractor(net, mean, std,
                                   train_loss=history[-1]["mse"]), history)
