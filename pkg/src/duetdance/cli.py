"""Command-line pipeline: data preparation, the three training stages,
generation, reconstruction, evaluation, and motion export.

Every artifact embeds the seed and a config snapshot; stage dependencies are
checked up front and reported with named errors.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time

import numpy as np
import torch

from . import maskgen, metrics
from .archive import archive_hash
from .config import RunConfig, config_hash, load_config, save_config
from .dataset import (DatasetManifest, load_clip, load_stats, build_dataset,
                      save_clip)
from .errors import DuetError
from .maskgen import (MASKED_FORMAT, GenConfig, TokenTransformer,
                      generate_bottom, generate_top, load_masked_checkpoint,
                      save_masked_checkpoint)
from .metrics import (EXTRACTOR_FORMAT, fid_pfid_div, ground_align,
                      load_extractor, recon_errors, save_extractor)
from .music import detect_music_beats, extract_features, load_audio
from .refine import (REFINER_FORMAT, TrajRegressor, load_refiner_checkpoint,
                     refine_clip, save_refiner_checkpoint)
from .representation import DuetClip, decode_features, denormalize, normalize
from .skeleton import Skeleton, default_skeleton
from .training import (OptimConfig, eval_reconstruction_mpjpe, seed_everything,
                       train_extractor, train_masked_stage, train_refiner,
                       train_vqvae)
from .vqvae import (VQ_FORMAT, HierVQVAE, load_vq_checkpoint,
                    save_vq_checkpoint)

STAGE_PATHS = {
    "dataset": "dataset",
    "extractor": "extractor.ckpt",
    "vqvae": "vqvae.ckpt",
    "masked": "masked.ckpt",
    "refiner": "refiner.ckpt",
}


@contextlib.contextmanager
def output_lock(out_dir):
    """One command at a time per output directory."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DuetError("locked", f"another command holds {lock_path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock_path)


def _stage_path(cfg: RunConfig, stage: str) -> str:
    return os.path.join(cfg.out_dir, STAGE_PATHS[stage])


def _require_stage(cfg: RunConfig, stage: str, format_tag: str, hint: str) -> str:
    path = _stage_path(cfg, stage)
    probe = os.path.join(path, "manifest.json")
    if not os.path.exists(probe):
        raise DuetError("missing-stage-input",
                        f"missing-stage-input: {format_tag} "
                        f"(expected at {path}; run `{hint}` first)")
    return path


def _provenance(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": config_hash(cfg),
            "created": time.strftime("%Y-%m-%dT%H:%M:%S")}


def _write_log(cfg: RunConfig, stage: str, payload: dict) -> None:
    log_dir = os.path.join(cfg.out_dir, "logs")
    os.makedirs(log_dir, exist_ok=True)
    payload = dict(payload)
    payload["provenance"] = _provenance(cfg)
    payload["config"] = json.loads(cfg.to_json())
    with open(os.path.join(log_dir, f"{stage}.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def _load_dataset(cfg: RunConfig):
    path = _require_stage(cfg, "dataset", "duet-dataset-v1", "prepare")
    manifest = DatasetManifest.load(os.path.join(path, "manifest.json"))
    stats = load_stats(os.path.join(path, "stats"))
    skel = Skeleton.load(os.path.join(path, "skeleton.json"))
    return manifest, stats, skel, path


def _load_windows(path, manifest, split, stats=None):
    """Stacked feature/music windows for a split; normalized when stats given."""
    xs, ms, ids, beats = [], [], [], []
    for cid in manifest.ids(split):
        clip, music, meta = load_clip(os.path.join(path, "clips", cid))
        if stats is not None:
            clip = normalize(clip, stats)
        xs.append(clip.features.astype(np.float32))
        ms.append(music.astype(np.float32))
        ids.append(cid)
        beats.append(meta.get("beats", []))
    if not xs:
        raise DuetError("empty-dataset", f"no clips in split {split!r}")
    return np.stack(xs), np.stack(ms), ids, beats


def cmd_prepare(cfg: RunConfig, log=print) -> dict:
    """Synthesize the corpus, compute stats, train the metric extractor."""
    seed_everything(cfg.seed)
    skel = default_skeleton()
    ds_dir = _stage_path(cfg, "dataset")
    t0 = time.time()
    log(f"building dataset under {ds_dir}")
    manifest = build_dataset(cfg.dataset, skel, ds_dir)
    skel.save(os.path.join(ds_dir, "skeleton.json"))
    log(f"dataset: {len(manifest.ids('train'))} train / "
        f"{len(manifest.ids('test'))} test windows in {time.time() - t0:.0f}s")

    x_train, _, _, _ = _load_windows(ds_dir, manifest, "train")
    extractor, history = train_extractor(
        x_train, frames=cfg.dataset.window, optim=cfg.optim_extractor,
        seed=cfg.seed, latent=cfg.extractor.latent, width=cfg.extractor.width,
        log=lambda m: log(f"extractor {m}"))
    save_extractor(_stage_path(cfg, "extractor"), extractor,
                   meta=_provenance(cfg))
    _write_log(cfg, "prepare", {
        "train_windows": len(manifest.ids("train")),
        "test_windows": len(manifest.ids("test")),
        "extractor_history": history,
        "extractor_hash": archive_hash(_stage_path(cfg, "extractor")),
    })
    return {"dataset": ds_dir}


def _maybe_resume(path, loader, fresh, log):
    if not fresh and os.path.exists(os.path.join(path, "manifest.json")):
        log(f"resuming from {path}")
        return loader(path)
    return None


def cmd_train_vqvae(cfg: RunConfig, log=print, fresh: bool = False) -> dict:
    seed_everything(cfg.seed)
    manifest, stats, skel, ds_dir = _load_dataset(cfg)
    x_train, m_train, _, _ = _load_windows(ds_dir, manifest, "train", stats)
    x_test, m_test, _, _ = _load_windows(ds_dir, manifest, "test", stats)

    ckpt = _stage_path(cfg, "vqvae")
    resumed = _maybe_resume(ckpt, lambda p: load_vq_checkpoint(p)[0], fresh, log)
    model = resumed if resumed is not None else HierVQVAE(cfg.vq)
    history = train_vqvae(model, x_train, m_train, stats, skel, cfg.optim_vq,
                          seed=cfg.seed, log=lambda m: log(f"vqvae {m}"))
    errors = eval_reconstruction_mpjpe(model, x_test, m_test, stats, skel)
    log(f"test reconstruction: MPJPE {errors['mpjpe']:.1f} mm, "
        f"RDE {errors['rde']:.2f} mm")
    save_vq_checkpoint(ckpt, model, stats,
                       metadata={**_provenance(cfg), "stats_id": stats.stats_id or ""})
    _write_log(cfg, "train_vqvae", {
        "history": history, "test_errors": errors,
        "codebook_utilization": {"top": model.book_top.utilization(),
                                 "bot": model.book_bot.utilization()},
        "resumed": resumed is not None,
    })
    return errors


def _tokenize_windows(model, x, log):
    tops, bots = [], []
    for i in range(x.shape[0]):
        pair = model.tokenize(DuetClip(features=x[i].astype(np.float64),
                                       normalized=True))
        tops.append(pair.top)
        bots.append(pair.bot)
    return np.stack(tops), np.stack(bots)


def cmd_train_masked(cfg: RunConfig, log=print, fresh: bool = False) -> dict:
    seed_everything(cfg.seed)
    manifest, stats, skel, ds_dir = _load_dataset(cfg)
    vq_path = _require_stage(cfg, "vqvae", VQ_FORMAT, "train-vqvae")
    vq_model, _, _ = load_vq_checkpoint(vq_path)
    x_train, m_train, _, _ = _load_windows(ds_dir, manifest, "train", stats)

    log("tokenizing the training split")
    tops, bots = _tokenize_windows(vq_model, x_train, log)
    k = cfg.vq.codebook_size
    t = cfg.transformer
    ckpt = _stage_path(cfg, "masked")
    resumed = _maybe_resume(ckpt, lambda p: load_masked_checkpoint(p)[:2],
                            fresh, log)
    if resumed is not None:
        top_model, bottom_model = resumed
    else:
        top_model = TokenTransformer(
            vocab=k, max_len=2 * tops.shape[1], frames_per_token=cfg.vq.eta_top,
            width=t.width, layers=t.layers, heads=t.heads,
            music_width=t.music_width)
        bottom_model = TokenTransformer(
            vocab=k, max_len=2 * bots.shape[1], frames_per_token=cfg.vq.eta_bot,
            width=t.width, layers=t.layers, heads=t.heads,
            music_width=t.music_width, cond_vocab=k,
            cond_upsample=cfg.vq.eta_top // cfg.vq.eta_bot)
    hist_top = train_masked_stage(
        top_model, tops, m_train, cfg.optim_masked, seed=cfg.seed,
        cond_dropout=cfg.gen.cond_dropout, log=lambda m: log(f"top {m}"))
    hist_bot = train_masked_stage(
        bottom_model, bots, m_train, cfg.optim_masked, seed=cfg.seed + 1,
        cond_sequences=tops, cond_dropout=cfg.gen.cond_dropout,
        log=lambda m: log(f"bottom {m}"))
    save_masked_checkpoint(ckpt, top_model, bottom_model,
                           meta=_provenance(cfg))
    _write_log(cfg, "train_masked", {
        "history_top": hist_top, "history_bottom": hist_bot,
        "resumed": resumed is not None,
    })
    return {"top_nll": hist_top[-1]["nll"], "bottom_nll": hist_bot[-1]["nll"]}


def cmd_train_refiner(cfg: RunConfig, log=print, fresh: bool = False) -> dict:
    seed_everything(cfg.seed)
    manifest, stats, skel, ds_dir = _load_dataset(cfg)
    x_train, _, _, _ = _load_windows(ds_dir, manifest, "train")

    ckpt = _stage_path(cfg, "refiner")
    resumed = _maybe_resume(ckpt, lambda p: load_refiner_checkpoint(p)[0],
                            fresh, log)
    model = resumed if resumed is not None else TrajRegressor(
        width=cfg.refiner.width, blocks=cfg.refiner.blocks)
    history = train_refiner(model, x_train.astype(np.float64), cfg.optim_refiner,
                            seed=cfg.seed, log=lambda m: log(f"refiner {m}"))
    save_refiner_checkpoint(ckpt, model, meta=_provenance(cfg))
    _write_log(cfg, "train_refiner", {"history": history,
                                      "resumed": resumed is not None})
    return {"loss": history[-1]["loss"]}


def generate_clip(cfg: RunConfig, music_features: np.ndarray,
                  length_frames: int, seed: int, skel: Skeleton,
                  refine: bool = True) -> tuple[DuetClip, dict]:
    """Full generation pass: top tokens -> bottom tokens -> decode -> refine.

    Returns the un-normalized clip and the token sequences.
    """
    vq_model, stats, _ = load_vq_checkpoint(
        _require_stage(cfg, "vqvae", VQ_FORMAT, "train-vqvae"))
    top_model, bottom_model, _ = load_masked_checkpoint(
        _require_stage(cfg, "masked", MASKED_FORMAT, "train-masked"))
    if length_frames % cfg.vq.eta_top != 0:
        raise DuetError("bad-length",
                        f"length must divide by eta_top={cfg.vq.eta_top}")
    gen_cfg = GenConfig(**{**cfg.gen.__dict__, "seed": seed})
    n_top = length_frames // cfg.vq.eta_top
    n_bot = length_frames // cfg.vq.eta_bot
    t_top = generate_top(top_model, music_features, n_top, gen_cfg)
    t_bot = generate_bottom(bottom_model, music_features, t_top, n_bot, gen_cfg)

    from .vqvae import TokenPair
    pair = TokenPair(top=t_top, bot=t_bot, source_frames=length_frames)
    clip = vq_model.detokenize(pair, music=music_features)
    clip = denormalize(clip, stats)
    if refine:
        refiner, _ = load_refiner_checkpoint(
            _require_stage(cfg, "refiner", REFINER_FORMAT, "train-refiner"))
        clip = refine_clip(clip, refiner)
    return clip, {"top": t_top.tolist(), "bottom": t_bot.tolist()}


def export_motion_json(clip: DuetClip, skel: Skeleton, path) -> None:
    """Viewer-friendly per-frame world joint positions for both persons."""
    motion = decode_features(clip, skel)
    pa, pb = motion.world_positions(skel)
    doc = {
        "fps": motion.fps,
        "joint_names": skel.names,
        "frames": [{"a": np.round(pa[i], 6).tolist(),
                    "b": np.round(pb[i], 6).tolist()}
                   for i in range(motion.frames)],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def cmd_generate(cfg: RunConfig, music_path, length_frames: int, seed: int,
                 name: str = "gen", log=print) -> dict:
    seed_everything(seed)
    _, _, skel, _ = _load_dataset(cfg)
    audio = load_audio(music_path)
    music = extract_features(audio, length_frames).frames
    beats = detect_music_beats(audio)

    log(f"generating {length_frames} frames from {music_path} (seed {seed})")
    clip, tokens = generate_clip(cfg, music, length_frames, seed, skel)
    out_dir = os.path.join(cfg.out_dir, "generated", name)
    save_clip(out_dir, clip, music=music, metadata={
        **_provenance(cfg), "tokens": tokens, "gen_seed": seed,
        "beats": [float(b) for b in beats], "music_path": str(music_path)})
    export_path = os.path.join(cfg.out_dir, "generated", f"{name}_motion.json")
    export_motion_json(clip, skel, export_path)
    log(f"wrote {out_dir} and {export_path}")
    return {"clip": out_dir, "motion": export_path, "tokens": tokens}


def cmd_reconstruct(cfg: RunConfig, split: str = "test", log=print) -> dict:
    seed_everything(cfg.seed)
    manifest, stats, skel, ds_dir = _load_dataset(cfg)
    vq_model, _, _ = load_vq_checkpoint(
        _require_stage(cfg, "vqvae", VQ_FORMAT, "train-vqvae"))
    out_root = os.path.join(cfg.out_dir, "reconstructed", split)
    totals = {}
    ids = manifest.ids(split)
    for cid in ids:
        clip, music, meta = load_clip(os.path.join(ds_dir, "clips", cid))
        normed = normalize(clip, stats)
        pair = vq_model.tokenize(normed)
        rec = denormalize(vq_model.detokenize(pair, music=music), stats)
        save_clip(os.path.join(out_root, cid), rec, music=music,
                  metadata={**meta, "reconstruction_of": cid})
        errs = recon_errors(decode_features(clip, skel),
                            decode_features(rec, skel), skel)
        for k, v in errs.items():
            totals[k] = totals.get(k, 0.0) + v
    means = {k: v / len(ids) for k, v in totals.items()}
    means["mpjpe"] = (means["mpjpe_a"] + means["mpjpe_b"]) / 2.0
    log(f"{split}: token-roundtrip MPJPE {means['mpjpe']:.1f} mm, "
        f"RDE {means['rde']:.2f} mm over {len(ids)} clips")
    _write_log(cfg, f"reconstruct_{split}", {"errors": means, "clips": len(ids)})
    return means


def _load_clip_dir(root, stats=None):
    if not os.path.isdir(root):
        raise DuetError("empty-directory", f"no clip directory at {root}")
    out = []
    for entry in sorted(os.listdir(root)):
        path = os.path.join(root, entry)
        if os.path.isdir(path) and os.path.exists(os.path.join(path, "manifest.json")):
            clip, music, meta = load_clip(path)
            if clip.normalized:
                if stats is None:
                    raise DuetError("missing-stats",
                                    f"{entry} is normalized; stats required")
                clip = denormalize(clip, stats)
            out.append((entry, clip, meta))
    if not out:
        raise DuetError("empty-directory", f"no clip archives under {root}")
    return out


def cmd_evaluate(cfg: RunConfig, gen_dir, ref_dir, log=print) -> dict:
    seed_everything(cfg.seed)
    manifest, stats, skel, _ = _load_dataset(cfg)
    extractor_path = _stage_path(cfg, "extractor")
    if not os.path.exists(os.path.join(extractor_path, "manifest.json")):
        raise DuetError("missing-stage-input",
                        "missing-stage-input: feature-extractor "
                        f"(expected at {extractor_path}; run `prepare` first)")
    extractor = load_extractor(extractor_path)

    gen = _load_clip_dir(gen_dir, stats)
    ref = _load_clip_dir(ref_dir, stats)
    log(f"evaluating {len(gen)} generated vs {len(ref)} reference clips")

    dists = fid_pfid_div([c for _, c, _ in gen], [c for _, c, _ in ref], extractor)

    def per_clip(entries):
        cf, skate, bas = [], [], []
        for _, clip, meta in entries:
            motion = ground_align(decode_features(clip, skel), skel)
            cf.append(metrics.contact_frequency(motion, skel))
            skate.append(metrics.foot_skate(motion, skel))
            beats = np.asarray(meta.get("beats", []), dtype=np.float64)
            if beats.size:
                bas.append(metrics.beat_alignment(motion, beats, skel))
        return {
            "contact_frequency": float(np.mean(cf)),
            "foot_skate": float(np.mean(skate)),
            "beat_alignment": float(np.mean(bas)) if bas else None,
        }

    gen_stats = per_clip(gen)
    ref_stats = per_clip(ref)

    paired = {}
    ref_by_id = {name: clip for name, clip, _ in ref}
    matches = [(name, clip) for name, clip, _ in gen if name in ref_by_id]
    if matches:
        totals = {}
        for name, clip in matches:
            errs = recon_errors(decode_features(ref_by_id[name], skel),
                                decode_features(clip, skel), skel)
            for k, v in errs.items():
                totals[k] = totals.get(k, 0.0) + v
        paired = {k: v / len(matches) for k, v in totals.items()}

    report = {
        "fid": dists["fid"], "pfid": dists["pfid"], "div": dists["div"],
        "generated": gen_stats, "reference": ref_stats,
        "contact_frequency_difference": abs(gen_stats["contact_frequency"]
                                            - ref_stats["contact_frequency"]),
        "paired_errors": paired,
        "extractor_hash": archive_hash(extractor_path),
        "n_generated": len(gen), "n_reference": len(ref),
        **_provenance(cfg),
    }
    os.makedirs(os.path.join(cfg.out_dir, "reports"), exist_ok=True)
    report_path = os.path.join(cfg.out_dir, "reports", "evaluate.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    log(f"FID {report['fid']:.4f}  PFID {report['pfid']:.4f}  "
        f"Div {report['div']:.3f}  -> {report_path}")
    return report


def cmd_export(cfg: RunConfig, clip_path, out_path, log=print) -> dict:
    _, stats, skel, _ = _load_dataset(cfg)
    clip, _, _ = load_clip(clip_path)
    if clip.normalized:
        clip = denormalize(clip, stats)
    export_motion_json(clip, skel, out_path)
    log(f"wrote {out_path}")
    return {"motion": out_path}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duetdance",
        description="Music-driven two-person dance generation pipeline.")
    parser.add_argument("--config", default=None,
                        help="JSON run configuration (defaults apply if omitted)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic training")
    parser.add_argument("--out-dir", default=None,
                        help="override the configured output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", help="synthesize the dataset and train the metric extractor")
    for stage in ("train-vqvae", "train-masked", "train-refiner"):
        p = sub.add_parser(stage, help=f"run the {stage.split('-')[1]} training stage")
        p.add_argument("--fresh", action="store_true",
                       help="ignore an existing checkpoint instead of resuming")
    g = sub.add_parser("generate", help="generate a duet from music")
    g.add_argument("--music", required=True, help="input WAV file")
    g.add_argument("--length", type=int, default=400, help="frames to generate")
    g.add_argument("--name", default="gen", help="output clip name")
    r = sub.add_parser("reconstruct", help="tokenize and decode a dataset split")
    r.add_argument("--split", default="test", choices=("train", "test"))
    e = sub.add_parser("evaluate", help="metric report for generated vs reference clips")
    e.add_argument("--gen-dir", required=True)
    e.add_argument("--ref-dir", required=True)
    x = sub.add_parser("export", help="export a clip archive to a motion JSON")
    x.add_argument("--clip", required=True)
    x.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out_dir is not None:
            cfg.out_dir = args.out_dir
        if args.deterministic:
            cfg.deterministic = True
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)

        os.makedirs(cfg.out_dir, exist_ok=True)
        save_config(cfg, os.path.join(cfg.out_dir, "config.json"))
        with output_lock(cfg.out_dir):
            if args.command == "prepare":
                cmd_prepare(cfg)
            elif args.command == "train-vqvae":
                cmd_train_vqvae(cfg, fresh=args.fresh)
            elif args.command == "train-masked":
                cmd_train_masked(cfg, fresh=args.fresh)
            elif args.command == "train-refiner":
                cmd_train_refiner(cfg, fresh=args.fresh)
            elif args.command == "generate":
                cmd_generate(cfg, args.music, args.length,
                             cfg.seed if args.seed is None else args.seed,
                             name=args.name)
            elif args.command == "reconstruct":
                cmd_reconstruct(cfg, split=args.split)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.gen_dir, args.ref_dir)
            elif args.command == "export":
                cmd_export(cfg, args.clip, args.out)
        return 0
    except DuetError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
