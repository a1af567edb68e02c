"""Training loop: sampled segments -> reconstruction + contrastive loss -> Adam."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, load_into, model_arrays, param_names, save_checkpoint
from .config import RunConfig
from .data import AugmentParams, ClipPool, augment_train, load_manifest, sample_training_pair
from .dsp import stft
from .inference import centre_crop
from .losses import embed_sets, loss_rec, loss_scl, spatial_shuffle
from .metrics import stft_distance
from .model import BinauralUNet, apply_mask, preprocess_frames, spec_to_input
from .optim import Adam, ParamGroup
from .rng import RngStreams

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "mse", "apm", "phs", "scl", "total")


class NumericFailure(RuntimeError):
    """A loss or gradient went non-finite; ``diagnostics`` says where."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class Batch:
    mono: np.ndarray  # complex (B, F, T)
    stereo_specs: np.ndarray  # complex (B, 2, F, T)
    frames_t: np.ndarray  # float (B, 224, 448, 3), 0..255
    frames_prev: np.ndarray


def make_batch(pairs, rng_aug: np.random.Generator | None) -> Batch:
    """STFTs and (optionally augmented) crops; both frames of a pair share one augmentation."""
    mono = stft(np.stack([p.mono for p in pairs]))
    stereo = stft(np.stack([p.stereo for p in pairs]))
    ft, fp = [], []
    for p in pairs:
        if rng_aug is not None:
            params = AugmentParams.draw(rng_aug)
            ft.append(augment_train(p.frame_t, params=params))
            fp.append(augment_train(p.frame_prev, params=params))
        else:
            ft.append(centre_crop(p.frame_t).astype(np.float32))
            fp.append(centre_crop(p.frame_prev).astype(np.float32))
    return Batch(mono, stereo, np.stack(ft), np.stack(fp))


def _pair(re: np.ndarray, im: np.ndarray):
    return ad.Tensor(np.ascontiguousarray(re)), ad.Tensor(np.ascontiguousarray(im))


def training_loss(model: BinauralUNet, batch: Batch, cfg: RunConfig, rng_shuffle: np.random.Generator):
    """Forward pass and total loss; returns (loss tensor, component dict)."""
    lc = cfg.loss
    bins = model.cfg.input_freq_bins
    dtype = model.dtype
    n = len(batch.mono)
    x = spec_to_input(batch.mono, bins, dtype)
    ua, skips = model.encode_audio(x)
    images = [batch.frames_t]
    if lc.lam > 0:
        neg = np.stack([spatial_shuffle(f, lc.shuffle_grid, rng_shuffle) for f in batch.frames_t])
        images += [batch.frames_prev, neg]
    vis = model.encode_image(preprocess_frames(np.concatenate(images), dtype))
    uv = vis[:n] if lc.lam > 0 else vis
    fused = model.cross_attention(ua, uv)
    mask = model.decode(fused, skips, uv)
    pred_re, pred_im = apply_mask(mask, x)

    gt = batch.stereo_specs[:, :, :bins].astype(np.complex128)
    gt_diff = gt[:, 0] - gt[:, 1]
    gt_diff = (gt_diff.real.astype(dtype), gt_diff.imag.astype(dtype))
    m_re, m_im = x[:, 0], x[:, 1]
    pred_l = (ad.scale(ad.add(pred_re, m_re), 0.5), ad.scale(ad.add(pred_im, m_im), 0.5))
    pred_r = (ad.scale(ad.sub(m_re, pred_re), 0.5), ad.scale(ad.sub(m_im, pred_im), 0.5))
    rec, parts = loss_rec(
        _pair(*gt_diff), (pred_re, pred_im), (gt[:, 0], gt[:, 1]), (pred_l, pred_r), lc
    )
    parts["scl"] = 0.0
    total = rec
    if lc.lam > 0:
        cb = embed_sets(model, ua, fused, vis[n : 2 * n], vis[2 * n :])
        scl = loss_scl(cb, lc)
        parts["scl"] = float(scl.data)
        total = ad.add(rec, ad.scale(scl, lc.lam))
    parts["total"] = float(total.data)
    return total, parts


def validation_score(model: BinauralUNet, batches: list[Batch]) -> float:
    """Mean per-segment STFT distance of the recovered stereo spectrograms."""
    model.eval()
    scores = []
    for b in batches:
        diff = model.predict_diff(b.mono, preprocess_frames(b.frames_t, model.dtype))
        for i in range(len(b.mono)):
            pred = np.stack([(b.mono[i] + diff[i]) / 2, (b.mono[i] - diff[i]) / 2])
            scores.append(stft_distance(pred, b.stereo_specs[i]))
    model.train()
    return math.fsum(scores) / len(scores)


def build_optimizer(model: BinauralUNet, cfg: RunConfig) -> Adam:
    groups = model.param_groups()
    return Adam([
        ParamGroup("image", groups["image"], cfg.optim.image_lr),
        ParamGroup("audio", groups["audio"], cfg.optim.audio_lr),
    ])


def _grad_norms(opt: Adam) -> dict:
    out = {}
    for g in opt.groups:
        sq = [float(np.sum(np.square(p.grad, dtype=np.float64))) for p in g.params if p.grad is not None]
        out[g.name] = math.sqrt(math.fsum(sq)) if sq else 0.0
    return out


def _save_state(path: Path, model, opt, streams, cfg: RunConfig, step: int, epoch: int, best: float, extra=None):
    arrays = dict(model_arrays(model))
    if opt is not None:
        arrays.update(opt.state_arrays(param_names(model)))
    meta = {
        "step": step,
        "epoch": epoch,
        "best_val": best if math.isfinite(best) else None,
        "run_config": cfg.to_dict(),
        "adam_steps": opt.step_count if opt is not None else 0,
        "rng": streams.state() if streams is not None else {},
        **(extra or {}),
    }
    return save_checkpoint(path, Checkpoint(model.cfg, arrays, meta))


def run_train(cfg: RunConfig, out_dir: str | Path, resume: str | Path | None = None) -> Path:
    """Train and return the path of the best checkpoint (by validation STFT distance)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    oc = cfg.optim
    streams = RngStreams(oc.seed)
    model = BinauralUNet(cfg.model, streams["init"])
    opt = build_optimizer(model, cfg)

    manifest = load_manifest(cfg.data.manifest_path())
    train_pool = ClipPool(manifest.split("train"), cfg.data.target_rms)
    val_pool = ClipPool(manifest.split("val"), cfg.data.target_rms)
    if len(train_pool) == 0:
        raise ValueError("no usable training clips")
    if len(val_pool) == 0:
        log.warning("no validation clips; scoring on training clips")
        val_pool = train_pool
    val_rng = streams["eval"]
    val_pairs = [sample_training_pair(val_pool.clips[i % len(val_pool)], val_rng) for i in range(oc.val_segments)]
    val_batches = [make_batch(val_pairs[i : i + oc.batch_size], None) for i in range(0, len(val_pairs), oc.batch_size)]

    step, start_epoch, best = 0, 0, math.inf
    if resume is not None:
        ck = load_checkpoint(resume)
        load_into(model, ck)
        opt.load_state_arrays(ck.arrays, param_names(model), ck.meta["adam_steps"])
        streams.set_state(ck.meta["rng"])
        step, start_epoch, best = ck.meta["step"], ck.meta["epoch"], ck.meta["best_val"]
        if best is None:
            best = math.inf

    loss_path = out / "losses.csv"
    mode = "a" if resume is not None and loss_path.exists() else "w"
    best_path = out / "best.ckpt"
    with open(loss_path, mode, newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if mode == "w":
            writer.writerow(LOSS_COLUMNS)
        model.train()
        for epoch in range(start_epoch, oc.epochs):
            t0 = time.perf_counter()
            for _ in range(oc.steps_per_epoch):
                step += 1
                pairs = train_pool.sample(streams["sampling"], oc.batch_size)
                batch = make_batch(pairs, streams["augment"] if oc.augment else None)
                loss, parts = training_loss(model, batch, cfg, streams["shuffle"])
                loss.backward()
                norms = _grad_norms(opt)
                if not (math.isfinite(parts["total"]) and all(math.isfinite(v) for v in norms.values())):
                    diag = {"step": step, "losses": parts, "grad_norms": norms}
                    (out / "failure.json").write_text(json.dumps(diag, indent=2, sort_keys=True, default=str))
                    raise NumericFailure(f"non-finite loss or gradient at step {step}", diag)
                opt.step()
                writer.writerow([step] + [repr(parts[k]) for k in LOSS_COLUMNS[1:]])
            f.flush()
            val = validation_score(model, val_batches)
            log.info("epoch %d step %d val stft %.5f (%.1fs)", epoch + 1, step, val, time.perf_counter() - t0)
            if val < best:
                best = val
                _save_state(best_path, model, None, None, cfg, step, epoch + 1, best)
            _save_state(out / "last.ckpt", model, opt, streams, cfg, step, epoch + 1, best)
    if not best_path.exists():
        _save_state(best_path, model, None, None, cfg, step, oc.epochs, best)
    return best_path
