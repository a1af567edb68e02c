"""Command-line entry point.

Subcommands: synth, train, eval, infer, gradcheck. Exit codes: 0 success,
1 usage error, 2 data error (bad manifest, missing files, checkpoint/config
mismatch, skipped clips), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("avbinaural")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the run seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, help="parallel window evaluations at inference")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="avbinaural", description="Visually guided mono-to-binaural generation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic binaural dataset")
    s.add_argument("--clips", type=int, help="number of clips")
    s.add_argument("--itd", action="store_true", help="add interaural time differences")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint (last.ckpt)")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--tdss", type=_on_off, action="append", help="on/off; repeat for both")
    e.add_argument("--baseline", action="store_true", help="score the mono-mono baseline instead")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))

    i = sub.add_parser("infer", parents=[common], help="binauralise clips")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--tdss", type=_on_off)
    i.add_argument("--manifest", type=Path, help="clips to process (all splits)")
    i.add_argument("--wav", type=Path, help="single clip: mono or stereo WAV")
    i.add_argument("--frames", type=Path, help="single clip: directory of PNG frames")
    i.add_argument("--fps", type=int, default=10)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--skip-model", action="store_true", help="primitives and losses only")
    return p


def _load_cfg(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.optim.seed = args.seed
        if args.command == "synth":
            cfg.data.seed = args.seed
    if getattr(args, "threads", None):
        cfg.infer.threads = args.threads
    if args.out is not None:
        if args.command == "synth":
            cfg.data.root = str(args.out)
            cfg.data.manifest = None
        else:
            cfg.infer.out_dir = str(args.out)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_synth(cfg, force: bool = False) -> Path:
    from .data import write_synthetic_dataset

    root = Path(cfg.data.root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise UsageError(f"{root} exists and is not empty (use --force)")
        shutil.rmtree(root)
    return write_synthetic_dataset(
        root,
        n_clips=cfg.data.n_clips,
        seed=cfg.data.seed,
        ratios=tuple(cfg.data.ratios),
        itd=cfg.data.itd,
        drift_fraction=cfg.data.drift_fraction,
        duration_s=cfg.data.duration_s,
        source=cfg.data.source,
    )


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    if args.clips is not None:
        cfg.data.n_clips = args.clips
    if args.itd:
        cfg.data.itd = True
    path = run_synth(cfg, args.force)
    print(f"wrote {cfg.data.n_clips} clips; manifest {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import run_train

    cfg = _load_cfg(args)
    out = Path(cfg.infer.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    best = run_train(cfg, out, resume=args.checkpoint)
    print(f"best checkpoint: {best}")
    return EXIT_OK


def run_eval(cfg, checkpoint: Path | None, tdss_modes: list[bool], baseline: bool, split: str = "test"):
    """Evaluate and write ``report_<label>.json/.csv``; returns {label: report}."""
    from .checkpoint import model_from_checkpoint
    from .data import load_manifest
    from .inference import EvalOptions, evaluate_split, model_predictor, zero_predictor

    manifest = load_manifest(cfg.data.manifest_path()).split(split)
    out = Path(cfg.infer.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    if baseline:
        runs = [("baseline", zero_predictor, True)]
    else:
        if checkpoint is None:
            raise UsageError("eval needs --checkpoint unless --baseline is given")
        model = model_from_checkpoint(checkpoint, expected_hash=cfg.model.hash())
        pred = model_predictor(model)
        runs = [(f"tdss_{'on' if t else 'off'}", pred, t) for t in tdss_modes]
    for label, predictor, tdss in runs:
        opts = EvalOptions(
            tdss=tdss,
            batch=cfg.infer.batch,
            threads=cfg.infer.threads,
            target_rms=cfg.data.target_rms,
            label=label,
            extra={"split": split, "model_hash": None if baseline else cfg.model.hash()},
        )
        rep = evaluate_split(manifest, predictor, opts)
        (out / f"report_{label}.json").write_text(rep.to_json())
        (out / f"report_{label}.csv").write_text(rep.to_csv())
        print(f"[{label}] {len(rep.per_clip)} clips, {len(rep.skipped)} skipped")
        print(rep.table())
        reports[label] = rep
    return reports


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    modes = args.tdss if args.tdss else [cfg.infer.tdss]
    reports = run_eval(cfg, args.checkpoint, modes, args.baseline, args.split)
    return EXIT_OK if all(not r.skipped for r in reports.values()) else EXIT_DATA


def spectrogram_image(diff: np.ndarray, floor_db: float = -80.0) -> np.ndarray:
    """8-bit log-magnitude image: 0 dB (the peak) -> 255, ``floor_db`` and below -> 0.

    Low frequencies are at the bottom row.
    """
    mag = np.abs(diff)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    db = 20 * np.log10(np.maximum(mag / peak, 1e-12))
    scaled = np.clip((db - floor_db) / -floor_db, 0, 1)
    return np.round(scaled[::-1] * 255).astype(np.uint8)


def _infer_one(model_pred, mono, frame_at, fps, cfg, tdss, out: Path, name: str, scale: float):
    from .dsp import stft, write_wav
    from .inference import binauralize_clip

    stereo = binauralize_clip(mono, frame_at, model_pred, tdss, fps, cfg.infer.batch, cfg.infer.threads)
    stereo = stereo / scale
    write_wav(out / f"{name}.wav", stereo)
    if cfg.infer.spectrogram_images:
        img = spectrogram_image(stft(stereo[0] - stereo[1]))
        Image.fromarray(img, mode="L").save(out / f"{name}_diff.png")


def cmd_infer(args) -> int:
    from .checkpoint import model_from_checkpoint
    from .data import FRAME_H, FRAME_W, LoadedClip, load_manifest, resize_bilinear
    from .dsp import WaveformClip, load_clip, rms_normalize
    from .inference import model_predictor

    cfg = _load_cfg(args)
    tdss = cfg.infer.tdss if args.tdss is None else args.tdss
    out = Path(cfg.infer.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = model_from_checkpoint(args.checkpoint, expected_hash=cfg.model.hash())
    pred = model_predictor(model)
    if args.wav is not None:
        if args.frames is None:
            raise UsageError("--wav needs --frames")
        clip = load_clip(args.wav)
        mono = clip.samples.sum(axis=0)
        norm, scale = rms_normalize(WaveformClip(mono[None], ("M",)), cfg.data.target_rms)
        paths = sorted(args.frames.glob("*.png"))
        if not paths:
            raise FileNotFoundError(f"no PNG frames in {args.frames}")

        def frame_at(i):
            with Image.open(paths[min(i, len(paths) - 1)]) as im:
                arr = np.asarray(im.convert("RGB"))
            return arr if arr.shape[:2] == (FRAME_H, FRAME_W) else resize_bilinear(arr, FRAME_H, FRAME_W)

        _infer_one(pred, norm.samples[0], frame_at, args.fps, cfg, tdss, out, args.wav.stem, scale)
        print(f"wrote {out / (args.wav.stem + '.wav')}")
        return EXIT_OK
    manifest = load_manifest(args.manifest or cfg.data.manifest_path())
    for rec in manifest:
        clip = LoadedClip(rec, cfg.data.target_rms)
        mono = clip.stereo.sum(axis=0)
        _infer_one(pred, mono, clip.frame, rec.fps, cfg, tdss, out, rec.clip_id, clip.scale)
    print(f"wrote {len(manifest)} clips to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import MODEL_TOL, TOL, miniature_model_check, run_primitive_suite

    seed = 0 if args.seed is None else args.seed
    results = run_primitive_suite(seed)
    ok = True
    by_name: dict[str, list] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    for name, rows in by_name.items():
        worst = max(r.worst for r in rows)
        passed = all(r.passed for r in rows)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<20s} shapes={len(rows)} worst={worst:.2e} tol={TOL:g}")
    if not args.skip_model:
        rep = miniature_model_check(seed)
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {'miniature_model':<20s} worst={rep.worst:.2e} tol={MODEL_TOL:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import ManifestError
    from .train import NumericFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostics, indent=2, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
