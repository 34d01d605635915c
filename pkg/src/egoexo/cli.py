"""Command-line entry point: gen-data, train, infer, eval.

Exit codes: 0 success, 2 usage, 3 data or format problem, 4 non-finite
numbers during compute.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diffusion as D
from . import io as exio
from . import metrics, pipeline, segnet, synthworld, training
from .tensor import NonFiniteError

log = logging.getLogger("egoexo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_DIRS = ("checkpoints", "logs", "frames", "masks", "report")


class UsageError(Exception):
    pass


def worker_count() -> int:
    raw = os.environ.get("EXGN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EXGN_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_dirs(out) -> dict:
    root = Path(out)
    dirs = {name: root / name for name in RUN_DIRS}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _load_config(path):
    return cfgmod.load(path) if path else cfgmod.RunConfig()


def _read_data(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return synthworld.read_dataset(path)


# ---------------------------------------------------------------------------
# image writers
# ---------------------------------------------------------------------------

def write_pgm(path, mask):
    m = np.asarray(mask, dtype=np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n2\n".encode("ascii"))
        fh.write(m.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise exio.FormatError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_ppm(path, frame):
    img = np.clip(np.round(np.asarray(frame).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    count = cfg.world.count if args.count is None else args.count
    seed = cfg.seed if args.seed is None else args.seed
    w = cfg.world
    samples = synthworld.generate_dataset(seed, count, w.n_frames, w.res, w.actions)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    synthworld.write_dataset(samples, args.out)
    masks = np.stack([s.ego_masks for s in samples])
    exo = np.stack([s.exo_masks for s in samples])
    print(f"wrote {count} samples to {args.out}: N={w.n_frames} res={w.res}")
    for view, m in (("ego", masks), ("exo", exo)):
        fr = [float(np.mean(m == c)) for c in range(3)]
        print(f"  {view} class fractions: background {fr[0]:.4f} hand {fr[1]:.4f} object {fr[2]:.4f}")
    return EXIT_OK


def _load_phase1(path):
    entries = exio.load(path)
    if "diff/meta" not in entries:
        raise exio.FormatError(f"{path} is not a diffusion checkpoint")
    return D.from_checkpoint(entries)


def cmd_train(args) -> int:
    if args.stage == "diff2" and not args.init:
        raise UsageError("--stage diff2 requires --init pointing at a diff1 checkpoint")
    cfg = _load_config(args.config)
    data = _read_data(args.data)
    dirs = run_dirs(args.out)
    ckpt = str(dirs["checkpoints"] / f"{args.stage}.exgn")
    log_path = str(dirs["logs"] / f"{args.stage}.csv")
    if args.stage == "seg":
        tc = replace(cfg.train_seg, checkpoint_path=ckpt, log_path=log_path)
        _, tlog = training.train_segnet(data, tc, cfg.segnet)
    elif args.stage == "diff1":
        tc = replace(cfg.train_diff1, checkpoint_path=ckpt, log_path=log_path)
        _, _, tlog = training.train_diffusion_phase1(data, tc, cfg.diffusion)
    else:
        dcfg, unet, text, _ = _load_phase1(args.init)
        tc = replace(cfg.train_diff2, checkpoint_path=ckpt, log_path=log_path)
        _, tlog = training.train_diffusion_phase2(data, tc, dcfg, unet, text)
    losses = tlog.losses()
    print(f"{args.stage}: {len(losses)} logged steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def _load_models(seg_path, diff_path, need_seg):
    seg_cfg = seg_ps = None
    if seg_path:
        seg_ps, seg_cfg = segnet.from_checkpoint(exio.load(seg_path))
    elif need_seg:
        raise UsageError("--seg is required unless --oracle-masks is given")
    dcfg, unet, text, mask = _load_phase1(diff_path)
    if mask is None:
        raise exio.FormatError(f"{diff_path} has no mask-guidance parameters (needs a diff2 checkpoint)")
    return pipeline.Models(seg_cfg, seg_ps, dcfg, unet, text, mask)


def _sample_indices(selection, count):
    if selection in (None, "all"):
        return list(range(count))
    try:
        idx = [int(v) for v in str(selection).split(",")]
    except ValueError:
        raise UsageError(f"--sample must be 'all' or comma-separated integers, got {selection!r}") from None
    for i in idx:
        if not 0 <= i < count:
            raise UsageError(f"sample {i} outside dataset of {count}")
    return idx


def pred_path(frames_dir, i) -> Path:
    return Path(frames_dir) / f"sample{i:03d}.exgn"


def cmd_infer(args) -> int:
    data = _read_data(args.data)
    models = _load_models(args.seg, args.diff, not args.oracle_masks)
    pipeline.check_compatible(models, data[0].n_frames, data[0].ego_clip.shape[-1])
    dirs = run_dirs(args.out)
    for i in _sample_indices(args.sample, len(data)):
        frames, masks = pipeline.infer_sample(data[i], models, args.steps, args.seed, args.oracle_masks)
        for f in range(frames.shape[0]):
            write_ppm(dirs["frames"] / f"sample{i:03d}_frame{f:02d}.ppm", frames[f])
            write_pgm(dirs["masks"] / f"sample{i:03d}_frame{f:02d}.pgm", masks[f])
        exio.save(pred_path(dirs["frames"], i), {"pred/frames": frames.astype(np.float32),
                                                  "pred/masks": masks.astype(np.uint8)})
        print(f"sample {i}: wrote {frames.shape[0]} frames ({'oracle' if args.oracle_masks else 'predicted'} masks)")
    return EXIT_OK


def _eval_one(i, sample, frames_dir):
    path = pred_path(frames_dir, i)
    if not path.is_file():
        raise FileNotFoundError(f"missing prediction for sample {i}: {path}")
    pred = exio.load(path)
    if pred["pred/frames"].shape != sample.ego_clip.shape or pred["pred/masks"].shape != sample.ego_masks.shape:
        raise ValueError(f"prediction for sample {i} does not match the dataset clip shape")
    seg_rows, _ = metrics.evaluate_masks(pred["pred/masks"], sample.ego_masks)
    gen_rows, _ = metrics.evaluate_frames(pred["pred/frames"], sample.ego_clip, skip_first=True)
    return seg_rows, gen_rows


def evaluate_run(pred_dir, data, out_dir, workers=1) -> dict:
    frames_dir = Path(pred_dir) / "frames"
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda a: _eval_one(a[0], a[1], frames_dir), enumerate(data)))
    seg_rows, gen_rows = [], []
    for i, (sr, gr) in enumerate(results):
        seg_rows += [{"sample": i, **r} for r in sr]
        gen_rows += [{"sample": i, **r} for r in gr]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "seg_metrics.csv", ["sample", "frame", "class", "iou", "ca", "le"], seg_rows)
    _write_rows(out / "gen_metrics.csv", ["sample", "frame", "ssim", "psnr"], gen_rows)
    summary = {"samples": len(data), "segmentation": {}, "generation": {}}
    for cls in metrics.CLASS_SETS:
        sel = [r for r in seg_rows if r["class"] == cls]
        summary["segmentation"][cls] = {k: float(np.mean([r[k] for r in sel])) for k in ("iou", "ca", "le")}
    summary["generation"] = {k: float(np.mean([r[k] for r in gen_rows])) for k in ("ssim", "psnr")}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _write_rows(path, cols, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in cols})


def cmd_eval(args) -> int:
    data = _read_data(args.data)
    out = args.out or str(Path(args.pred) / "report")
    summary = evaluate_run(args.pred, data, out, worker_count())
    fg = summary["segmentation"]["fg"]
    gen = summary["generation"]
    print(f"fg IoU {fg['iou']:.4f} CA {fg['ca']:.4f} LE {fg['le']:.4f} | SSIM {gen['ssim']:.4f} "
          f"PSNR {gen['psnr']:.3f} dB")
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="egoexo", description="Cross-view ego video prediction on a toy world.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a paired ego/exo dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", choices=("seg", "diff1", "diff2"), required=True)
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="phase-1 diffusion checkpoint (required for diff2)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict masks and frames")
    i.add_argument("--seg")
    i.add_argument("--diff", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--sample", default="all")
    i.add_argument("--steps", type=int, default=20)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True)
    i.add_argument("--oracle-masks", action="store_true", help="use ground-truth ego masks instead of the rollout")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score an infer run against the dataset")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        worker_count()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"error: non-finite value: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (exio.FormatError, cfgmod.ConfigError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
