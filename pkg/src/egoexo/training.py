"""Losses, curricula and training loops for both stages."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as exio
from . import segnet
from . import tensor as T
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    ramp_fraction: float = 0.6  # curriculum and alpha both ramp over this share of steps
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    log_every: int = 1
    checkpoint_path: str | None = None
    checkpoint_every_epochs: int = 0  # 0: only at the end
    log_path: str | None = None

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must be in (0, 1]")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, step, loss, alpha=float("nan"), mask_frac=float("nan"), ms=0.0):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append({"step": int(step), "loss": float(loss), "alpha": float(alpha),
                             "mask_frac": float(mask_frac), "ms": float(ms)})

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def write_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "alpha", "mask_frac", "ms"])
            w.writeheader()
            for r in self.records:
                w.writerow(r)


# ---------------------------------------------------------------------------
# segmentation loss and schedules
# ---------------------------------------------------------------------------

def seg_loss(logits, target, bce_weight=1.0, dice_weight=1.0, smooth=1.0):
    """BCE (one-vs-rest over all three classes) + soft Dice over hand and object.

    ``logits``: ``[K,3,H,W]`` tensor, ``target``: ``[K,H,W]`` class ids.  Dice
    is computed per leading item and averaged.
    """
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 3 or logits.shape[2:] != target.shape[1:] \
            or logits.shape[0] != target.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match target {target.shape}")
    q = segnet.one_hot(target).astype(logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    p = T.exp(logp)
    log1mp = T.log(T.sub(1.0, T.clip(p, 0.0, 1.0 - 1e-7)))
    bce = T.scale(T.mean(T.add(T.mul(q, logp), T.mul(1.0 - q, log1mp))), -1.0)
    fg = T.getitem(p, (slice(None), slice(1, 3)))
    qf = q[:, 1:3]
    inter = T.tsum(T.mul(fg, qf), axis=(2, 3))  # [K,2]
    denom = T.add(T.tsum(fg, axis=(2, 3)), qf.sum(axis=(2, 3)) + smooth)
    dice = T.sub(1.0, T.mean(T.div(T.add(T.scale(inter, 2.0), smooth), denom)))
    return T.add(T.scale(bce, bce_weight), T.scale(dice, dice_weight))


def _ramp(step, total_steps, ramp_fraction):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    end = ramp_fraction * total_steps
    if step >= end:
        return 1.0
    return step / end


def curriculum_fraction(step: int, total_steps: int, ramp_fraction: float = 0.6) -> float:
    """Share of frames 2..N whose ego input is hidden at this step."""
    return _ramp(step, total_steps, ramp_fraction)


def anneal_alpha(step: int, total_steps: int, ramp_fraction: float = 0.6) -> float:
    return 1.0 - _ramp(step, total_steps, ramp_fraction)


def visible_frames(n_frames: int, fraction: float) -> list:
    """Visibility flags; hidden frames are taken from the end of the clip."""
    hidden = int(round(fraction * (n_frames - 1)))
    return [t < n_frames - hidden for t in range(n_frames)]


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

def _epoch_batches(n_items, batch_size, rng):
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def batch_iter(n_items, batch_size, seed):
    """Endless deterministic stream of (epoch, batch indices)."""
    rng = np.random.default_rng(seed)
    epoch = 0
    while True:
        for b in _epoch_batches(n_items, batch_size, rng):
            yield epoch, b
        epoch += 1


def stack_clips(dataset, idx):
    pick = [dataset[i] for i in idx]
    return (np.stack([s.exo_clip for s in pick]), np.stack([s.exo_masks for s in pick]),
            np.stack([s.ego_clip for s in pick]), np.stack([s.ego_masks for s in pick]))


# ---------------------------------------------------------------------------
# segmentation training
# ---------------------------------------------------------------------------

def seg_clip_loss(ps, cfg, exo, exo_m, ego, ego_m, alpha, visible, tc: TrainConfig):
    ego_in = ego.copy()
    for t, v in enumerate(visible):
        if not v:
            ego_in[:, t] = 0.0
    outs = segnet.forward_clips(exo, exo_m, ego_in, ps, cfg, [alpha] * len(visible), ego_m, visible)
    total = None
    for t, logits in enumerate(outs):
        lt = seg_loss(logits, ego_m[:, t], tc.bce_weight, tc.dice_weight)
        total = lt if total is None else T.add(total, lt)
    return total


def train_segnet(dataset, tc: TrainConfig, cfg: segnet.SegConfig | None = None, params=None):
    """Teacher-forced training with progressive ego masking and alpha annealing."""
    if not dataset:
        raise ValueError("empty dataset")
    cfg = cfg or segnet.SegConfig()
    ps = params if params is not None else segnet.init_params(cfg, tc.seed)
    opt = Adam(ps, lr=tc.learning_rate)
    tlog = TrainLog()
    n = dataset[0].n_frames
    steps_per_epoch = math.ceil(len(dataset) / tc.batch_size)
    stream = batch_iter(len(dataset), tc.batch_size, tc.seed)
    for step in range(tc.steps):
        t0 = time.perf_counter()
        epoch, idx = next(stream)
        exo, exo_m, ego, ego_m = stack_clips(dataset, idx)
        frac = curriculum_fraction(step, tc.steps, tc.ramp_fraction)
        alpha = anneal_alpha(step, tc.steps, tc.ramp_fraction)
        visible = visible_frames(n, frac)
        opt.zero_grad()
        with T.Tape() as tape:
            loss = seg_clip_loss(ps, cfg, exo, exo_m, ego, ego_m, alpha, visible, tc)
            T.backward(loss, tape)
        opt.step()
        if step % tc.log_every == 0 or step == tc.steps - 1:
            tlog.add(step, loss.item(), alpha, frac, 1e3 * (time.perf_counter() - t0))
        end_of_epoch = (step + 1) % steps_per_epoch == 0
        if tc.checkpoint_path and tc.checkpoint_every_epochs and end_of_epoch \
                and ((step + 1) // steps_per_epoch) % tc.checkpoint_every_epochs == 0:
            exio.save(tc.checkpoint_path, segnet.checkpoint_entries(ps, cfg))
        if step % 100 == 0:
            log.info("seg step %d loss %.4f alpha %.3f frac %.3f", step, loss.item(), alpha, frac)
    if tc.checkpoint_path:
        exio.save(tc.checkpoint_path, segnet.checkpoint_entries(ps, cfg))
    if tc.log_path:
        tlog.write_csv(tc.log_path)
    return ps, tlog


# ---------------------------------------------------------------------------
# diffusion training
# ---------------------------------------------------------------------------

@dataclass
class DiffTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    seed: int = 0
    log_every: int = 1
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def _diff_loop(dataset, tc, trainable, loss_fn, tag):
    opt = Adam(trainable, lr=tc.learning_rate)
    rng = np.random.default_rng([tc.seed, 7])
    stream = batch_iter(len(dataset), tc.batch_size, tc.seed)
    tlog = TrainLog()
    for step in range(tc.steps):
        t0 = time.perf_counter()
        _, idx = next(stream)
        batch = [dataset[i] for i in idx]
        opt.zero_grad()
        with T.Tape() as tape:
            loss = loss_fn(batch, rng)
            T.backward(loss, tape)
        opt.step()
        if step % tc.log_every == 0 or step == tc.steps - 1:
            tlog.add(step, loss.item(), ms=1e3 * (time.perf_counter() - t0))
        if step % 100 == 0:
            log.info("%s step %d loss %.4f", tag, step, loss.item())
    return tlog


def train_diffusion_phase1(dataset, tc: DiffTrainConfig, cfg=None, unet=None, text=None):
    """Backbone training without mask guidance.  Returns (unet, text, log)."""
    from . import diffusion as D

    if not dataset:
        raise ValueError("empty dataset")
    cfg = cfg or D.DiffConfig()
    unet = unet if unet is not None else D.init_unet(cfg, tc.seed)
    text = text if text is not None else D.init_text(cfg, tc.seed)
    schedule = D.make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    both = _merged(unet, text)

    def loss_fn(batch, rng):
        return D.train_loss(batch, unet, None, text, schedule, rng, cfg)

    tlog = _diff_loop(dataset, tc, both, loss_fn, "diff1")
    if tc.checkpoint_path:
        exio.save(tc.checkpoint_path, D.checkpoint_entries(cfg, unet, text))
    if tc.log_path:
        tlog.write_csv(tc.log_path)
    return unet, text, tlog


def train_diffusion_phase2(dataset, tc: DiffTrainConfig, cfg, unet, text, mask_ps=None):
    """Mask-encoder training on a frozen backbone.  Returns (mask params, log).

    The backbone and text table are frozen for the duration and restored to
    their previous trainable flags afterwards.
    """
    from . import diffusion as D

    if not dataset:
        raise ValueError("empty dataset")
    if unet is None or text is None:
        raise ValueError("phase 2 needs a phase-1 backbone")
    mask_ps = mask_ps if mask_ps is not None else D.init_mask_guide(cfg, tc.seed)
    schedule = D.make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    flags = [p.requires_grad for p in list(unet.values()) + list(text.values())]
    unet.set_trainable(False)
    text.set_trainable(False)

    def loss_fn(batch, rng):
        return D.train_loss(batch, unet, mask_ps, text, schedule, rng, cfg)

    try:
        tlog = _diff_loop(dataset, tc, mask_ps, loss_fn, "diff2")
    finally:
        for p, f in zip(list(unet.values()) + list(text.values()), flags):
            p.requires_grad = f
    if tc.checkpoint_path:
        exio.save(tc.checkpoint_path, D.checkpoint_entries(cfg, unet, text, mask_ps))
    if tc.log_path:
        tlog.write_csv(tc.log_path)
    return mask_ps, tlog


def _merged(*stores):
    from .nn import ParamStore

    out = ParamStore()
    for i, s in enumerate(stores):
        for k, p in s.items():
            out._params[f"{i}/{k}"] = p
    return out
