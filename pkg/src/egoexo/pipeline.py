"""End-to-end composition: predicted ego masks from the exo clip and g1, then
mask-guided generation of the ego frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion as D
from . import segnet


@dataclass
class Models:
    seg_cfg: segnet.SegConfig | None
    seg: object
    diff_cfg: D.DiffConfig
    unet: object
    text: object
    mask: object

    @property
    def schedule(self):
        c = self.diff_cfg
        return D.make_schedule(c.T, c.beta_start, c.beta_end)


def check_compatible(models: Models, n_frames: int, res: int):
    """Raise ValueError when the checkpoints cannot process clips of this size."""
    c = models.diff_cfg
    if res % c.patch:
        raise ValueError(f"resolution {res} is not divisible by the latent patch {c.patch}")
    if (res // c.patch) % 4:
        raise ValueError(f"latent size {res // c.patch} must be divisible by 4 for the UNet")
    if res % 2 ** (len(c.mask_widths)) or res % 16:
        raise ValueError(f"resolution {res} is incompatible with the encoder strides")
    if n_frames > c.max_frames:
        raise ValueError(f"{n_frames} frames exceeds the diffusion checkpoint's max_frames={c.max_frames}")


def predict_masks(sample, models: Models) -> np.ndarray:
    if models.seg is None:
        raise ValueError("a segmentation checkpoint is required unless oracle masks are used")
    return segnet.rollout(sample.exo_clip, sample.exo_masks, sample.ego_clip[0], models.seg, models.seg_cfg)


def infer_sample(sample, models: Models, steps: int = 20, seed: int = 0, oracle_masks: bool = False):
    """Returns (frames ``[N,3,H,W]``, masks ``[N,H,W]``) for one sample.

    With ``oracle_masks`` the ground-truth ego masks replace the rollout; the
    generation path is otherwise identical.
    """
    masks = sample.ego_masks.copy() if oracle_masks else predict_masks(sample, models)
    frames = D.ddim_sample(sample.ego_clip[0], sample.tokens, masks, models.unet, models.mask, models.text,
                           models.schedule, models.diff_cfg, steps, seed)
    return frames, masks.astype(np.uint8)


def first_frame_copy(sample) -> np.ndarray:
    """Baseline that repeats g1 for every frame."""
    return np.repeat(sample.ego_clip[:1], sample.n_frames, axis=0)
