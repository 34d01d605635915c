"""Cross-view ego video prediction on a procedurally generated ego/exo world.

Two stages: a memory-attention network predicts ego hand/object masks from
an exo clip plus the first ego frame, then a mask-guided latent video
diffusion model generates the ego frames.  Everything, including the
autodiff engine, runs on numpy (with numba kernels where it pays).
"""

__version__ = "0.1.0"
