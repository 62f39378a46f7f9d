"""Sketch-to-image translation on a frozen miniature latent diffusion backbone.

The package trains a small latent autoencoder and conditional denoiser once,
freezes them, and then learns only a lightweight per-position feature
translator that maps sketch features into image-domain latent codes. Images
are synthesized by noising that latent partway and denoising it back.
"""

import os

# The workload is many small float64 GEMMs; threaded BLAS loses to its own
# synchronization overhead here (measured ~1.4x slower). Only takes effect
# if numpy has not been imported yet.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"

from .rng import Rng
from .schedule import (NoiseSchedule, make_schedule, q_step, q_sample,
                       invert_q_sample, posterior_mean, p_step, ddpm_loss)

__all__ = [
    "Rng", "NoiseSchedule", "make_schedule", "q_step", "q_sample",
    "invert_q_sample", "posterior_mean", "p_step", "ddpm_loss",
    "__version__",
]
