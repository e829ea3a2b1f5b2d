"""Parallel-control Mamba: masked selective-scan conditioning for multi-signal latent diffusion.

Built on a small float64 reverse-mode autodiff over numpy.
"""

from .autodiff import Tape, Tensor, backward, finite_diff_grad
from .diffusion import (ConditionBundle, Denoiser, DiffusionSchedule, add_noise, cfg_combine,
                        ddim_sample, gen_synthetic, make_schedule, region_control_metrics,
                        training_loss)
from .masks import ControlMask, Rect, TokenLayout, flatten, make_masks, mask_drop, mask_paste, unflatten
from .pcm import GateConfig, PcmParams, pcm_forward, sample_gate_config
from .ssm import SsmParams, discretize, scan_chunked, scan_sequential, ssm_bidirectional

__version__ = "0.1.0"
