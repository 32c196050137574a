from .base import CheckpointError, GenerativeBackbone, load_checkpoint, save_checkpoint
from .pretrain import (
    DivergenceError,
    load_split_images,
    pretrain_diffusion,
    pretrain_gan,
    pretrain_vq,
)
from .schedule import NoiseSchedule, make_schedule, noise_to, v_target, zero_snr_rescale
from .style import StyleBackbone
from .unet import TASK_TOKENS, UNetBackbone
from .vq import VQBackbone

__all__ = [
    "CheckpointError",
    "DivergenceError",
    "GenerativeBackbone",
    "NoiseSchedule",
    "StyleBackbone",
    "TASK_TOKENS",
    "UNetBackbone",
    "VQBackbone",
    "load_checkpoint",
    "load_split_images",
    "make_schedule",
    "noise_to",
    "pretrain_diffusion",
    "pretrain_gan",
    "pretrain_vq",
    "save_checkpoint",
    "v_target",
    "zero_snr_rescale",
]
