"""Manifold learner (VAE), base segmenter (UNet), their losses and training."""

from .checkpoint import load_model, save_model
from .losses import (
    DICE_EPS,
    LatentCode,
    dice_loss,
    dice_loss_per_sample,
    dice_score,
    kl_standard_normal,
    mse,
)
from .optim import AdamState, adam_step
from .training import train_segmenter, train_vae
from .unet import SegModel, init_unet, predict_proba, unet_forward
from .vae import VaeModel, decode_latent, encode_latent, init_vae, vae_forward, vae_loss

__all__ = [
    "AdamState",
    "DICE_EPS",
    "LatentCode",
    "SegModel",
    "VaeModel",
    "adam_step",
    "decode_latent",
    "dice_loss",
    "dice_loss_per_sample",
    "dice_score",
    "encode_latent",
    "init_unet",
    "init_vae",
    "kl_standard_normal",
    "load_model",
    "mse",
    "predict_proba",
    "save_model",
    "train_segmenter",
    "train_vae",
    "unet_forward",
    "vae_forward",
    "vae_loss",
]
