"""Mini-batch Adam training loops for the VAE and the segmenter."""

from __future__ import annotations

import logging

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Tensor
from ..exceptions import DimensionError, EmptyInputError
from .losses import dice_loss_per_sample
from .optim import AdamState, adam_step
from .unet import SegModel, unet_forward
from .vae import VaeModel, vae_loss

logger = logging.getLogger(__name__)

BATCH_SIZE = 16


def _stack(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected an (N, H, W) image stack, got shape {arr.shape}")
    return arr


def _leaves(params: dict) -> dict:
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def train_vae(
    model: VaeModel,
    images,
    epochs: int = 50,
    lr: float = 1e-4,
    seed: int = 0,
    batch_size: int = BATCH_SIZE,
) -> tuple[VaeModel, list]:
    """Fit the VAE to an (N, H, W) stack; returns the new model and per-epoch mean loss."""
    x = _stack(images)
    if len(x) == 0:
        raise EmptyInputError("train_vae needs at least one image")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    params = dict(model.params)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            noise = rng.standard_normal((len(idx), model.latent_dim))
            leaves = _leaves(params)
            with Tape() as tape:
                loss = vae_loss(model, x[idx], noise, params=leaves)
            tape.backward(loss)
            params, state = adam_step(state, params, {k: t.grad for k, t in leaves.items()})
            total += loss.item() * len(idx)
        history.append(total / len(x))
        logger.debug("vae epoch %d loss %.6f", epoch + 1, history[-1])
    return model.with_params(params), history


def train_segmenter(
    model: SegModel,
    images,
    masks,
    epochs: int = 30,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = BATCH_SIZE,
) -> tuple[SegModel, list]:
    """Minimise the mean per-slice Dice loss with Adam.

    Returns the new model and the per-epoch mean training loss.
    """
    x = _stack(images)
    y = _stack(masks)
    if len(x) == 0:
        raise EmptyInputError("train_segmenter needs at least one annotated pair")
    if x.shape != y.shape:
        raise DimensionError(f"images {x.shape} and masks {y.shape} differ")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    params = dict(model.params)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            leaves = _leaves(params)
            with Tape() as tape:
                pred = unet_forward(model, x[idx], params=leaves)
                loss = ad.mean(dice_loss_per_sample(pred, Tensor(y[idx][:, None])))
            tape.backward(loss)
            params, state = adam_step(state, params, {k: t.grad for k, t in leaves.items()})
            total += loss.item() * len(idx)
        history.append(total / len(x))
        logger.debug("segmenter epoch %d loss %.6f", epoch + 1, history[-1])
    return model.with_params(params), history
