"""Reconstruction, KL and Dice objectives built from autodiff primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..exceptions import ContractViolation, DimensionError, NumericError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LatentCode:
    """Diagonal Gaussian posterior; ``mu`` and ``logvar`` are (latent_dim,) or (N, latent_dim)."""

    mu: Tensor
    logvar: Tensor


def _per_sample_axes(t: Tensor):
    return tuple(range(1, len(t.shape)))


def kl_standard_normal(code: LatentCode) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims.

    Batched codes are averaged over the batch.
    """
    mu, logvar = code.mu, code.logvar
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if not (np.all(np.isfinite(mu.values)) and np.all(np.isfinite(logvar.values))):
        raise NumericError("latent code contains non-finite values")
    terms = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.add(logvar, Tensor(1.0)))
    if len(mu.shape) == 1:
        return ad.scale(ad.sum(terms), 0.5)
    return ad.scale(ad.mean(ad.sum(terms, axis=1)), 0.5)


def mse(x_hat: Tensor, x: Tensor) -> Tensor:
    if x_hat.shape != x.shape:
        raise DimensionError(f"mse: shapes {x_hat.shape} and {x.shape} differ")
    return ad.mean(ad.square(ad.sub(x_hat, x)))


def _check_dice_inputs(y_hat: Tensor, y: Tensor):
    if y_hat.shape != y.shape:
        raise DimensionError(f"dice: prediction {y_hat.shape} and mask {y.shape} differ")
    yv = y.values
    if not np.all((yv == 0.0) | (yv == 1.0)):
        raise ContractViolation("dice: ground-truth mask must be binary")


def dice_loss(y_hat: Tensor, y: Tensor) -> Tensor:
    """Negative soft Dice over all elements: -(2 sum(y_hat*y) + eps) / (sum y_hat + sum y + eps)."""
    y_hat, y = ad._lift(y_hat), ad._lift(y)
    _check_dice_inputs(y_hat, y)
    inter = ad.sum(ad.mul(y_hat, y))
    num = ad.add(ad.scale(inter, 2.0), Tensor(DICE_EPS))
    den = ad.add(ad.add(ad.sum(y_hat), ad.sum(y)), Tensor(DICE_EPS))
    return ad.scale(ad.div(num, den), -1.0)


def dice_loss_per_sample(y_hat: Tensor, y: Tensor) -> Tensor:
    """Dice loss of each item along the leading axis; returns shape (N,)."""
    _check_dice_inputs(y_hat, y)
    axes = _per_sample_axes(y)
    inter = ad.sum(ad.mul(y_hat, y), axis=axes)
    num = ad.add(ad.scale(inter, 2.0), Tensor(DICE_EPS))
    den = ad.add(ad.add(ad.sum(y_hat, axis=axes), ad.sum(y, axis=axes)), Tensor(DICE_EPS))
    return ad.scale(ad.div(num, den), -1.0)


def dice_score(pred: np.ndarray, mask: np.ndarray) -> float:
    """Hard Dice score (2|P&G| + eps) / (|P| + |G| + eps) of two binary arrays."""
    pred = np.asarray(pred, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != mask.shape:
        raise DimensionError(f"dice_score: shapes {pred.shape} and {mask.shape} differ")
    inter = np.count_nonzero(pred & mask)
    return (2.0 * inter + DICE_EPS) / (np.count_nonzero(pred) + np.count_nonzero(mask) + DICE_EPS)
