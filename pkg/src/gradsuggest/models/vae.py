"""Convolutional VAE used to learn the image manifold.

Encoder: three stride-2 3x3 convolutions with ReLU, then two dense heads
(``mu`` and ``logvar``). Decoder: dense layer back to the coarsest feature
map, then three stride-2 transposed convolutions; the last one is linear
because images are z-scored rather than bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..exceptions import DimensionError
from .losses import LatentCode, kl_standard_normal, mse

N_LEVELS = 3


@dataclass(frozen=True)
class VaeModel:
    params: dict
    image_shape: tuple = (32, 32)
    latent_dim: int = 5
    channels: tuple = (8, 16, 32)

    @property
    def descriptor(self) -> dict:
        return {
            "kind": "vae",
            "height": self.image_shape[0],
            "width": self.image_shape[1],
            "latent_dim": self.latent_dim,
            "channels": ",".join(str(c) for c in self.channels),
        }

    def with_params(self, params: dict) -> "VaeModel":
        return VaeModel(_freeze(params), self.image_shape, self.latent_dim, self.channels)


def _freeze(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        arr = np.array(v, dtype=np.float64)
        arr.flags.writeable = False
        out[k] = arr
    return out


def _coarse_shape(image_shape, channels):
    h, w = image_shape
    f = 2**N_LEVELS
    return channels[-1], h // f, w // f


def init_vae(image_shape=(32, 32), latent_dim: int = 5, channels=(8, 16, 32), seed: int = 0) -> VaeModel:
    """He-initialised VAE parameters drawn from ``seed``."""
    h, w = image_shape
    if h % 2**N_LEVELS or w % 2**N_LEVELS:
        raise DimensionError(f"VAE input {h}x{w} must be divisible by {2**N_LEVELS}")
    if latent_dim < 1:
        raise DimensionError("latent_dim must be positive")
    channels = tuple(int(c) for c in channels)
    if len(channels) != N_LEVELS:
        raise DimensionError(f"VAE needs {N_LEVELS} channel widths, got {channels}")
    rng = np.random.default_rng(seed)
    p = {}
    cin = 1
    for i, c in enumerate(channels):
        p[f"enc{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(c, cin, 3, 3))
        p[f"enc{i}.b"] = np.zeros(c)
        cin = c
    flat = int(np.prod(_coarse_shape(image_shape, channels)))
    p["mu.w"] = rng.normal(0.0, np.sqrt(1.0 / flat), size=(flat, latent_dim))
    p["mu.b"] = np.zeros(latent_dim)
    p["logvar.w"] = rng.normal(0.0, 0.1 * np.sqrt(1.0 / flat), size=(flat, latent_dim))
    p["logvar.b"] = np.zeros(latent_dim)
    p["dec_in.w"] = rng.normal(0.0, np.sqrt(2.0 / latent_dim), size=(latent_dim, flat))
    p["dec_in.b"] = np.zeros(flat)
    outs = list(reversed(channels[:-1])) + [1]
    cin = channels[-1]
    for i, c in enumerate(outs):
        p[f"dec{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * 4)), size=(cin, c, 4, 4))
        p[f"dec{i}.b"] = np.zeros(c)
        cin = c
    return VaeModel(_freeze(p), tuple(image_shape), int(latent_dim), channels)


def as_image_batch(x, image_shape=None) -> Tensor:
    """Coerce (H, W), (N, H, W) or (N, 1, H, W) input to an (N, 1, H, W) tensor."""
    if isinstance(x, Tensor):
        if len(x.shape) == 4:
            t = x
        else:
            t = ad.reshape(x, _batch_shape(x.shape))
    else:
        arr = np.asarray(x, dtype=np.float64)
        t = Tensor(arr.reshape(_batch_shape(arr.shape)))
    if t.shape[1] != 1:
        raise DimensionError(f"expected single-channel images, got shape {t.shape}")
    if image_shape is not None and tuple(t.shape[2:]) != tuple(image_shape):
        raise DimensionError(f"image shape {t.shape[2:]} does not match model input {tuple(image_shape)}")
    return t


def _batch_shape(shape):
    if len(shape) == 2:
        return (1, 1) + tuple(shape)
    if len(shape) == 3:
        return (shape[0], 1) + tuple(shape[1:])
    if len(shape) == 4:
        return tuple(shape)
    raise DimensionError(f"cannot interpret shape {shape} as an image batch")


def _tensors(params: dict) -> dict:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _encode(model: VaeModel, x: Tensor, p: dict) -> LatentCode:
    h = x
    for i in range(N_LEVELS):
        h = ad.relu(ad.conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1))
    n = h.shape[0]
    flat = ad.reshape(h, (n, int(np.prod(h.shape[1:]))))
    mu = ad.add(ad.matmul(flat, p["mu.w"]), p["mu.b"])
    logvar = ad.add(ad.matmul(flat, p["logvar.w"]), p["logvar.b"])
    return LatentCode(mu, logvar)


def _decode(model: VaeModel, z: Tensor, p: dict) -> Tensor:
    n = z.shape[0]
    h = ad.relu(ad.add(ad.matmul(z, p["dec_in.w"]), p["dec_in.b"]))
    h = ad.reshape(h, (n,) + _coarse_shape(model.image_shape, model.channels))
    for i in range(N_LEVELS):
        h = ad.conv_transpose2d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=2, padding=1)
        if i < N_LEVELS - 1:
            h = ad.relu(h)
    return h


def vae_forward(model: VaeModel, x, noise, params: dict | None = None) -> tuple[Tensor, LatentCode]:
    """Reconstruct ``x`` through ``z = mu + exp(logvar / 2) * noise``.

    ``noise`` has shape (latent_dim,) or (N, latent_dim). ``params`` may
    override the model's arrays with (grad-tracking) tensors.
    """
    xb = as_image_batch(x, model.image_shape)
    p = _tensors(params if params is not None else model.params)
    code = _encode(model, xb, p)
    eps = np.asarray(noise.values if isinstance(noise, Tensor) else noise, dtype=np.float64)
    eps = eps.reshape(code.mu.shape) if eps.size == code.mu.size else None
    if eps is None:
        raise DimensionError(f"noise must provide {code.mu.shape} draws")
    sigma = ad.exp(ad.scale(code.logvar, 0.5))
    z = ad.add(code.mu, ad.mul(sigma, Tensor(eps)))
    x_hat = _decode(model, z, p)
    if isinstance(x, Tensor) and len(x.shape) != 4:
        x_hat = ad.reshape(x_hat, x.shape)
    elif not isinstance(x, Tensor) and np.ndim(x) != 4:
        x_hat = ad.reshape(x_hat, np.shape(x))
    return x_hat, code


def vae_loss(model: VaeModel, x, noise, params: dict | None = None) -> Tensor:
    """Mean squared reconstruction error plus KL to the standard normal prior."""
    x_hat, code = vae_forward(model, x, noise, params)
    target = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return ad.add(mse(x_hat, target), kl_standard_normal(code))


def encode_latent(model: VaeModel, x) -> np.ndarray:
    """Encoder mean; (latent_dim,) for one image, (N, latent_dim) for a batch."""
    xb = as_image_batch(x, model.image_shape)
    code = _encode(model, xb, _tensors(model.params))
    mu = code.mu.numpy()
    single = (isinstance(x, Tensor) and len(x.shape) == 2) or (not isinstance(x, Tensor) and np.ndim(x) == 2)
    return mu[0] if single else mu


def decode_latent(model: VaeModel, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.latent_dim:
        raise DimensionError(f"latent vectors must have {model.latent_dim} entries")
    return _decode(model, Tensor(z), _tensors(model.params)).numpy()[:, 0]
