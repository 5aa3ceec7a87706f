"""Suggestion strategies: gradient-guided manifold sampling and two baselines.

The gradient-guided chain for an annotated source ``x`` with mask ``y``:

1. ``x' = x + alpha * dL_dice(y, seg(x)) / dx`` with the segmenter frozen;
2. ``z' = encoder_mean(x')`` and ``z = encoder_mean(x)``;
3. pick the unannotated pool entry nearest to ``z'`` among those lying in a
   cone with apex ``z``, axis ``z' - z`` and half-angle ``theta_max``.

If the cone holds no candidate (or ``z' == z``) the plain nearest neighbour
is taken and the query is counted as a fallback. Sources are processed in
ascending id order and every pick is excluded from later queries. Ties are
broken by the smallest id throughout.

In the patient strategy a unit is a whole volume: its latent is the mean of
its slice latents, and its perturbed latent is the mean of the perturbed
slice latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .exceptions import (
    ContractViolation,
    DimensionError,
    EmptyInputError,
    FormatError,
    PoolExhaustedError,
)
from .models.losses import dice_loss_per_sample, dice_score
from .models.unet import SegModel, predict_proba, unet_forward
from .models.vae import VaeModel, encode_latent

DEFAULT_ALPHA = 1e-4
DEFAULT_THETA_MAX = 45.0
STRATEGIES = ("image", "patient")
METHODS = ("random", "gradient", "oracle")


@dataclass(frozen=True)
class LatentIndex:
    ids: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vecs = np.array(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or len(vecs) != len(self.ids):
            raise DimensionError(f"index needs one vector per id, got {vecs.shape} for {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise ContractViolation("index ids must be unique")
        vecs.flags.writeable = False
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "vectors", vecs)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class SuggestionQuery:
    source_id: str
    z_source: np.ndarray
    z_target: np.ndarray


@dataclass(frozen=True)
class SuggestionResult:
    selected_ids: tuple
    fallback_count: int
    method: str
    strategy: str


def _unit_of(sample, strategy: str) -> str:
    return sample.patient_id if strategy == "patient" else sample.sample_id


def _group_units(samples: Sequence, strategy: str) -> dict:
    if strategy not in STRATEGIES:
        raise ContractViolation(f"unknown strategy {strategy!r}")
    units: dict[str, list] = {}
    for s in samples:
        units.setdefault(_unit_of(s, strategy), []).append(s)
    return dict(sorted(units.items()))


def _validated(result: SuggestionResult, annotated: Iterable[str]) -> SuggestionResult:
    ids = result.selected_ids
    if len(set(ids)) != len(ids):
        raise ContractViolation(f"duplicate suggestions in {ids}")
    overlap = set(ids) & set(annotated)
    if overlap:
        raise ContractViolation(f"suggested already-annotated units {sorted(overlap)}")
    return result


# --------------------------------------------------------------------------
# gradient step and projection


def _dice_objective(model, x: Tensor, y: np.ndarray) -> Tensor:
    return ad.sum(dice_loss_per_sample(unet_forward(model, x), Tensor(y)))


def gradient_ascend_input(
    model: SegModel,
    x,
    y,
    alpha: float = DEFAULT_ALPHA,
    loss_fn: Optional[Callable] = None,
) -> np.ndarray:
    """Move images along the gradient of their own Dice loss.

    ``x`` and ``y`` are one (H, W) slice or an (N, H, W) stack; each slice
    receives the gradient of its own loss. ``loss_fn(model, x_tensor, y)``
    replaces the Dice objective when given (it must return a scalar).
    """
    if alpha < 0:
        raise ContractViolation("alpha must be non-negative")
    x_arr = np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    if x_arr.shape != y_arr.shape:
        raise DimensionError(f"image {x_arr.shape} and mask {y_arr.shape} differ")
    if x_arr.ndim not in (2, 3):
        raise DimensionError(f"expected (H, W) or (N, H, W) input, got {x_arr.shape}")
    if alpha == 0:
        return x_arr.copy()
    batch = x_arr.reshape((-1, 1) + x_arr.shape[-2:])
    leaf = Tensor(batch, requires_grad=True)
    objective = loss_fn or _dice_objective
    with Tape() as tape:
        loss = objective(model, leaf, y_arr.reshape(batch.shape))
    if loss.size != 1:
        raise ContractViolation("loss_fn must return a scalar")
    if not loss.requires_grad:
        return x_arr.copy()
    tape.backward(loss)
    return (batch + alpha * leaf.grad).reshape(x_arr.shape)


def project_to_latent(vae: VaeModel, x_prime) -> np.ndarray:
    """Encoder-mean embedding of (perturbed) images."""
    return encode_latent(vae, x_prime)


def build_latent_index(vae: VaeModel, pool: Sequence, strategy: str = "image") -> LatentIndex:
    """Embed the unannotated pool; patient units average their slice latents."""
    pool = list(pool)
    if not pool:
        raise EmptyInputError("cannot index an empty pool")
    units = _group_units(pool, strategy)
    flat = [s for group in units.values() for s in group]
    z = np.atleast_2d(encode_latent(vae, np.stack([s.image for s in flat])))
    vectors, pos = [], 0
    for group in units.values():
        vectors.append(z[pos : pos + len(group)].mean(axis=0))
        pos += len(group)
    return LatentIndex(tuple(units), np.array(vectors))


# --------------------------------------------------------------------------
# constrained nearest neighbour


def in_cone(z_source, z_target, candidates, theta_max: float) -> np.ndarray:
    """Boolean mask of candidates whose angle at ``z_source`` to the axis is <= theta_max degrees."""
    if theta_max >= 180.0:
        return np.ones(len(candidates), dtype=bool)
    axis = np.asarray(z_target, dtype=np.float64) - np.asarray(z_source, dtype=np.float64)
    rel = np.asarray(candidates, dtype=np.float64) - np.asarray(z_source, dtype=np.float64)
    axis_norm = math.sqrt(float(axis @ axis))
    rel_norm = np.sqrt(np.einsum("ij,ij->i", rel, rel))
    dots = rel @ axis
    return (rel_norm > 0) & (dots >= math.cos(math.radians(theta_max)) * axis_norm * rel_norm)


def _nearest(ids, sq_dist, allowed) -> Optional[int]:
    best = None
    for i in np.flatnonzero(allowed):
        if best is None or sq_dist[i] < sq_dist[best] or (sq_dist[i] == sq_dist[best] and ids[i] < ids[best]):
            best = i
    return best


def query_constrained_nn(
    index: LatentIndex,
    query: SuggestionQuery,
    theta_max: float = DEFAULT_THETA_MAX,
    excluded: Iterable[str] = (),
) -> tuple[str, bool]:
    """Nearest pool entry to the target inside the search cone.

    Returns ``(sample_id, used_fallback)``.
    """
    if not 0.0 < theta_max <= 180.0:
        raise ContractViolation(f"theta_max must lie in (0, 180], got {theta_max}")
    zs = np.asarray(query.z_source, dtype=np.float64)
    zt = np.asarray(query.z_target, dtype=np.float64)
    if zs.shape != zt.shape or zs.shape != (index.dim,):
        raise DimensionError(f"query latents {zs.shape}/{zt.shape} do not match index dim {index.dim}")
    excluded = set(excluded)
    available = np.array([i not in excluded for i in index.ids], dtype=bool)
    if not available.any():
        raise PoolExhaustedError("every index entry is excluded", shortfall=1)
    diff = index.vectors - zt
    sq_dist = np.einsum("ij,ij->i", diff, diff)
    if np.array_equal(zs, zt):
        cone = np.zeros(len(index), dtype=bool)
    else:
        cone = in_cone(zs, zt, index.vectors, theta_max)
    best = _nearest(index.ids, sq_dist, available & cone)
    if best is not None:
        return index.ids[best], False
    best = _nearest(index.ids, sq_dist, available)
    return index.ids[best], True


# --------------------------------------------------------------------------
# strategies


def make_queries(seg: SegModel, vae: VaeModel, annotated: Sequence, alpha: float, strategy: str) -> list:
    """One query per annotated unit, in ascending unit-id order."""
    units = _group_units(annotated, strategy)
    flat = [s for group in units.values() for s in group]
    if any(s.mask is None for s in flat):
        raise ContractViolation("gradient-guided suggestion needs annotated (masked) sources")
    images = np.stack([s.image for s in flat])
    masks = np.stack([s.mask for s in flat]).astype(np.float64)
    perturbed = gradient_ascend_input(seg, images, masks, alpha)
    z = np.atleast_2d(encode_latent(vae, images))
    z_prime = np.atleast_2d(project_to_latent(vae, perturbed))
    queries, pos = [], 0
    for uid, group in units.items():
        sl = slice(pos, pos + len(group))
        queries.append(SuggestionQuery(uid, z[sl].mean(axis=0), z_prime[sl].mean(axis=0)))
        pos += len(group)
    return queries


def suggest_gradient_guided(
    seg: SegModel,
    vae: VaeModel,
    annotated: Sequence,
    index: LatentIndex,
    m: int,
    alpha: float = DEFAULT_ALPHA,
    theta_max: float = DEFAULT_THETA_MAX,
    strategy: str = "image",
    excluded: Iterable[str] = (),
) -> SuggestionResult:
    """Suggest ``m`` pool units, one per annotated source unit."""
    units = _group_units(annotated, strategy)
    if m < 0:
        raise ContractViolation("m must be non-negative")
    if m > len(units):
        raise ContractViolation(f"m={m} exceeds the {len(units)} annotated source units")
    clash = set(units) & set(index.ids)
    if clash:
        raise ContractViolation(f"index contains annotated units {sorted(clash)[:5]}")
    excluded = set(excluded)
    available = sum(1 for i in index.ids if i not in excluded)
    if available < m:
        raise PoolExhaustedError(
            f"pool holds {available} units but {m} were requested (short by {m - available})",
            shortfall=m - available,
        )
    if m == 0:
        return SuggestionResult((), 0, "gradient", strategy)
    sources = [s for uid in list(units)[:m] for s in units[uid]]
    queries = make_queries(seg, vae, sources, alpha, strategy)
    picked, fallbacks = [], 0
    for q in queries:
        sid, fell_back = query_constrained_nn(index, q, theta_max, excluded | set(picked))
        picked.append(sid)
        fallbacks += fell_back
    return _validated(SuggestionResult(tuple(picked), fallbacks, "gradient", strategy), units)


def suggest_random(pool_ids: Iterable[str], m: int, seed: int, strategy: str = "image") -> SuggestionResult:
    """Uniform draw of ``m`` ids without replacement."""
    ids = sorted(set(pool_ids))
    if m > len(ids):
        raise PoolExhaustedError(
            f"pool holds {len(ids)} units but {m} were requested (short by {m - len(ids)})",
            shortfall=m - len(ids),
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=m, replace=False) if m else []
    return SuggestionResult(tuple(ids[i] for i in chosen), 0, "random", strategy)


def unit_dice_scores(seg: SegModel, pool: Sequence, strategy: str = "image", threshold: float = 0.5) -> dict:
    """Hard Dice of the current model on every pool unit (patients average their slices)."""
    units = _group_units(pool, strategy)
    flat = [s for group in units.values() for s in group]
    if any(s.mask is None for s in flat):
        raise ContractViolation("oracle suggestion needs ground truth for the whole pool")
    if not flat:
        return {}
    probs = predict_proba(seg, np.stack([s.image for s in flat]))
    per_slice = [dice_score(p > threshold, s.mask) for p, s in zip(probs, flat)]
    scores, pos = {}, 0
    for uid, group in units.items():
        scores[uid] = float(np.mean(per_slice[pos : pos + len(group)]))
        pos += len(group)
    return scores


def suggest_oracle(seg: SegModel, pool: Sequence, m: int, strategy: str = "image", threshold: float = 0.5) -> SuggestionResult:
    """The ``m`` pool units on which the current model scores the lowest Dice."""
    scores = unit_dice_scores(seg, pool, strategy, threshold)
    if m > len(scores):
        raise PoolExhaustedError(
            f"pool holds {len(scores)} units but {m} were requested (short by {m - len(scores)})",
            shortfall=m - len(scores),
        )
    ranked = sorted(scores, key=lambda uid: (scores[uid], uid))
    return SuggestionResult(tuple(ranked[:m]), 0, "oracle", strategy)


# --------------------------------------------------------------------------
# suggestion list files


def write_suggestions(result: SuggestionResult, path) -> None:
    lines = [f"# method={result.method} strategy={result.strategy} fallbacks={result.fallback_count}"]
    lines += list(result.selected_ids)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_suggestions(path) -> SuggestionResult:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# "):
        raise FormatError("suggestion file lacks its header line", str(path), 0)
    fields = dict(part.split("=", 1) for part in text[0][2:].split())
    try:
        return SuggestionResult(
            tuple(line.strip() for line in text[1:] if line.strip()),
            int(fields["fallbacks"]),
            fields["method"],
            fields["strategy"],
        )
    except (KeyError, ValueError):
        raise FormatError("malformed suggestion header", str(path), 0) from None
