"""Annotation-budget experiments: random half, train, suggest half, retrain, evaluate."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..data import Dataset, generate_phantom_dataset, oracle_annotate
from ..exceptions import ConfigError, ContractViolation, EmptyInputError
from ..models import (
    SegModel,
    VaeModel,
    dice_score,
    init_unet,
    init_vae,
    predict_proba,
    train_segmenter,
    train_vae,
)
from ..sampling import (
    build_latent_index,
    suggest_gradient_guided,
    suggest_oracle,
    suggest_random,
)
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

# stream tags for per-round random draws
_INIT, _INITIAL_PICK, _TRAIN_INITIAL, _RANDOM_PICK, _TRAIN_AFTER = range(5)


@dataclass(frozen=True)
class RoundReport:
    scenario: str
    method: str
    strategy: str
    budget: int
    seed: int
    dice: float
    annotated_slices: int
    context_slices: int
    fallbacks: int
    wall_ms: int
    initial_dice: float = float("nan")
    baseline_dice: float = float("nan")
    suggested: tuple = ()
    per_slice_dice: tuple = field(default=(), repr=False)


@dataclass
class ExperimentContext:
    """Everything shared by all rounds of one experiment."""

    config: ExperimentConfig
    dataset: Dataset
    vae: VaeModel
    start_model: Optional[SegModel] = None
    baseline_dice: float = float("nan")


def evaluate_dice(model: SegModel, images, masks, threshold: float = 0.5) -> float:
    """Mean per-slice hard Dice score of the thresholded prediction."""
    return float(np.mean(per_slice_dice(model, images, masks, threshold)))


def per_slice_dice(model: SegModel, images, masks, threshold: float = 0.5) -> list:
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise EmptyInputError("evaluation needs at least one test slice")
    if not 0 < threshold < 1:
        raise ContractViolation("threshold must lie in (0, 1)")
    probs = predict_proba(model, images)
    return [dice_score(p > threshold, m) for p, m in zip(probs, masks)]


def _stream(*keys) -> list:
    return [int(k) for k in keys]


def build_datasets(config: ExperimentConfig) -> tuple[Dataset, Optional[Dataset]]:
    """Target dataset (train + test) and, for transfer, the pretraining source."""
    n, t, k, s = config.train_patients, config.test_patients, config.slices, config.size
    if config.scenario == "scratch":
        n_a, t_a = (n + 1) // 2, (t + 1) // 2
        a = generate_phantom_dataset(config.data_seed, n_a + t_a, k, "A", s, s, n_test=t_a)
        b = generate_phantom_dataset(config.data_seed + 1, (n - n_a) + (t - t_a), k, "B", s, s, n_test=t - t_a)
        return a.merge(b), None
    source = generate_phantom_dataset(config.data_seed, n, k, "A", s, s, n_test=0)
    target = generate_phantom_dataset(config.data_seed + 1, n + t, k, "B", s, s, n_test=t)
    return target, source


def prepare(config: ExperimentConfig) -> ExperimentContext:
    """Generate data, learn the manifold on the target training pool and, for
    the transfer scenario, pretrain the segmenter on the source site."""
    config.validate()
    target, source = build_datasets(config)
    pool_images = target.images(target.sample_ids(target.patients("train")))
    vae = init_vae((config.size, config.size), config.latent_dim, seed=config.seed)
    vae, _ = train_vae(vae, pool_images, config.vae_epochs, config.vae_lr, seed=config.seed, batch_size=config.batch_size)
    ctx = ExperimentContext(config, target, vae)
    if source is not None:
        ids = source.sample_ids()
        model = init_unet(config.base_channels, config.depth, seed=config.seed)
        model, _ = train_segmenter(
            model, source.images(ids), source.masks(ids), config.pretrain_epochs, config.seg_lr,
            seed=config.seed, batch_size=config.batch_size,
        )
        ctx.start_model = model
        test_ids = target.sample_ids(target.patients("test"))
        ctx.baseline_dice = evaluate_dice(model, target.images(test_ids), target.masks(test_ids), config.threshold)
    return ctx


def _unit_samples(dataset: Dataset, units, strategy):
    if strategy == "patient":
        return [s for u in units for s in dataset.slices(u)]
    return [dataset[u] for u in units]


def _slice_ids(dataset: Dataset, units, strategy):
    return [s.sample_id for s in _unit_samples(dataset, units, strategy)]


def _train(ctx, model, units, epochs, seed_key):
    cfg = ctx.config
    ids = sorted(_slice_ids(ctx.dataset, units, cfg.strategy))
    if epochs == 0:
        return model
    lr = cfg.seg_lr if ctx.start_model is None else cfg.finetune_lr
    model, _ = train_segmenter(
        model, ctx.dataset.images(ids), ctx.dataset.masks(ids), epochs, lr,
        seed=seed_key, batch_size=cfg.batch_size,
    )
    return model


def run_branches(ctx: ExperimentContext, seed: int, budget: int, methods=None) -> list:
    """All requested methods for one (seed, budget); the initial phase is shared."""
    cfg = ctx.config
    methods = tuple(methods or cfg.methods)
    data = ctx.dataset
    strategy = cfg.strategy
    half = budget // 2
    test_ids = data.sample_ids(data.patients("test"))
    train_patients = data.patients("train")
    pool = train_patients if strategy == "patient" else data.sample_ids(train_patients)
    if budget > len(pool):
        raise ConfigError(f"budget {budget} exceeds the pool of {len(pool)} units")

    t0 = time.perf_counter()
    session = data.session()
    initial = suggest_random(pool, half, _stream(seed, budget, _INITIAL_PICK), strategy).selected_ids
    oracle_annotate(session, _slice_ids(data, initial, strategy), strategy)
    start = ctx.start_model or init_unet(cfg.base_channels, cfg.depth, seed=_stream(seed, _INIT))
    model0 = _train(ctx, start, initial, cfg.epochs_initial, _stream(seed, budget, _TRAIN_INITIAL))
    initial_dice = evaluate_dice(model0, data.images(test_ids), data.masks(test_ids), cfg.threshold)
    shared_ms = (time.perf_counter() - t0) * 1000.0
    cost0 = (session.cost.labeled, session.cost.context)

    reports = []
    for method in methods:
        t1 = time.perf_counter()
        sess = data.session()
        sess.annotated = set(session.annotated)
        sess.cost.labeled, sess.cost.context = cost0
        annotated = list(initial)
        sources = list(initial)
        model = model0
        fallbacks = 0
        suggested = []
        step = half // cfg.rounds
        for r in range(cfg.rounds):
            remaining = [u for u in pool if u not in set(annotated)]
            if method == "random":
                res = suggest_random(remaining, step, _stream(seed, budget, _RANDOM_PICK, r), strategy)
            elif method == "oracle":
                res = suggest_oracle(model, _unit_samples(data, remaining, strategy), step, strategy, cfg.threshold)
            else:
                index = build_latent_index(ctx.vae, _unit_samples(data, remaining, strategy), strategy)
                res = suggest_gradient_guided(
                    model, ctx.vae, _unit_samples(data, sources, strategy), index, step,
                    cfg.alpha, cfg.theta_max, strategy,
                )
            new = list(res.selected_ids)
            fallbacks += res.fallback_count
            oracle_annotate(sess, _slice_ids(data, new, strategy), strategy)
            annotated += new
            suggested += new
            sources = new
            model = _train(ctx, model, annotated, cfg.epochs_after, _stream(seed, budget, _TRAIN_AFTER, r))

        train_ids = set(_slice_ids(data, annotated, strategy))
        if train_ids & set(test_ids):
            raise ContractViolation("training and test slices overlap")
        expected = budget * (cfg.slices if strategy == "patient" else 1)
        if sess.cost.labeled != expected or len(train_ids) != expected:
            raise ContractViolation(f"annotated {sess.cost.labeled} slices, budget implies {expected}")
        scores = per_slice_dice(model, data.images(test_ids), data.masks(test_ids), cfg.threshold)
        wall = shared_ms + (time.perf_counter() - t1) * 1000.0
        reports.append(
            RoundReport(
                scenario=cfg.scenario,
                method=method,
                strategy=strategy,
                budget=budget,
                seed=seed,
                dice=float(np.mean(scores)),
                annotated_slices=sess.cost.labeled,
                context_slices=sess.cost.context,
                fallbacks=fallbacks,
                wall_ms=int(round(wall)),
                initial_dice=initial_dice,
                baseline_dice=ctx.baseline_dice,
                suggested=tuple(suggested),
                per_slice_dice=tuple(scores),
            )
        )
        logger.info("seed=%d budget=%d %s dice=%.4f", seed, budget, method, reports[-1].dice)
    return reports


def run_round(config: ExperimentConfig, seed: int, method: Optional[str] = None, budget: Optional[int] = None,
              context: Optional[ExperimentContext] = None) -> RoundReport:
    """One seeded round for a single method and budget."""
    method = method or _only(config.methods, "method")
    budget = budget or _only(config.budgets, "budget")
    ctx = context or prepare(config)
    return run_branches(ctx, seed, budget, (method,))[0]


def _only(values, name):
    if len(values) != 1:
        raise ConfigError(f"config lists several {name}s; pass one explicitly")
    return values[0]


_WORKER_CTX: Optional[ExperimentContext] = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _work(task):
    seed, budget = task
    return run_branches(_WORKER_CTX, seed, budget)


def run_experiment(config: ExperimentConfig, jobs: int = 1, context: Optional[ExperimentContext] = None) -> list:
    """Every (budget, seed) round for every configured method.

    Results are ordered by budget, seed, then method order in the config,
    independent of ``jobs``.
    """
    config.validate()
    ctx = context or prepare(config)
    tasks = [(seed, budget) for budget in config.budgets for seed in config.seeds]
    if jobs <= 1:
        chunks = [run_branches(ctx, s, b) for s, b in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ctx,)) as pool:
            chunks = list(pool.map(_work, tasks))
    return [r for chunk in chunks for r in chunk]
