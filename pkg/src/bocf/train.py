"""End-to-end training: k-means codebook init, Adam, augmentation-driven epochs,
and k-fold cross-validation.

Every random draw is derived from ``TrainConfig.seed`` (and the epoch and
sample index), so a run is reproducible bit for bit on one thread. With
``workers > 1`` per-sample gradients are computed concurrently and then
summed in sample order, which gives the same result.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .evaluate import ErrorReport, rae, summarize
from .imageio import (
    AugmentationConfig,
    DatasetManifest,
    augment,
    load_image,
    prepare_test_image,
)
from .model import (
    BocfConfig,
    BocfModel,
    extract_features,
    feature_vectors,
    init_model,
    predict,
    sample_loss,
)
from .tensor import Tape, backward

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "NonFiniteLossError",
    "Sample",
    "load_samples",
    "kmeans",
    "kmeans_init",
    "adam_step",
    "TrainResult",
    "train",
    "fold_indices",
    "CrossValResult",
    "crossvalidate",
]


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 15
    learning_rate: float = 3e-4
    epochs: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam_init: float = 0.5
    seed: int = 0
    folds: int = 3
    workers: int = 1
    kmeans: bool = True
    kmeans_images: int = 100
    kmeans_max_vectors: int = 50_000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Sample(NamedTuple):
    image: np.ndarray
    gt: np.ndarray
    path: str


def load_samples(data) -> list[Sample]:
    """Decode a manifest, or wrap an in-memory list of ``(image, gt)`` pairs."""
    if isinstance(data, DatasetManifest):
        return [Sample(load_image(e.path), np.asarray(e.illuminant, float), str(e.path))
                for e in data.entries]
    return [Sample(np.asarray(img, float), np.asarray(gt, float), f"#{i}")
            for i, (img, gt) in enumerate(data)]


# ---------------------------------------------------------------------------
# k-means


class KMeansResult(NamedTuple):
    centers: np.ndarray
    labels: np.ndarray
    inertia: list[float]  # objective after each assignment step
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when no assignment changes or after ``max_iter`` iterations. An
    empty cluster keeps its previous center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"k-means needs at least K={k} samples, got {n}")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen[0]][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a center
            free = np.setdiff1d(np.arange(n), chosen)
            idx = int(free[rng.integers(free.size)])
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    centers = x[chosen].copy()

    labels = None
    inertia: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centers)
        new = d.argmin(axis=1)
        inertia.append(float(d[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(centers, labels, inertia, it)


def kmeans_init(features: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Codebook centers [K, D] from a sample of feature vectors."""
    return kmeans(features, k, seed).centers


def _codebook_sample(model: BocfModel, samples: Sequence[Sample], cfg: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0])
    order = rng.permutation(len(samples))[: cfg.kmeans_images]
    size = model.config.input_size
    feats = [
        feature_vectors(extract_features(model, prepare_test_image(samples[i].image, size))).data
        for i in order
    ]
    x = np.concatenate(feats)
    if len(x) > cfg.kmeans_max_vectors:
        keep = np.sort(rng.choice(len(x), cfg.kmeans_max_vectors, replace=False))
        x = x[keep]
    return x


# ---------------------------------------------------------------------------
# Adam


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, cfg: TrainConfig) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        m_out[name], v_out[name] = np.asarray(m, float), np.asarray(v, float)
    return new_params, OptimizerState(m_out, v_out, t)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: BocfModel
    history: list[float]
    state: OptimizerState


def _sample_grad(model: BocfModel, image: np.ndarray, gt: np.ndarray):
    params = model.parameters()
    with Tape() as tape:
        loss = sample_loss(model, image, gt)
    grads = backward(tape, loss, params)
    return float(loss.data), [grads[p] for p in params]


def train(
    model: BocfModel,
    data,
    cfg: TrainConfig,
    aug: AugmentationConfig,
    progress: Callable[[int, float], None] | None = None,
    on_epoch: Callable[[int, BocfModel], None] | None = None,
) -> TrainResult:
    """Train a copy of ``model`` on a manifest or a list of ``(image, gt)`` pairs.

    Each epoch shuffles, augments every sample once, and takes one Adam step
    per batch on the batch-mean angular loss. ``progress`` receives
    ``(epoch, mean_loss)`` with the loss in radians.
    """
    if aug.output_size != model.config.input_size:
        raise ValueError(
            f"augmentation output size {aug.output_size} != model input size {model.config.input_size}"
        )
    if isinstance(data, list) and data and isinstance(data[0], Sample):
        samples = data
    else:
        samples = load_samples(data)
    if not samples:
        raise ValueError("training data is empty")
    model = model.copy()
    state = OptimizerState()
    history: list[float] = []
    if cfg.epochs == 0:
        return TrainResult(model, history, state)

    if cfg.kmeans:
        x = _codebook_sample(model, samples, cfg)
        k = model.config.codebook_size
        model.params["codebook.centers"].data = kmeans_init(x, k, cfg.seed)
        log.debug("k-means codebook from %d vectors", len(x))

    names = list(model.params)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(samples))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                items = []
                for i in batch:
                    rng = np.random.default_rng([cfg.seed, 2, epoch, int(i)])
                    items.append(augment(samples[i].image, samples[i].gt, aug, rng))
                if pool is not None:
                    results = list(pool.map(lambda it: _sample_grad(model, *it), items))
                else:
                    results = [_sample_grad(model, *it) for it in items]

                batch_losses = [r[0] for r in results]
                if not all(math.isfinite(v) for v in batch_losses):
                    bad = [samples[i].path for i, v in zip(batch, batch_losses) if not math.isfinite(v)]
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} on {bad}")
                grads = {}
                for j, name in enumerate(names):
                    acc = results[0][1][j].copy()
                    for r in results[1:]:
                        acc += r[1][j]
                    grads[name] = acc / len(results)
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NonFiniteLossError(f"non-finite gradient at epoch {epoch}")
                new, state = adam_step(model.state(), grads, state, cfg)
                for name in names:
                    model.params[name].data = new[name]
                losses.extend(batch_losses)
            mean_loss = float(np.mean(losses))
            history.append(mean_loss)
            if progress is not None:
                progress(epoch, mean_loss)
            if on_epoch is not None:
                on_epoch(epoch, model)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(model, history, state)


# ---------------------------------------------------------------------------
# cross-validation


def fold_indices(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` disjoint, near-equal folds."""
    if k < 2:
        raise ValueError("cross-validation needs k >= 2")
    if n < k:
        raise ValueError(f"insufficient data: {n} entries for {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class CrossValResult:
    folds: list[ErrorReport]
    pooled: ErrorReport
    test_indices: list[np.ndarray]


def crossvalidate(data, k: int, model_cfg: BocfConfig, cfg: TrainConfig,
                  aug: AugmentationConfig,
                  progress: Callable[[int, int, float], None] | None = None) -> CrossValResult:
    """Train on k-1 folds and evaluate on the held-out one, for every fold."""
    samples = load_samples(data)
    folds = fold_indices(len(samples), k, cfg.seed)
    reports, all_errs, all_paths = [], [], []
    for f, test_idx in enumerate(folds):
        test_set = set(test_idx.tolist())
        train_set = [samples[i] for i in range(len(samples)) if i not in test_set]
        model = init_model(model_cfg, seed=cfg.seed + f, lam_init=cfg.lam_init)
        sink = (lambda e, v, f=f: progress(f, e, v)) if progress else None
        result = train(model, train_set, replace(cfg, seed=cfg.seed + f), aug, progress=sink)
        errs = [rae(samples[i].gt, predict(result.model, samples[i].image)) for i in test_idx]
        paths = [samples[i].path for i in test_idx]
        reports.append(summarize(errs, paths))
        all_errs += errs
        all_paths += paths
    return CrossValResult(reports, summarize(all_errs, all_paths), folds)
