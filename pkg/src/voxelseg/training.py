"""Dataset sampling, negative log-likelihood loss, minibatch SGD with
momentum and early stopping on the validation error rate.

Training features always carry the full feature layout (centroid
distances computed from the true labels); each model selects the blocks
it uses.  Centroid-distance noise is drawn fresh for every minibatch
presentation and never applied to validation data.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .features import FeatureConfig, FeatureExtractor, FeatureLayout, compute_centroids
from .layers import softmax
from .network import NetworkModel
from .volume import Atlas

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class TrainingSet:
    features: np.ndarray  # (n, full feature width) float32
    labels: np.ndarray    # (n,) region ids 1..N
    atlas_ids: np.ndarray  # (n,) provenance
    coords: np.ndarray    # (n, 3) provenance
    n_regions: int

    def __post_init__(self):
        n = self.features.shape[0]
        if not (len(self.labels) == len(self.atlas_ids) == len(self.coords) == n):
            raise ValueError("inconsistent training-set column lengths")
        if n and (self.labels.min() < 1 or self.labels.max() > self.n_regions):
            raise ValueError("labels must be region ids in 1..N")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class TrainState:
    learning_rate: float = 0.05
    momentum: float = 0.5
    batch_size: int = 200
    patience: int = 10
    seed: int = 0
    rng: np.random.Generator = None
    velocity: dict = None
    epoch: int = 0
    best_val_error: float = float("inf")
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _foreground_coords(atlas: Atlas) -> np.ndarray:
    xs, ys, zs = atlas.labels.labels.nonzero()
    return np.stack([xs, ys, zs], axis=1)


def _sample_atlas(atlas, counts, rng, cfg):
    coords = _foreground_coords(atlas)
    total = sum(counts)
    if total > len(coords):
        raise ValueError(
            f"atlas {atlas.id!r}: requested {total} voxels, "
            f"only {len(coords)} foreground available"
        )
    picked = rng.choice(len(coords), size=total, replace=False)
    cs = compute_centroids(atlas.labels, cfg.n_regions)
    extractor = FeatureExtractor(atlas.image, cfg, cs)
    out = []
    start = 0
    for count in counts:
        sel = coords[picked[start : start + count]]
        start += count
        feats = extractor.extract(sel)
        labels = atlas.labels.labels[sel[:, 0], sel[:, 1], sel[:, 2]].astype(np.int64)
        out.append((feats, labels, sel))
    return out


def _assemble(parts, atlases, n_regions) -> TrainingSet:
    feats = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    coords = np.concatenate([p[2] for p in parts])
    ids = np.concatenate(
        [np.full(len(p[1]), a.id, dtype=object) for p, a in zip(parts, atlases)]
    )
    return TrainingSet(feats, labels, ids, coords, n_regions)


def sample_voxels(
    atlases: list[Atlas], per_atlas: int, rng: np.random.Generator, cfg: FeatureConfig
) -> TrainingSet:
    """Uniform samples without replacement over each atlas's foreground.

    Centroid distances come from the true training labels.
    """
    parts = [_sample_atlas(a, [per_atlas], rng, cfg)[0] for a in atlases]
    return _assemble(parts, atlases, cfg.n_regions)


def sample_disjoint(
    atlases: list[Atlas],
    per_atlas_train: int,
    per_atlas_val: int,
    rng: np.random.Generator,
    cfg: FeatureConfig,
) -> tuple[TrainingSet, TrainingSet]:
    """Training and validation sets drawn jointly so they never overlap."""
    both = [_sample_atlas(a, [per_atlas_train, per_atlas_val], rng, cfg) for a in atlases]
    train = _assemble([b[0] for b in both], atlases, cfg.n_regions)
    val = _assemble([b[1] for b in both], atlases, cfg.n_regions)
    return train, val


# ---------------------------------------------------------------------------
# loss and updates
# ---------------------------------------------------------------------------


def one_hot(labels: np.ndarray, n_regions: int) -> np.ndarray:
    y = np.zeros((len(labels), n_regions), dtype=np.float64)
    y[np.arange(len(labels)), np.asarray(labels) - 1] = 1.0
    return y


def nll_loss(probs: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log probability of the true class.

    ``y`` is one-hot, one row per datapoint (a single pair works too).
    The probability is floored at 1e-12 inside the log; the gradient is
    taken through the fused softmax+NLL form and is unaffected.
    """
    probs, y = np.atleast_2d(probs), np.atleast_2d(y)
    p_true = (probs * y).sum(axis=1)
    return float(-np.log(np.maximum(p_true, PROB_FLOOR)).mean())


def softmax_nll_grad(probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the NLL w.r.t. the softmax logits: probs - y."""
    return probs - y


def sgd_momentum_step(params: dict, grads: dict, state: TrainState) -> None:
    """velocity <- -lr * grad + momentum * velocity;  param += velocity."""
    if state.velocity is None:
        state.velocity = {k: np.zeros_like(v) for k, v in params.items()}
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise RuntimeError(
                f"non-finite gradient in {name!r} at epoch {state.epoch}"
            )
        v = state.velocity[name]
        v *= state.momentum
        v -= state.learning_rate * g
        p += v


def error_rate_on(model: NetworkModel, dataset: TrainingSet, block: int = 4096) -> float:
    """Fraction of datapoints whose argmax class differs from the label."""
    wrong = 0
    for start in range(0, len(dataset), block):
        xb = dataset.features[start : start + block]
        probs = model.forward_batch(xb)
        pred = probs.argmax(axis=1) + 1
        wrong += int((pred != dataset.labels[start : start + block]).sum())
    return wrong / len(dataset)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


def train(
    model: NetworkModel,
    train_set: TrainingSet,
    val_set: TrainingSet,
    state: TrainState,
    max_epochs: int,
) -> tuple[NetworkModel, list[dict]]:
    """Minibatch SGD with momentum; returns the best-by-validation snapshot.

    Stops when the validation error rate has not improved for more than
    ``state.patience`` consecutive epochs, or at ``max_epochs``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    lay = FeatureLayout(model.config.features)
    sigma = model.config.sigma
    noisy = model.with_centroid_pathway and sigma > 0
    n = len(train_set)
    x, labels = train_set.features, train_set.labels
    y_full = one_hot(labels, model.n_regions)

    best_params = {k: v.copy() for k, v in model.params.items()}
    history: list[dict] = []
    t_start = time.perf_counter()

    for epoch in range(1, max_epochs + 1):
        state.epoch = epoch
        perm = state.rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, state.batch_size):
            idx = perm[start : start + state.batch_size]
            xb = x[idx]
            if noisy:
                xb[:, lay.cdist] += state.rng.normal(
                    0.0, sigma, size=(len(idx), model.n_regions)
                ).astype(np.float32)
            logits, caches = model.forward_logits(xb)
            probs = softmax(logits)
            yb = y_full[idx]
            loss_sum += nll_loss(probs, yb) * len(idx)
            d_logits = (softmax_nll_grad(probs, yb) / len(idx)).astype(logits.dtype)
            tape = model.backward(caches, d_logits)
            sgd_momentum_step(model.params, tape, state)

        val_error = error_rate_on(model, val_set)
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / n,
                "val_error": val_error,
                "elapsed_s": time.perf_counter() - t_start,
            }
        )
        if val_error < state.best_val_error:
            state.best_val_error = val_error
            state.epochs_since_improvement = 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement > state.patience:
                logger.info(
                    "early stop at epoch %d (best val error %.4f)",
                    epoch,
                    state.best_val_error,
                )
                break
        logger.debug(
            "epoch %d: train loss %.4f, val error %.4f",
            epoch,
            history[-1]["train_loss"],
            val_error,
        )

    best = NetworkModel(model.config, model.with_centroid_pathway, best_params)
    return best, history


def write_history(history: list[dict], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,train_loss,val_error,elapsed_s\n")
        for row in history:
            fh.write(
                f"{row['epoch']},{row['train_loss']!r},"
                f"{row['val_error']!r},{row['elapsed_s']:.3f}\n"
            )
