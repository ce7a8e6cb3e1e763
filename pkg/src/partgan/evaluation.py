"""Sample-quality and dataset statistics.

The inception-style score is computed from the class posteriors of a small
surrogate classifier trained on real data, so scores are only comparable
between runs that share the same surrogate (identified by its parameter
hash).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .nn import Conv2d, Dense, LeakyReLU, Network, Reshape, backward, build_network, forward
from .optim import AdamState, adam_step


class AccuracyFloorError(RuntimeError):
    pass


class UndefinedFError(ArithmeticError):
    """F is 0/0: no spread within the groups and none between them."""


@dataclass
class Classifier:
    network: Network
    K: int
    accuracy: float

    @property
    def identity(self) -> str:
        return hashlib.sha256(self.network.params.tobytes()).hexdigest()[:16]


@dataclass
class ScoreReport:
    split_scores: list
    mean: float
    std: float
    n_splits: int
    classifier: str | None = None
    classifier_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AnovaReport:
    f: list
    K: int
    counts: list
    infinite: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "f": [None if math.isinf(v) else v for v in self.f],
            "infinite": self.infinite,
            "K": self.K,
            "counts": self.counts,
        }


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_probs(clf: Classifier, images) -> np.ndarray:
    """Class posteriors for pixel-space images (the classifier sees 2x - 1)."""
    logits, _ = forward(clf.network, 2.0 * np.asarray(images, dtype=np.float64) - 1.0, "eval")
    return softmax(logits)


def _split_bounds(n: int, n_splits: int):
    size = n // n_splits
    starts = [i * size for i in range(n_splits)]
    return [(s, s + size if i < n_splits - 1 else n) for i, s in enumerate(starts)]


def inception_score(probs, n_splits: int = 10, shuffle_seed: int | None = None) -> ScoreReport:
    """exp(mean KL(p(y|x) || p(y))) per contiguous split; mean and population std.

    Splits have ``N // n_splits`` rows, the last one also takes the remainder.
    With ``shuffle_seed`` the rows are permuted first.
    """
    p = np.asarray(probs, dtype=np.float64)
    n, k = p.shape
    if n_splits < 1 or n < n_splits:
        raise ValueError(f"need at least n_splits={n_splits} samples, got {n}")
    if shuffle_seed is not None:
        p = p[np.random.default_rng(shuffle_seed).permutation(n)]
    scores = []
    for lo, hi in _split_bounds(n, n_splits):
        part = p[lo:hi]
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        kl = terms.sum(axis=1).mean()
        # KL against the split's own marginal lies in [0, log K]; clip rounding
        scores.append(float(np.exp(min(max(kl, 0.0), math.log(k)))))
    return ScoreReport(scores, float(np.mean(scores)), float(np.std(scores)), n_splits)


@dataclass
class ClassifierConfig:
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    holdout: float = 0.2
    accuracy_floor: float = 0.9
    seed: int = 0
    init_std: float = 0.1


def classifier_layers(sample_shape, K: int, hidden: int):
    c, h, w = sample_shape
    if h >= 8 and w >= 8:
        flat = 8 * ((h + 1) // 2) * ((w + 1) // 2)
        return [Conv2d(c, 8, 3, 2, 1), LeakyReLU(0.2), Reshape((flat,)), Dense(flat, hidden), LeakyReLU(0.2), Dense(hidden, K)]
    flat = c * h * w
    return [Reshape((flat,)), Dense(flat, hidden), LeakyReLU(0.2), Dense(hidden, K)]


def train_surrogate_classifier(dataset: Dataset, config: ClassifierConfig | None = None) -> Classifier:
    """Softmax classifier on real data, validated on a held-out split.

    Raises :class:`AccuracyFloorError` when held-out accuracy is below
    ``config.accuracy_floor``.
    """
    config = config or ClassifierConfig()
    if dataset.K < 2:
        raise ValueError("surrogate classifier needs K >= 2 classes")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(dataset.m)
    n_hold = int(round(config.holdout * dataset.m))
    hold, train = order[:n_hold], order[n_hold:]
    net = build_network(
        classifier_layers(dataset.sample_shape, dataset.K, config.hidden),
        config.seed,
        input_shape=dataset.sample_shape,
        init_std=config.init_std,
    )
    opt = AdamState.zeros(net.n_params, lr=config.lr, beta1=0.9, beta2=0.999)
    x = 2.0 * dataset.images - 1.0
    y = dataset.labels
    for _ in range(config.epochs):
        perm = train[rng.permutation(train.size)]
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits, trace = forward(net, x[idx], "train")
            g = softmax(logits)
            g[np.arange(idx.size), y[idx]] -= 1.0
            grad, _ = backward(net, trace, g / idx.size)
            adam_step(opt, net.params, grad)
    net.eval()
    check = hold if hold.size else train
    pred = np.argmax(forward(net, x[check], "eval")[0], axis=1)
    accuracy = float(np.mean(pred == y[check]))
    if accuracy < config.accuracy_floor:
        raise AccuracyFloorError(
            f"surrogate accuracy {accuracy:.3f} below floor {config.accuracy_floor}; "
            "raise classifier epochs/hidden or lower the floor"
        )
    return Classifier(net, dataset.K, accuracy)


def anova_decomposition(groups):
    """Return (SSB, SSW, SST, df_between, df_within) by two-pass sums."""
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2 or any(g.size == 0 for g in groups):
        raise ValueError("ANOVA needs at least two non-empty groups")
    n = sum(g.size for g in groups)
    if n <= len(groups):
        raise ValueError("ANOVA needs more observations than groups")
    grand = np.concatenate(groups).mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    sst = ((np.concatenate(groups) - grand) ** 2).sum()
    return float(ssb), float(ssw), float(sst), len(groups) - 1, n - len(groups)


def anova_f(groups) -> float:
    """One-way ANOVA F = MSB / MSW.

    Returns ``math.inf`` when the within-group spread is zero but the means
    differ; raises :class:`UndefinedFError` for the 0/0 case.
    """
    ssb, ssw, _, dfb, dfw = anova_decomposition(groups)
    msb, msw = ssb / dfb, ssw / dfw
    if msw == 0:
        if msb == 0:
            raise UndefinedFError("F undefined: no spread within or between groups")
        return math.inf
    return msb / msw


def anova_per_channel(images, labels, K: int) -> AnovaReport:
    """F per channel with per-image channel means as observations."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    means = images.mean(axis=(2, 3))  # (m, C)
    counts = [int(np.sum(labels == k)) for k in range(K)]
    fs = []
    for c in range(images.shape[1]):
        fs.append(anova_f([means[labels == k, c] for k in range(K)]))
    return AnovaReport(fs, K, counts, [math.isinf(f) for f in fs])
