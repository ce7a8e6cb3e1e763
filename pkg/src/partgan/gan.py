"""Adversarial pair: latent sampling, the two costs, and alternating updates.

Model space is [-1, 1] (the generator ends in Tanh); datasets live in [0, 1]
and are mapped with ``2x - 1`` on the way in and ``(v + 1) / 2`` on the way
out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .architectures import ArchConfig, build_layer_specs
from .nn import Network, Sigmoid, backward, build_network, forward
from .optim import AdamState, adam_step

DEFAULT_CLAMP = 1e-7


@dataclass(frozen=True)
class LatentSpec:
    d_z: int

    def __post_init__(self):
        if self.d_z < 1:
            raise ValueError("latent dimension must be positive")


@dataclass(frozen=True)
class LabelSpec:
    d_y: int = 0

    def __post_init__(self):
        if self.d_y < 0:
            raise ValueError("label dimension must be non-negative")

    @property
    def conditional(self) -> bool:
        return self.d_y > 0


@dataclass
class StepReport:
    j_d: float
    j_g: float
    d_real_mean: float
    d_fake_mean: float


@dataclass
class TrainConfig:
    """Per-pair training hyper-parameters (shared by every mode)."""

    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clamp: float = DEFAULT_CLAMP
    d_steps: int = 1
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        if self.epochs < 1 or self.batch_size < 1 or self.d_steps < 1:
            raise ValueError("epochs, batch_size and d_steps must be >= 1")
        if not 0 < self.clamp < 0.5:
            raise ValueError("clamp must lie in (0, 0.5)")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("epochs", "batch_size", "lr", "beta1", "beta2", "adam_eps", "clamp", "d_steps")}
        d["arch"] = self.arch.to_dict()
        return d


class GanPair:
    """A generator/discriminator pair with its own optimizers.

    The discriminator input is the sample with ``d_y`` one-hot label planes
    appended along the channel axis; the generator input is noise followed
    by the one-hot label.
    """

    def __init__(
        self,
        generator: Network,
        discriminator: Network,
        latent: LatentSpec,
        label: LabelSpec,
        opt_g: AdamState,
        opt_d: AdamState,
        prob_clamp: float = DEFAULT_CLAMP,
        d_steps: int = 1,
    ):
        if generator.input_shape != (latent.d_z + label.d_y,):
            raise ValueError(
                f"generator input {generator.input_shape} != d_z + d_y = {latent.d_z + label.d_y}"
            )
        sample_shape = generator.output_shape
        expected = (sample_shape[0] + label.d_y,) + tuple(sample_shape[1:])
        if discriminator.input_shape != expected:
            raise ValueError(f"discriminator input {discriminator.input_shape} != {expected}")
        if discriminator.output_shape != (1,) or not isinstance(discriminator.layers[-1], Sigmoid):
            raise ValueError("discriminator must end in a single Sigmoid unit")
        if opt_g.m.size != generator.n_params or opt_d.m.size != discriminator.n_params:
            raise ValueError("optimizer state does not match network size")
        self.generator = generator
        self.discriminator = discriminator
        self.latent = latent
        self.label = label
        self.opt_g = opt_g
        self.opt_d = opt_d
        self.prob_clamp = prob_clamp
        self.d_steps = d_steps

    @property
    def sample_shape(self) -> tuple:
        return self.generator.output_shape


def build_pair(config: TrainConfig, data_shape: tuple, d_y: int, seed: int) -> GanPair:
    """Fresh pair for samples of shape (C, H, W); deterministic in ``seed``."""
    g_layers, d_layers = build_layer_specs(config.arch, tuple(data_shape), d_y)
    g_seed, d_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2))
    gen = build_network(g_layers, g_seed, init_std=config.arch.init_std)
    d_in = (data_shape[0] + d_y,) + tuple(data_shape[1:])
    disc = build_network(d_layers, d_seed, input_shape=d_in, init_std=config.arch.init_std)
    adam = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    return GanPair(
        gen,
        disc,
        LatentSpec(config.arch.d_z),
        LabelSpec(d_y),
        AdamState.zeros(gen.n_params, **adam),
        AdamState.zeros(disc.n_params, **adam),
        config.clamp,
        config.d_steps,
    )


def _label_array(label: LabelSpec, class_id, n: int):
    if not label.conditional:
        return None
    if class_id is None:
        raise ValueError("conditional pair needs a class id")
    labels = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (n,))
    if labels.size and (labels.min() < 0 or labels.max() >= label.d_y):
        raise ValueError(f"class id out of range [0, {label.d_y})")
    return labels


def sample_latent(latent: LatentSpec, label: LabelSpec, class_id, n: int, rng) -> np.ndarray:
    """``n`` rows of standard-normal noise followed by the one-hot label.

    ``class_id`` may be a single class or one class per row; it is ignored
    for unconditional pairs (``d_y == 0``).
    """
    labels = _label_array(label, class_id, n)
    z = rng.standard_normal((n, latent.d_z))
    if labels is None:
        return z
    onehot = np.zeros((n, label.d_y))
    onehot[np.arange(n), labels] = 1.0
    return np.concatenate([z, onehot], axis=1)


def condition(samples: np.ndarray, label: LabelSpec, labels) -> np.ndarray:
    """Append one-hot label planes to a batch of (C, H, W) samples."""
    if not label.conditional:
        return samples
    n = samples.shape[0]
    planes = np.zeros((n, label.d_y) + samples.shape[2:])
    planes[np.arange(n), labels] = 1.0
    return np.concatenate([samples, planes], axis=1)


def _clamped(p, clamp):
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty batch")
    return p, np.clip(p, clamp, 1 - clamp)


def discriminator_loss(d_real, d_fake, clamp: float = DEFAULT_CLAMP) -> float:
    """-(1/2) mean log D(x) - (1/2) mean log(1 - D(G(z))), probabilities clamped."""
    _, pr = _clamped(d_real, clamp)
    _, pf = _clamped(d_fake, clamp)
    return float(-0.5 * np.mean(np.log(pr)) - 0.5 * np.mean(np.log1p(-pf)))


def generator_loss(d_fake, clamp: float = DEFAULT_CLAMP) -> float:
    """(1/2) mean log D(G(z)); the generator maximizes this."""
    _, pf = _clamped(d_fake, clamp)
    return float(0.5 * np.mean(np.log(pf)))


def discriminator_loss_grads(d_real, d_fake, clamp: float = DEFAULT_CLAMP):
    """Gradients of :func:`discriminator_loss` w.r.t. both probability batches."""
    raw_r, pr = _clamped(d_real, clamp)
    raw_f, pf = _clamped(d_fake, clamp)
    inside_r = (raw_r >= clamp) & (raw_r <= 1 - clamp)
    inside_f = (raw_f >= clamp) & (raw_f <= 1 - clamp)
    g_r = np.where(inside_r, -0.5 / (pr.size * pr), 0.0)
    g_f = np.where(inside_f, 0.5 / (pf.size * (1 - pf)), 0.0)
    return g_r.reshape(np.shape(d_real)), g_f.reshape(np.shape(d_fake))


def generator_loss_grad(d_fake, clamp: float = DEFAULT_CLAMP):
    """Gradient of :func:`generator_loss` w.r.t. the fake probabilities."""
    raw, pf = _clamped(d_fake, clamp)
    inside = (raw >= clamp) & (raw <= 1 - clamp)
    return np.where(inside, 0.5 / (pf.size * pf), 0.0).reshape(np.shape(d_fake))


def clamp_pattern(p, clamp: float = DEFAULT_CLAMP) -> np.ndarray:
    """Which probabilities sit outside the clamp band (for gradient checks)."""
    p = np.asarray(p).ravel()
    return np.concatenate([p < clamp, p > 1 - clamp])


def discriminator_update(pair: GanPair, real_batch: np.ndarray, labels, rng):
    """One discriminator Adam step; returns (j_d, mean D(real), mean D(fake))."""
    n = real_batch.shape[0]
    gen, disc = pair.generator, pair.discriminator
    z = sample_latent(pair.latent, pair.label, labels, n, rng)
    fake, _ = forward(gen, z, "train", rng)
    p_real, tr_real = forward(disc, condition(real_batch, pair.label, labels), "train", rng)
    p_fake, tr_fake = forward(disc, condition(fake, pair.label, labels), "train", rng)
    j_d = discriminator_loss(p_real, p_fake, pair.prob_clamp)
    g_real, g_fake = discriminator_loss_grads(p_real, p_fake, pair.prob_clamp)
    grad_real, _ = backward(disc, tr_real, g_real)
    grad_fake, _ = backward(disc, tr_fake, g_fake)
    adam_step(pair.opt_d, disc.params, grad_real + grad_fake)
    return j_d, float(p_real.mean()), float(p_fake.mean())


def generator_update(pair: GanPair, n: int, labels, rng) -> float:
    """One generator Adam ascent step on J_G through a frozen discriminator."""
    gen, disc = pair.generator, pair.discriminator
    z = sample_latent(pair.latent, pair.label, labels, n, rng)
    fake, tr_gen = forward(gen, z, "train", rng)
    p_fake, tr_disc = forward(disc, condition(fake, pair.label, labels), "train", rng)
    j_g = generator_loss(p_fake, pair.prob_clamp)
    # ascend J_G by descending -J_G
    _, g_input = backward(disc, tr_disc, -generator_loss_grad(p_fake, pair.prob_clamp))
    g_fake = g_input[:, : fake.shape[1]]
    grad_gen, _ = backward(gen, tr_gen, g_fake)
    adam_step(pair.opt_g, gen.params, grad_gen)
    return j_g


def train_step(pair: GanPair, real_batch, class_id, rng) -> StepReport:
    """Discriminator update(s) followed by one generator update.

    ``real_batch`` is in model space ([-1, 1] for image data). ``class_id``
    is ``None`` for unconditional pairs, else one class or one per row; fake
    batches reuse the real batch's labels.
    """
    real_batch = np.asarray(real_batch, dtype=np.float64)
    n = real_batch.shape[0]
    if n == 0:
        raise ValueError("empty real batch")
    labels = _label_array(pair.label, class_id, n)
    for i in range(pair.d_steps):
        j_d_i, real_mean_i, fake_mean_i = discriminator_update(pair, real_batch, labels, rng)
        if i == 0:
            j_d, real_mean, fake_mean = j_d_i, real_mean_i, fake_mean_i
    j_g = generator_update(pair, n, labels, rng)
    return StepReport(j_d, j_g, real_mean, fake_mean)


def to_model_space(x):
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def to_pixel_space(v):
    return (np.asarray(v) + 1.0) / 2.0


def generate(pair: GanPair, class_id, n: int, rng) -> np.ndarray:
    """``n`` samples in [0, 1] pixel space from the generator in eval mode."""
    z = sample_latent(pair.latent, pair.label, class_id, n, rng)
    out, _ = forward(pair.generator, z, "eval")
    return to_pixel_space(out)


def iterate_minibatches(n: int, batch_size: int, rng):
    """Shuffled minibatch index arrays for one epoch.

    The trailing partial batch is dropped unless the whole set is smaller
    than one batch, in which case it forms a single batch.
    """
    order = rng.permutation(n)
    if n <= batch_size:
        yield order
        return
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def train_gan(pair: GanPair, images, labels, epochs: int, batch_size: int, rng, on_step=None) -> list[StepReport]:
    """Train ``pair`` on ``images`` (pixel space) for ``epochs`` epochs.

    ``labels`` is only used when the pair is conditional.
    """
    data = to_model_space(images)
    labels = None if labels is None else np.asarray(labels)
    reports = []
    for _ in range(epochs):
        for idx in iterate_minibatches(data.shape[0], batch_size, rng):
            cls = labels[idx] if pair.label.conditional else None
            report = train_step(pair, data[idx], cls, rng)
            reports.append(report)
            if on_step is not None:
                on_step(report)
    return reports
