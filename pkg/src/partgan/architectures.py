"""Generator and discriminator layer stacks.

The convolutional builders give the full-size DC-GAN / DC-CGAN layouts at their
default arguments (32x32 images, 100-dim noise, 128-wide generator, 16/32/64/128
discriminator). Smaller widths and image sizes give the desk-scale variants
used by the tests; the layer sequence stays the same.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .nn import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    LeakyReLU,
    ReLU,
    Reshape,
    Sigmoid,
    Tanh,
    Upsample,
    conv_output_size,
)

# Legacy epsilons from common DCGAN code, where BatchNorm2d(c, 0.8) sets eps:
# the first generator BN keeps 1e-5, every other BN uses 0.8.
LEGACY_EPS_FIRST = 1e-5
LEGACY_EPS_OTHER = 0.8


def _eps(bn_eps, first=False):
    if bn_eps == "legacy":
        return LEGACY_EPS_FIRST if first else LEGACY_EPS_OTHER
    return float(bn_eps)


@dataclass
class ArchConfig:
    kind: str = "dcgan"
    d_z: int = 100
    g_width: int = 128
    d_widths: tuple = (16, 32, 64, 128)
    hidden: int = 32
    dropout: float = 0.25
    bn_eps: float | str = 1e-5
    init_std: float = 0.02
    d_output: str = "sigmoid"

    def __post_init__(self):
        self.d_widths = tuple(int(w) for w in self.d_widths)
        if self.kind not in ("dcgan", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.d_output not in ("sigmoid", "none"):
            raise ValueError("d_output must be 'sigmoid' or 'none'")
        if self.bn_eps != "legacy" and float(self.bn_eps) <= 0:
            raise ValueError("bn_eps must be positive or 'legacy'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_widths"] = list(self.d_widths)
        return d


def dcgan_generator(d_z=100, d_y=0, channels=3, image_size=32, width=128, bn_eps=1e-5):
    """Dense -> 128x8x8 -> (upsample, conv, BN, LeakyReLU) x2 -> conv -> Tanh."""
    if image_size % 4:
        raise ValueError(f"generator image_size must be divisible by 4, got {image_size}")
    base = image_size // 4
    return [
        Dense(d_z + d_y, width * base * base),
        ReLU(),
        Reshape((width, base, base)),
        BatchNorm(width, _eps(bn_eps, first=True), 0.1),
        Upsample(2),
        Conv2d(width, width, 3, 1, 1),
        BatchNorm(width, _eps(bn_eps), 0.1),
        LeakyReLU(0.2),
        Upsample(2),
        Conv2d(width, width // 2, 3, 1, 1),
        BatchNorm(width // 2, _eps(bn_eps), 0.1),
        LeakyReLU(0.2),
        Conv2d(width // 2, channels, 3, 1, 1),
        Tanh(),
    ]


def dcgan_discriminator(
    channels=3, image_size=32, d_y=0, widths=(16, 32, 64, 128), dropout=0.25, bn_eps=1e-5, output="sigmoid"
):
    """Four stride-2 conv blocks then a single-unit dense output.

    Conditioning labels enter as ``d_y`` extra constant input planes. The
    flattened size follows from the conv arithmetic (128*2*2 = 512 at 32x32).
    """
    layers = []
    in_ch, size = channels + d_y, image_size
    for i, out_ch in enumerate(widths):
        layers += [Conv2d(in_ch, out_ch, 3, 2, 1), LeakyReLU(0.2), Dropout(dropout)]
        if i > 0:
            layers.append(BatchNorm(out_ch, _eps(bn_eps), 0.1))
        in_ch, size = out_ch, conv_output_size(size, 3, 2, 1)
    flat = in_ch * size * size
    layers += [Reshape((flat,)), Dense(flat, 1)]
    if output == "sigmoid":
        layers.append(Sigmoid())
    return layers


def mlp_generator(d_z, d_y, data_shape, hidden=32, tanh=True):
    out = 1
    for d in data_shape:
        out *= d
    layers = [Dense(d_z + d_y, hidden), LeakyReLU(0.2), Dense(hidden, hidden), LeakyReLU(0.2), Dense(hidden, out)]
    if tanh:
        layers.append(Tanh())
    layers.append(Reshape(tuple(data_shape)))
    return layers


def mlp_discriminator(data_shape, d_y=0, hidden=32, output="sigmoid"):
    c, h, w = data_shape
    flat = (c + d_y) * h * w
    layers = [Reshape((flat,)), Dense(flat, hidden), LeakyReLU(0.2), Dense(hidden, hidden), LeakyReLU(0.2), Dense(hidden, 1)]
    if output == "sigmoid":
        layers.append(Sigmoid())
    return layers


def build_layer_specs(arch: ArchConfig, data_shape: tuple, d_y: int):
    """Return ``(generator_layers, discriminator_layers)`` for data of shape (C, H, W)."""
    c, h, w = data_shape
    if arch.kind == "mlp":
        return (
            mlp_generator(arch.d_z, d_y, data_shape, arch.hidden),
            mlp_discriminator(data_shape, d_y, arch.hidden, arch.d_output),
        )
    if h != w:
        raise ValueError(f"convolutional architecture needs square images, got {h}x{w}")
    return (
        dcgan_generator(arch.d_z, d_y, c, h, arch.g_width, arch.bn_eps),
        dcgan_discriminator(c, h, d_y, arch.d_widths, arch.dropout, arch.bn_eps, arch.d_output),
    )
