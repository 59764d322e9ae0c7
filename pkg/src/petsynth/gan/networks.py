"""U-Net generator and pair-conditioned patch discriminator."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor import (Conv3d, ConvTranspose3d, InstanceNorm3d, Module, Tensor, as_tensor, concat,
                      leaky_relu, relu, sigmoid)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_channels: int = 16
    max_channels: int = 128
    skip_connections: bool = True
    # Zero final layer makes the untrained output exactly 0.5.
    zero_init_output: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be >= 1")

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorConfig:
    layers: int = 3
    base_channels: int = 16
    max_channels: int = 128
    spectral_norm: bool = True
    power_iterations: int = 1
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1 or self.base_channels < 1:
            raise ConfigError("layers and base_channels must be >= 1")

    def to_dict(self):
        return asdict(self)


class _Down(Module):
    def __init__(self, cin, cout, rng, norm, std):
        self.conv = Conv3d(cin, cout, 4, 2, 1, rng=rng, init_std=std)
        self.norm = InstanceNorm3d(cout) if norm else None

    def forward(self, x):
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return leaky_relu(y, 0.2)


class _Up(Module):
    def __init__(self, cin, cout, rng, std):
        self.conv = ConvTranspose3d(cin, cout, 4, 2, 1, rng=rng, init_std=std)
        self.norm = InstanceNorm3d(cout)

    def forward(self, x):
        return relu(self.norm(self.conv(x)))


class Generator(Module):
    """Encoder of stride-2 4^3 convolutions, mirrored transposed-conv decoder,
    skip connections by channel concatenation, sigmoid output.

    The first and innermost encoder blocks have no normalization (the
    innermost feature map can be as small as 2^3).
    """

    def __init__(self, config: GeneratorConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config = config or GeneratorConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        ch = config.channels()
        std = config.init_std
        self.down = [_Down(1 if i == 0 else ch[i - 1], ch[i], rng, 0 < i < config.depth - 1, std)
                     for i in range(config.depth)]
        mult = 2 if config.skip_connections else 1
        self.up = []
        for i in range(config.depth - 1, 0, -1):
            cin = ch[i] if i == config.depth - 1 else ch[i] * mult
            self.up.append(_Up(cin, ch[i - 1], rng, std))
        cin = ch[0] * mult if config.depth > 1 else ch[0]
        self.out = ConvTranspose3d(cin, 1, 4, 2, 1, rng=rng, init_std=std)
        if config.zero_init_output:
            self.out.weight.data[...] = 0.0
            self.out.bias.data[...] = 0.0

    def check_dims(self, dims) -> None:
        f = 2 ** self.config.depth
        bad = [d for d in dims if d % f]
        if bad:
            target = tuple(-(-d // f) * f for d in dims)
            raise ConfigError(f"spatial dims {tuple(dims)} must be divisible by 2^depth={f}; "
                              f"pad to {target}")

    def forward(self, mri) -> Tensor:
        x = as_tensor(mri)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ConfigError(f"generator expects (B, 1, X, Y, Z), got {x.shape}")
        self.check_dims(x.shape[2:])
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(x)
            skip = skips.pop()
            if self.config.skip_connections:
                x = concat([x, skip], axis=1)
        return sigmoid(self.out(x))


class Discriminator(Module):
    """Patch discriminator on (PET candidate, MRI) channel pairs.

    ``layers`` stride-2 4^3 blocks then a 3^3 scoring convolution; output
    size is X / 2^layers per axis.  Spectral normalization wraps every block
    except the first and the scoring layer; no final activation.
    """

    def __init__(self, config: DiscriminatorConfig | None = None, rng: np.random.Generator | None = None):
        self.config = config = config or DiscriminatorConfig()
        rng = rng if rng is not None else np.random.default_rng(1)
        std = config.init_std
        self.blocks = []
        self.norms = []
        cin = 2
        for i in range(config.layers):
            cout = min(config.base_channels * 2 ** i, config.max_channels)
            sn = config.spectral_norm and i > 0
            conv = Conv3d(cin, cout, 4, 2, 1, rng=rng, spectral_norm=sn, init_std=std)
            if conv.sn is not None:
                conv.sn.n_power_iterations = config.power_iterations
            self.blocks.append(conv)
            self.norms.append(InstanceNorm3d(cout) if i > 0 else None)
            cin = cout
        self.score = Conv3d(cin, 1, 3, 1, 1, rng=rng, init_std=std)

    def spectral_layers(self) -> list[Conv3d]:
        return [b for b in self.blocks if b.sn is not None]

    def forward(self, pet, mri) -> Tensor:
        pet, mri = as_tensor(pet), as_tensor(mri)
        if pet.shape != mri.shape:
            raise ConfigError(f"PET candidate {pet.shape} and MRI {mri.shape} differ in shape")
        f = 2 ** self.config.layers
        if any(d % f for d in pet.shape[2:]):
            raise ConfigError(f"spatial dims {pet.shape[2:]} must be divisible by {f}")
        x = concat([pet, mri], axis=1)
        for conv, norm in zip(self.blocks, self.norms):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = leaky_relu(x, 0.2)
        return self.score(x)
