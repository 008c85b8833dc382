"""Encoder-decoder CNN predicting a per-pixel feature image from RGB.

Each level is two 3x3 convs with LeakyReLU; downsampling is 2x2 max-pool,
upsampling is nearest-neighbor followed by a conv (no transposed convs),
decoder levels concatenate the matching encoder skip. A final 1x1 conv maps
to the field's feature dimension with no output activation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as A
from .autodiff import Conv2d, Module, Tensor

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 12
    levels: int = 3
    base_channels: int = 16
    input_size: int = 64

    def __post_init__(self):
        if self.input_size % (2 ** self.levels):
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^{self.levels}")
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(blob: str) -> "UNetConfig":
        return UNetConfig(**json.loads(blob))


class _ConvBlock(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.c1 = Conv2d(cin, cout, 3, rng, padding=1)
        self.c2 = Conv2d(cout, cout, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = A.leaky_relu(self.c1(x), LEAKY_SLOPE)
        return A.leaky_relu(self.c2(x), LEAKY_SLOPE)


class UNet(Module):
    def __init__(self, config: UNetConfig, rng: np.random.Generator):
        self.config = config
        ch = [config.base_channels * (2 ** i) for i in range(config.levels + 1)]
        self.encoders = [_ConvBlock(config.in_channels if i == 0 else ch[i - 1],
                                    ch[i], rng)
                         for i in range(config.levels)]
        self.bottleneck = _ConvBlock(ch[config.levels - 1], ch[config.levels], rng)
        self.up_convs = [Conv2d(ch[i + 1], ch[i], 3, rng, padding=1)
                         for i in reversed(range(config.levels))]
        self.decoders = [_ConvBlock(2 * ch[i], ch[i], rng)
                         for i in reversed(range(config.levels))]
        self.head = Conv2d(ch[0], config.out_channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, out_channels, H, W); H = W = input_size."""
        size = self.config.input_size
        if x.data.ndim != 4 or x.shape[2] != size or x.shape[3] != size:
            raise ValueError(
                f"unet expects (B, {self.config.in_channels}, {size}, {size}) "
                f"input, got {x.shape}")
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = A.maxpool2x2(h)
        h = self.bottleneck(h)
        for up, dec, skip in zip(self.up_convs, self.decoders, reversed(skips)):
            h = up(A.upsample_nearest2x(h))
            h = dec(A.concat([skip, h], axis=1))
        return self.head(h)

    def feature_image(self, image: np.ndarray) -> np.ndarray:
        """Inference helper: (H, W, 3) float image -> (H, W, C) features."""
        x = Tensor(np.ascontiguousarray(
            image.astype(np.float32).transpose(2, 0, 1))[None])
        with A.no_grad():
            out = self(x)
        return out.data[0].transpose(1, 2, 0)

    def checkpoint_meta(self) -> dict:
        return {"unet_config": json.loads(self.config.to_json())}

    @staticmethod
    def from_checkpoint_meta(meta: dict, arrays: dict[str, np.ndarray],
                             prefix: str = "unet.") -> "UNet":
        config = UNetConfig(**meta["unet_config"])
        model = UNet(config, np.random.default_rng(0))
        own = {k[len(prefix):]: v for k, v in arrays.items()
               if k.startswith(prefix)}
        model.load_state_arrays(own)
        return model
