"""Small convolutional feature extractor and its pretraining head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    input_size: int = 32
    stage_channels: tuple = (16, 32, 32)
    kernel_size: int = 3
    downsample: tuple = (True, True, False)

    def __post_init__(self):
        if len(self.downsample) != len(self.stage_channels):
            raise ContractError(
                f"downsample flags {self.downsample} do not match {len(self.stage_channels)} stages"
            )
        if self.kernel_size < 1 or self.input_size < 1:
            raise ContractError("kernel_size and input_size must be positive")

    @property
    def channels(self) -> int:
        return self.stage_channels[-1]

    def stage_sides(self):
        """Spatial side after each stage."""
        side, out = self.input_size, []
        k, p = self.kernel_size, self.kernel_size // 2
        for down in self.downsample:
            s = 2 if down else 1
            if k > side + 2 * p:
                raise DimensionError(f"kernel {k} larger than padded side {side + 2 * p}")
            side = (side + 2 * p - k) // s + 1
            out.append(side)
        return out

    @property
    def side(self) -> int:
        return self.stage_sides()[-1]


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> dict:
    """He-initialised conv kernels with zero biases."""
    params = {}
    cin, k = config.input_channels, config.kernel_size
    for i, cout in enumerate(config.stage_channels):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"backbone.conv{i}.weight"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        params[f"backbone.conv{i}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    return params


def init_head(config: BackboneConfig, rng: np.random.Generator) -> dict:
    c = config.channels
    return {
        "head.weight": Tensor(rng.normal(0.0, np.sqrt(1.0 / c), (c, 2)), requires_grad=True),
        "head.bias": Tensor(np.zeros(2), requires_grad=True),
    }


def backbone_forward(images, params: dict, config: BackboneConfig) -> Tensor:
    """``B×3×S×S`` images to the feature map ``F_b`` of shape ``B×C×H×W``."""
    x = T.as_tensor(images)
    expected = (config.input_channels, config.input_size, config.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"backbone expects B×{'×'.join(map(str, expected))} images, got {x.shape}")
    pad = config.kernel_size // 2
    for i, down in enumerate(config.downsample):
        x = T.conv2d(
            x,
            params[f"backbone.conv{i}.weight"],
            params[f"backbone.conv{i}.bias"],
            stride=2 if down else 1,
            padding=pad,
        )
        x = T.relu(x)
    return x


def global_channel_mean(F_b) -> Tensor:
    """Average over channels, keeping a singleton channel axis: ``B×1×H×W``."""
    return T.reduce_mean(F_b, axis=1, keepdims=True)


def head_logits(F_b, params: dict) -> Tensor:
    B, C = F_b.shape[:2]
    pooled = T.reduce_mean(T.reshape(F_b, (B, C, -1)), axis=2)
    bias = T.broadcast_to(params["head.bias"], (B, 2))
    return T.matmul(pooled, params["head.weight"]) + bias


def backbone_classifier_head(F_b, params: dict) -> Tensor:
    """Global average pool, one affine map, softmax: ``B×2`` probabilities."""
    return T.softmax(head_logits(F_b, params), axis=-1)
