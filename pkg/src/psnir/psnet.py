"""Photometric stereo network: stacked observations -> features -> unit normals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

DEFAULT_PS_CHANNELS = 384


@dataclass
class ConvBlock:
    """3x3 (or 1x1) conv, batch norm and ReLU."""

    weight: dc.Tensor
    bias: dc.Tensor
    gamma: dc.Tensor
    beta: dc.Tensor

    @classmethod
    def init(cls, d_in, d_out, rng, dtype, k=3):
        w = dc.he_init((d_out, d_in, k, k), rng).astype(dtype)
        return cls(
            dc.parameter(w),
            dc.parameter(np.zeros((1, d_out, 1, 1), dtype)),
            dc.parameter(np.ones((1, d_out, 1, 1), dtype)),
            dc.parameter(np.zeros((1, d_out, 1, 1), dtype)),
        )

    def __call__(self, x, eps=1e-5):
        h = dc.conv2d(x, self.weight, self.bias)
        return dc.relu(dc.batchnorm_train(h, self.gamma, self.beta, eps))

    def parameters(self):
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class PsNetParams:
    blocks: list
    out_weight: dc.Tensor
    out_bias: dc.Tensor

    @classmethod
    def init(cls, in_channels, rng, channels=DEFAULT_PS_CHANNELS, dtype=np.float32):
        blocks = []
        d = in_channels
        for _ in range(3):
            blocks.append(ConvBlock.init(d, channels, rng, dtype))
            d = channels
        w = dc.he_init((3, channels, 3, 3), rng).astype(dtype)
        return cls(blocks, dc.parameter(w), dc.parameter(np.zeros((1, 3, 1, 1), dtype)))

    @property
    def in_channels(self):
        return self.blocks[0].weight.shape[1]

    @property
    def channels(self):
        return self.blocks[0].weight.shape[0]

    def parameters(self):
        params = [p for b in self.blocks for p in b.parameters()]
        return params + [self.out_weight, self.out_bias]


def build_input(images, mask, dtype=np.float32):
    """Concatenate (M, C, H, W) images along channels and append the mask.

    Channel order is observation-major: (i=0,c=0), (i=0,c=1), ..., then mask.
    """
    images = np.asarray(images)
    M, C, H, W = images.shape
    stacked = images.reshape(1, M * C, H, W)
    m = np.asarray(mask, dtype=dtype).reshape(1, 1, H, W)
    return dc.Tensor(np.concatenate([stacked.astype(dtype), m], axis=1))


def psnet_features(x, params, bn_eps=1e-5):
    if x.shape[1] != params.in_channels:
        raise dc.ShapeError("psnet_features", "channels", x.shape[1], params.in_channels)
    h = x
    for block in params.blocks:
        h = block(h, bn_eps)
    return h


def psnet_normals(phi, params, norm_eps=1e-12):
    return dc.l2_normalize_channels(dc.conv2d(phi, params.out_weight, params.out_bias), norm_eps)
