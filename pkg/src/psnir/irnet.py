"""Image reconstruction network and the rendering step.

For every observation the network predicts a reflectance image (BRDF times cast
shadow) from the observed image, a specularity hint and the PSNet feature map,
then re-renders the observation as ``R * max(l^T N, 0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .psnet import ConvBlock

DEFAULT_IR_CHANNELS = 16


@dataclass
class IrNetParams:
    ir1: list
    blend_local: dc.Tensor  # 1x1 weights applied to Y_i
    blend_global: dc.Tensor | None  # 1x1 weights applied to Phi
    blend_bias: dc.Tensor
    blend_gamma: dc.Tensor
    blend_beta: dc.Tensor
    ir3: ConvBlock
    out_weight: dc.Tensor
    out_bias: dc.Tensor
    use_specularity: bool = True

    @classmethod
    def init(cls, color_channels, ps_channels, rng, channels=DEFAULT_IR_CHANNELS,
             dtype=np.float32, use_specularity=True, use_global_blend=True):
        d = color_channels + (1 if use_specularity else 0)
        ir1 = []
        for _ in range(3):
            ir1.append(ConvBlock.init(d, channels, rng, dtype))
            d = channels
        # one 1x1 conv over Concat(Y, Phi), stored as its two column blocks
        d_blend = channels + (ps_channels if use_global_blend else 0)
        w = dc.he_init((channels, d_blend, 1, 1), rng).astype(dtype)
        local = dc.parameter(np.ascontiguousarray(w[:, :channels]))
        glob = dc.parameter(np.ascontiguousarray(w[:, channels:])) if use_global_blend else None
        ir3 = ConvBlock.init(channels, channels, rng, dtype)
        out_w = dc.he_init((color_channels, channels, 3, 3), rng).astype(dtype)
        zeros = lambda n: dc.parameter(np.zeros((1, n, 1, 1), dtype))
        return cls(
            ir1=ir1,
            blend_local=local,
            blend_global=glob,
            blend_bias=zeros(channels),
            blend_gamma=dc.parameter(np.ones((1, channels, 1, 1), dtype)),
            blend_beta=zeros(channels),
            ir3=ir3,
            out_weight=dc.parameter(out_w),
            out_bias=zeros(color_channels),
            use_specularity=use_specularity,
        )

    @property
    def use_global_blend(self):
        return self.blend_global is not None

    def parameters(self):
        params = [p for b in self.ir1 for p in b.parameters()]
        params += [self.blend_local]
        if self.blend_global is not None:
            params.append(self.blend_global)
        params += [self.blend_bias, self.blend_gamma, self.blend_beta]
        params += self.ir3.parameters() + [self.out_weight, self.out_bias]
        return params


def specularity_channel(N, light_dirs, view=(0.0, 0.0, 1.0)):
    """v^T (2 (l^T n) n - l) per pixel and light; returns (M, 1, H, W).

    ``N`` is a (1, 3, H, W) tensor and ``light_dirs`` an (M, 3) array of unit
    directions.
    """
    dirs = np.asarray(light_dirs, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(view, dtype=np.float64)
    ln = dc.project_channels(N, dirs[:, None, :])  # (M, 1, H, W)
    vn = dc.project_channels(N, v[None, None, :])  # (1, 1, H, W)
    vl = (dirs @ v).reshape(-1, 1, 1, 1)
    return dc.sub(dc.scale(dc.mul(ln, vn), 2.0), vl)


def blend(Y, phi, params, bn_eps=1e-5, cache=True):
    """Z = ReLU(BN(W1 Y + W2 Phi + b)).

    With ``cache`` the Phi term is evaluated once and broadcast over the batch;
    otherwise it is recomputed for each observation.
    """
    h = dc.conv2d(Y, params.blend_local)
    if params.blend_global is not None:
        if cache:
            g = dc.conv2d(phi, params.blend_global, params.blend_bias)
        else:
            g = dc.concat_batch(
                [dc.conv2d(phi, params.blend_global, params.blend_bias) for _ in range(Y.shape[0])]
            )
        h = dc.add(h, g)
    else:
        h = dc.add(h, params.blend_bias)
    return dc.relu(dc.batchnorm_train(h, params.blend_gamma, params.blend_beta, bn_eps))


def irnet_reflectance(images, N, light_dirs, phi, params, view=(0.0, 0.0, 1.0),
                      bn_eps=1e-5, cache=True):
    """Reflectance images R (M, C, H, W) for all observations at once."""
    if not isinstance(images, dc.Tensor):
        images = dc.Tensor(np.asarray(images, dtype=N.dtype))
    if phi.shape[2:] != images.shape[2:]:
        raise dc.ShapeError("irnet_reflectance", "height", phi.shape[2], images.shape[2])
    x = images
    if params.use_specularity:
        x = dc.concat_channels(images, specularity_channel(N, light_dirs, view))
    for block in params.ir1:
        x = block(x, bn_eps)
    z = blend(x, phi, params, bn_eps, cache)
    z = params.ir3(z, bn_eps)
    return dc.conv2d(z, params.out_weight, params.out_bias)


def render(R, N, lights):
    """I_hat = R * max(l^T N, 0); ``lights`` is (M, C, 3) (intensity-scaled)."""
    shading = dc.relu(dc.project_channels(N, lights))
    return dc.mul(R, shading)


def render_all(images, N, phi, lights, params, view=(0.0, 0.0, 1.0), bn_eps=1e-5, cache=True):
    """Reconstruct every observation in one minibatch.

    ``lights`` is a :class:`~psnir.domain.LightingSet`. Returns ``(I_hat, R)``.
    """
    C = images.shape[1]
    R = irnet_reflectance(images, N, lights.directions, phi, params, view, bn_eps, cache)
    return render(R, N, lights.combined(C)), R
