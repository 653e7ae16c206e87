"""Convolutional encoder/decoder over storm-centred GPH stacks.

Encoder layout for an input stack of depth 5 and size q::

    conv1 3x3x3, 1->16, no temporal pad    (5, q, q)   -> (3, q, q)
    pool  1x2x2                             -> (3, q/2, q/2)
    conv2 3x3x3, 16->32, no temporal pad    -> (1, q/2, q/2)
    pool  1x2x2                             -> (1, q/4, q/4)
    conv3 3x3, 32->64 (time axis dropped)   -> (q/4, q/4)
    pool  2x2                               -> f_gph (64, q/8, q/8)
    e_gph = FC(flatten(f_gph))

Sizes use floor division; LeakyReLU follows each conv. The decoder mirrors
this with transposed convolutions and restores the exact input size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import tensor as T

TEMPORAL_KERNEL = 3


def _uniform(shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape, dtype=dtype).uniform_(-bound, bound))


def _he_uniform(shape, fan_in, dtype, slope=None):
    """Variance-preserving weight init; ``slope`` set when a LeakyReLU follows."""
    gain2 = 1.0 if slope is None else 2.0 / (1.0 + slope**2)
    bound = math.sqrt(3.0 * gain2 / fan_in)
    return nn.Parameter(torch.empty(shape, dtype=dtype).uniform_(-bound, bound))


def collapsed_depth(time_steps: int) -> int:
    return time_steps - 2 * (TEMPORAL_KERNEL - 1)


@dataclass
class PressureCode:
    f_gph: torch.Tensor  # (B, C3, s3, s3)
    e_gph: torch.Tensor  # (B, d_gph)


class PressureEncoder(nn.Module):
    def __init__(self, q: int = 51, time_steps: int = 5, d_gph: int = 128,
                 channels=(16, 32, 64), slope: float = 0.01, dtype=torch.float64):
        super().__init__()
        if collapsed_depth(time_steps) != 1:
            raise T.ShapeError(_depth_message(time_steps))
        c1, c2, c3 = channels
        self.q, self.time_steps, self.slope = q, time_steps, slope
        self.sizes = (q, q // 2, q // 4, q // 8)
        if self.sizes[-1] < 1:
            raise T.ShapeError(f"encode_gph: q={q} is too small for three 2x pools")
        self.conv1_weight = _he_uniform((c1, 1, 3, 3, 3), 27, dtype, slope)
        self.conv1_bias = _uniform((c1,), 27, dtype)
        self.conv2_weight = _he_uniform((c2, c1, 3, 3, 3), 27 * c1, dtype, slope)
        self.conv2_bias = _uniform((c2,), 27 * c1, dtype)
        self.conv3_weight = _he_uniform((c3, c2, 3, 3), 9 * c2, dtype, slope)
        self.conv3_bias = _uniform((c3,), 9 * c2, dtype)
        flat = c3 * self.sizes[-1] ** 2
        self.fc_weight = _he_uniform((d_gph, flat), flat, dtype)
        self.fc_bias = _uniform((d_gph,), flat, dtype)
        self.d_gph = d_gph

    def features(self, gph: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        """Feature map f_gph for a (B, T, q, q) stack."""
        if gph.dim() == 3:
            gph = gph.unsqueeze(0)
        if gph.dim() != 4 or gph.shape[-2:] != (self.q, self.q):
            raise T.ShapeError(f"encode_gph: expected (B, {self.time_steps}, {self.q}, {self.q}), got {tuple(gph.shape)}")
        if gph.shape[1] != self.time_steps:
            raise T.ShapeError(_depth_message(gph.shape[1]))
        x = gph.unsqueeze(1)  # (B, 1, T, q, q)
        x = T.leaky_relu(T.conv(x, self.conv1_weight, self.conv1_bias, padding=(0, 1, 1)), self.slope)
        _record(trace, "conv1", x)
        x = T.maxpool(x, (1, 2, 2))
        _record(trace, "pool1", x)
        x = T.leaky_relu(T.conv(x, self.conv2_weight, self.conv2_bias, padding=(0, 1, 1)), self.slope)
        _record(trace, "conv2", x)
        x = T.maxpool(x, (1, 2, 2))
        _record(trace, "pool2", x)
        if x.shape[2] != 1:
            raise T.ShapeError(_depth_message(gph.shape[1]))
        x = x.squeeze(2)
        x = T.leaky_relu(T.conv(x, self.conv3_weight, self.conv3_bias, padding=1), self.slope)
        _record(trace, "conv3", x)
        x = T.maxpool(x, (2, 2))
        _record(trace, "pool3", x)
        return x

    def forward(self, gph: torch.Tensor, trace: list | None = None) -> PressureCode:
        f = self.features(gph, trace)
        flat = f.flatten(start_dim=1)
        _record(trace, "flatten", flat)
        return PressureCode(f_gph=f, e_gph=T.affine(flat, self.fc_weight, self.fc_bias))


def _record(trace, name, x):
    if trace is not None:
        trace.append((name, tuple(x.shape)))


def _depth_message(depth: int) -> str:
    return (
        f"encode_gph: time depth {depth} does not collapse to 1; conv1 and conv2 use "
        f"{TEMPORAL_KERNEL}-step temporal kernels without temporal padding, so depth "
        f"T -> T-2 -> T-4, and the 2-D conv3 needs T-4 == 1 (T = 5)"
    )


def encode_gph(gph: torch.Tensor, encoder: PressureEncoder) -> PressureCode:
    return encoder(gph)


class PressureDecoder(nn.Module):
    """Transposed-convolution mirror of :class:`PressureEncoder`.

    Each pool is undone by a 2x2 (1x2x2) stride-2 transposed conv that targets
    the encoder's pre-pool size exactly; each conv by a same-size transposed
    conv, with the two 3-D ones growing time depth 1 -> 3 -> 5.
    """

    def __init__(self, q: int = 51, time_steps: int = 5, channels=(16, 32, 64),
                 slope: float = 0.01, dtype=torch.float64):
        super().__init__()
        if collapsed_depth(time_steps) != 1:
            raise T.ShapeError(_depth_message(time_steps))
        c1, c2, c3 = channels
        self.q, self.time_steps, self.slope = q, time_steps, slope
        self.sizes = (q, q // 2, q // 4, q // 8)
        self.up3_weight = _he_uniform((c3, c3, 2, 2), c3, dtype, slope)
        self.up3_bias = _uniform((c3,), 4 * c3, dtype)
        self.deconv3_weight = _he_uniform((c3, c2, 3, 3), 9 * c3, dtype, slope)
        self.deconv3_bias = _uniform((c2,), 9 * c3, dtype)
        self.up2_weight = _he_uniform((c2, c2, 1, 2, 2), c2, dtype, slope)
        self.up2_bias = _uniform((c2,), 4 * c2, dtype)
        self.deconv2_weight = _he_uniform((c2, c1, 3, 3, 3), 27 * c2, dtype, slope)
        self.deconv2_bias = _uniform((c1,), 27 * c2, dtype)
        self.up1_weight = _he_uniform((c1, c1, 1, 2, 2), c1, dtype, slope)
        self.up1_bias = _uniform((c1,), 4 * c1, dtype)
        self.deconv1_weight = _he_uniform((c1, 1, 3, 3, 3), 27 * c1, dtype)
        self.deconv1_bias = _uniform((1,), 27 * c1, dtype)

    def forward(self, f_gph: torch.Tensor) -> torch.Tensor:
        """Predict the next (B, T, q, q) stack from f_gph, in normalized units."""
        q, s1, s2, s3 = self.sizes
        if f_gph.dim() != 4 or f_gph.shape[1] != self.up3_weight.shape[0] or f_gph.shape[-2:] != (s3, s3):
            raise T.ShapeError(
                f"decode_gph: expected (B, {self.up3_weight.shape[0]}, {s3}, {s3}), got {tuple(f_gph.shape)}"
            )
        act = lambda v: T.leaky_relu(v, self.slope)  # noqa: E731
        x = act(T.conv_transpose(f_gph, self.up3_weight, self.up3_bias, stride=2, output_size=(s2, s2)))
        x = act(T.conv_transpose(x, self.deconv3_weight, self.deconv3_bias, padding=1))
        x = x.unsqueeze(2)  # (B, c2, 1, s2, s2)
        x = act(T.conv_transpose(x, self.up2_weight, self.up2_bias, stride=(1, 2, 2), output_size=(1, s1, s1)))
        x = act(T.conv_transpose(x, self.deconv2_weight, self.deconv2_bias, padding=(0, 1, 1)))
        x = act(T.conv_transpose(x, self.up1_weight, self.up1_bias, stride=(1, 2, 2), output_size=(3, q, q)))
        x = T.conv_transpose(x, self.deconv1_weight, self.deconv1_bias, padding=(0, 1, 1))
        return x.squeeze(1)


def decode_gph(f_gph: torch.Tensor, decoder: PressureDecoder) -> torch.Tensor:
    return decoder(f_gph)


def gph_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """l1 loss over future GPH steps.

    Mean absolute error over the q x q pixels of each step, summed over the
    steps, averaged over the batch. A uniform offset of 1 therefore costs
    exactly ``T`` (number of steps).
    """
    if predicted.shape != target.shape:
        raise T.ShapeError(f"gph_loss: incompatible shapes {tuple(predicted.shape)} and {tuple(target.shape)}")
    per_step = (predicted - target).abs().mean(dim=(-1, -2))
    return per_step.sum(dim=-1).mean()
