"""Residual block, AFeB, AMB and AFuB as parameterized differentiable units."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, add, channel_slice, concat_channels, mul, scale

TAPS = 9  # 3x3 deformable sampling grid


class ConfigError(ValueError):
    """Raised for invalid architectural hyperparameters."""


class Module:
    """Minimal parameter container with hierarchical names."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self.init_specs: dict[str, str] = {}

    def add_param(self, name: str, shape: Sequence[int], init: str, rng: np.random.Generator, fan_in: int = 1) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        elif init == "kaiming_uniform":
            # fan-in scaled uniform with leaky-relu gain for a = sqrt(5)
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        self.init_specs[name] = init if init == "zeros" else f"{init}(fan_in={fan_in})"
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_init_specs(self, prefix: str = "") -> Iterator[tuple[str, str]]:
        for name, spec in self.init_specs.items():
            yield prefix + name, spec
        for cname, child in self._children.items():
            yield from child.named_init_specs(f"{prefix}{cname}.")

    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv(Module):
    """A conv layer owning ``weight`` and ``bias``."""

    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, padding=None, dilation=1, init="kaiming_uniform"):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel // 2) if padding is None else padding
        self.weight = self.add_param("weight", (c_out, c_in, kernel, kernel), init, rng, fan_in=c_in * kernel * kernel)
        self.bias = self.add_param("bias", (c_out,), "zeros", rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    @staticmethod
    def count(c_in, c_out, kernel=3) -> int:
        return c_out * c_in * kernel * kernel + c_out


def _offsets_and_mask(om: Tensor) -> tuple[Tensor, Tensor]:
    """Split a 3K-channel conv output into raw offsets and a sigmoid mask."""
    offsets = channel_slice(om, 0, 2 * TAPS)
    mask = ops.sigmoid(channel_slice(om, 2 * TAPS, 3 * TAPS))
    return offsets, mask


class ResidualBlock(Module):
    """conv3x3(stride) -> leaky relu -> conv3x3, plus identity or 1x1 projection skip."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigError(f"residual block stride must be 1 or 2, got {stride}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.conv1 = self.add_child("conv1", Conv(c_in, c_out, rng, stride=stride))
        self.conv2 = self.add_child("conv2", Conv(c_out, c_out, rng))
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = self.add_child("skip", Conv(c_in, c_out, rng, kernel=1, stride=stride, padding=0))

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.c_in:
            raise ShapeError(f"residual block expects {self.c_in} channels, got {f.shape[1]}")
        main = self.conv2(ops.leaky_relu(self.conv1(f)))
        return add(main, f if self.skip is None else self.skip(f))

    @staticmethod
    def count(c_in, c_out, stride=1) -> int:
        n = Conv.count(c_in, c_out) + Conv.count(c_out, c_out)
        if stride != 1 or c_in != c_out:
            n += Conv.count(c_in, c_out, 1)
        return n


class AFeB(Module):
    """Adaptive feature block.

    A 3x3 conv predicts per-tap offsets and modulation logits from the input;
    a modulated deformable conv aggregates the adaptively sampled features,
    followed by leaky relu, a 3x3 conv and an identity skip.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.offset = self.add_child("offset", Conv(channels, 3 * TAPS, rng, init="zeros"))
        self.deform_weight = self.add_param(
            "deform.weight", (channels, channels, 3, 3), "kaiming_uniform", rng, fan_in=channels * 9
        )
        self.deform_bias = self.add_param("deform.bias", (channels,), "zeros", rng)
        self.conv = self.add_child("conv", Conv(channels, channels, rng))

    def sample(self, f: Tensor) -> Tensor:
        offsets, mask = _offsets_and_mask(self.offset(f))
        return ops.modulated_deform_conv(f, offsets, mask, self.deform_weight, self.deform_bias)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.channels:
            raise ShapeError(f"AFeB expects {self.channels} channels, got {f.shape[1]}")
        return add(f, self.conv(ops.leaky_relu(self.sample(f))))

    @staticmethod
    def count(c) -> int:
        return Conv.count(c, 3 * TAPS) + Conv.count(c, c) + Conv.count(c, c)


class AMB(Module):
    """Adaptive multi-scale block.

    Parallel dilated 3x3 convs, each emitting ``C / len(dilations)`` channels,
    are concatenated and then rescaled per channel and per position by factors
    of the form ``2 * sigmoid(.)`` before leaky relu, a 3x3 conv and the skip.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dilations: Sequence[int] = (1, 2, 3, 4)):
        super().__init__()
        if not dilations:
            raise ConfigError("AMB needs at least one dilation rate")
        if channels % len(dilations):
            raise ConfigError(f"{channels} channels cannot be split evenly over {len(dilations)} dilations")
        self.channels = channels
        self.dilations = tuple(int(d) for d in dilations)
        width = channels // len(self.dilations)
        self.branches = [
            self.add_child(f"branch{i}", Conv(channels, width, rng, dilation=d)) for i, d in enumerate(self.dilations)
        ]
        self.fc_weight = self.add_param("fc.weight", (channels, channels), "kaiming_uniform", rng, fan_in=channels)
        self.fc_bias = self.add_param("fc.bias", (channels,), "zeros", rng)
        self.spatial = self.add_child("spatial", Conv(1, 1, rng))
        self.conv = self.add_child("conv", Conv(channels, channels, rng))

    def forward(self, f: Tensor, return_factors: bool = False):
        if f.shape[1] != self.channels:
            raise ShapeError(f"AMB expects {self.channels} channels, got {f.shape[1]}")
        y = concat_channels([b(f) for b in self.branches])
        ch = scale(ops.sigmoid(ops.linear(ops.adaptive_avg_pool_global(y), self.fc_weight, self.fc_bias)), 2.0)
        y = mul(y, ch)
        sp = scale(ops.sigmoid(self.spatial(ops.channel_mean(y))), 2.0)
        y = mul(y, sp)
        out = add(f, self.conv(ops.leaky_relu(y)))
        if return_factors:
            return out, ch, sp
        return out

    @staticmethod
    def count(c, n_dilations=4) -> int:
        width = c // n_dilations
        return n_dilations * Conv.count(c, width) + (c * c + c) + Conv.count(1, 1) + Conv.count(c, c)


class AFuB(Module):
    """Adaptive fusion block.

    Upsamples coarse features with a 4x4 stride-2 transposed conv (when
    ``upsample``), predicts offsets and modulation from the concatenation of
    coarse and fine features, adds the deformably sampled fine features to the
    coarse ones and refines with conv -> leaky relu -> conv plus a skip.
    """

    def __init__(self, channels: int, rng: np.random.Generator, upsample: bool = True, fine_channels: int | None = None):
        super().__init__()
        self.channels = channels
        self.upsample = upsample
        self.fine_channels = channels if fine_channels is None else fine_channels
        if upsample:
            self.up_weight = self.add_param(
                "up.weight", (2 * channels, channels, 4, 4), "kaiming_uniform", rng, fan_in=2 * channels * 4
            )
            self.up_bias = self.add_param("up.bias", (channels,), "zeros", rng)
        self.offset = self.add_child("offset", Conv(channels + self.fine_channels, 3 * TAPS, rng, init="zeros"))
        self.deform_weight = self.add_param(
            "deform.weight", (channels, self.fine_channels, 3, 3), "kaiming_uniform", rng,
            fan_in=self.fine_channels * 9,
        )
        self.deform_bias = self.add_param("deform.bias", (channels,), "zeros", rng)
        self.refine1 = self.add_child("refine1", Conv(channels, channels, rng))
        self.refine2 = self.add_child("refine2", Conv(channels, channels, rng))

    def coarse(self, f_coarse_low: Tensor) -> Tensor:
        if not self.upsample:
            return f_coarse_low
        return ops.transpose_conv2d(f_coarse_low, self.up_weight, self.up_bias, stride=2, padding=1)

    def fuse(self, f_coarse_low: Tensor, f_fine: Tensor) -> Tensor:
        """Coarse context plus deformably sampled fine details (before refinement)."""
        n, c, h, w = f_fine.shape
        expect = (n, 2 * self.channels, h // 2, w // 2) if self.upsample else (n, self.channels, h, w)
        if c != self.fine_channels or f_coarse_low.shape != expect:
            raise ShapeError(f"AFuB scale mismatch: coarse {f_coarse_low.shape}, fine {f_fine.shape}")
        fc = self.coarse(f_coarse_low)
        offsets, mask = _offsets_and_mask(self.offset(concat_channels([fc, f_fine])))
        sampled = ops.modulated_deform_conv(f_fine, offsets, mask, self.deform_weight, self.deform_bias)
        return add(fc, sampled)

    def forward(self, f_coarse_low: Tensor, f_fine: Tensor) -> Tensor:
        fcf = self.fuse(f_coarse_low, f_fine)
        return add(fcf, self.refine2(ops.leaky_relu(self.refine1(fcf))))

    @staticmethod
    def count(c, upsample=True, fine_channels=None) -> int:
        cf = c if fine_channels is None else fine_channels
        n = Conv.count(c + cf, 3 * TAPS) + Conv.count(cf, c) + 2 * Conv.count(c, c)
        if upsample:
            n += 2 * c * c * 16 + c
        return n


class SkipFusion(Module):
    """Plain encoder-decoder fusion: transposed-conv upsample, concat with the
    skip feature, 3x3 merge conv, optionally followed by a residual block."""

    def __init__(self, channels: int, rng: np.random.Generator, upsample: bool = True,
                 fine_channels: int | None = None, with_resblock: bool = False):
        super().__init__()
        self.channels = channels
        self.upsample = upsample
        self.fine_channels = channels if fine_channels is None else fine_channels
        if upsample:
            self.up_weight = self.add_param(
                "up.weight", (2 * channels, channels, 4, 4), "kaiming_uniform", rng, fan_in=2 * channels * 4
            )
            self.up_bias = self.add_param("up.bias", (channels,), "zeros", rng)
        self.merge = self.add_child("merge", Conv(channels + self.fine_channels, channels, rng))
        self.res = self.add_child("res", ResidualBlock(channels, channels, rng)) if with_resblock else None

    def forward(self, f_coarse_low: Tensor, f_fine: Tensor) -> Tensor:
        fc = f_coarse_low
        if self.upsample:
            fc = ops.transpose_conv2d(f_coarse_low, self.up_weight, self.up_bias, stride=2, padding=1)
        if fc.shape[2:] != f_fine.shape[2:]:
            raise ShapeError(f"fusion scale mismatch: {fc.shape} vs {f_fine.shape}")
        out = self.merge(concat_channels([fc, f_fine]))
        return out if self.res is None else self.res(out)
