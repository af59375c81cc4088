"""Full MSANet assembly: encoder, scale-specific subnetworks and decoder."""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .blocks import AFeB, AFuB, AMB, Conv, ConfigError, Module, ResidualBlock, SkipFusion
from .tensor import ShapeError, Tensor

BLOCK_KINDS = ("AFeB", "AMB", "ResB")

# variant -> (AFeB kept, AMB kept, AFuB kept, subnetworks present)
VARIANTS = {
    "full": (True, True, True, True),
    "ED": (False, False, False, False),
    "ResB": (False, False, False, True),
    "AFeB": (True, False, False, True),
    "AMB": (False, True, False, True),
    "AFuB": (False, False, True, True),
    "AFeB+AMB": (True, True, False, True),
    "AFeB+AFuB": (True, False, True, True),
    "AMB+AFuB": (False, True, True, True),
}


def default_subnet_specs(depths) -> list[list[str]]:
    """Block sequences per scale, finest first.

    The finest scale alternates AFeB and AMB, the coarsest uses AMB only,
    and middle scales start and end with AFeB, with an interior that
    alternates (closer to the finest scale) or is all AMB (closer to the
    coarsest).
    """
    depths = list(depths)
    n = len(depths)
    specs = []
    for i, d in enumerate(depths):
        if d < 0:
            raise ConfigError(f"negative subnetwork depth {d}")
        if i == 0:
            seq = ["AFeB" if j % 2 == 0 else "AMB" for j in range(d)]
        elif i == n - 1:
            seq = ["AMB"] * d
        else:
            if d == 0:
                seq = []
            elif d == 1:
                seq = ["AFeB"]
            else:
                if 2 * i < n - 1:
                    inner = ["AMB" if j % 2 == 0 else "AFeB" for j in range(d - 2)]
                else:
                    inner = ["AMB"] * (d - 2)
                seq = ["AFeB", *inner, "AFeB"]
        specs.append(seq)
    return specs


@dataclass
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 32
    scale_channels: list[int] | None = None
    subnet_depths: list[int] = field(default_factory=lambda: [6, 5, 4, 2])
    subnet_specs: list[list[str]] | None = None
    dilations: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    variant: str = "full"

    def __post_init__(self):
        if self.scale_channels is None:
            self.scale_channels = [self.base_channels * 2**i for i in range(len(self.subnet_depths))]
        if self.subnet_specs is None:
            self.subnet_specs = default_subnet_specs(self.subnet_depths)
        self.scale_channels = [int(c) for c in self.scale_channels]
        self.subnet_depths = [len(s) for s in self.subnet_specs]
        self.subnet_specs = [list(s) for s in self.subnet_specs]
        self.dilations = [int(d) for d in self.dilations]

    @property
    def num_scales(self) -> int:
        return len(self.scale_channels)

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.num_scales - 1)

    def validate(self) -> "ModelConfig":
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if not 2 <= self.num_scales <= 5:
            raise ConfigError(f"between 2 and 5 scales supported, got {self.num_scales}")
        if self.scale_channels[0] != self.base_channels:
            raise ConfigError("scale_channels[0] must equal base_channels")
        for a, b in zip(self.scale_channels, self.scale_channels[1:]):
            if b != 2 * a:
                raise ConfigError(f"scale_channels must double at each scale: {self.scale_channels}")
        if len(self.subnet_specs) != self.num_scales:
            raise ConfigError(f"{len(self.subnet_specs)} subnetwork specs for {self.num_scales} scales")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        for seq in self.subnet_specs:
            for kind in seq:
                if kind not in BLOCK_KINDS:
                    raise ConfigError(f"unknown block kind {kind!r}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError(f"invalid dilation set {self.dilations}")
        for c in self.scale_channels:
            if c % len(self.dilations):
                raise ConfigError(f"{c} channels not divisible by {len(self.dilations)} dilation branches")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        return cfg.validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def first_difference(self, other: "ModelConfig") -> str | None:
        """Name of the first field that differs from ``other``, or None."""
        for f in dataclasses.fields(self):
            if getattr(self, f.name) != getattr(other, f.name):
                return f.name
        return None


class ParamStore:
    """Ordered, uniquely named learnable tensors plus their init descriptions."""

    def __init__(self, named: Iterator[tuple[str, Tensor]], init_specs: dict[str, str] | None = None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in named:
            if name in self._tensors:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self._tensors[name] = t
        self.init_specs = dict(init_specs or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def num_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._tensors.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self._tensors if k not in state]
        if missing:
            raise ConfigError(f"state is missing parameters: {missing[:3]}")
        for k, t in self._tensors.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k}: stored shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


class MSANet(Module):
    """Encoder of residual blocks, per-scale subnetworks and a fusion decoder.

    The last fusion stage runs at full resolution and takes as its fine stream
    a 3x3 conv lift of the noisy input; a final 3x3 conv maps back to image
    channels (no output activation).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        cfg = self.config
        keep_afeb, keep_amb, keep_afub, has_subnets = VARIANTS[cfg.variant]
        chans = cfg.scale_channels
        base = chans[0]

        self.encoder = []
        c_prev = cfg.in_channels
        for i, c in enumerate(chans):
            blk = ResidualBlock(c_prev, c, rng, stride=1 if i == 0 else 2)
            self.encoder.append(self.add_child(f"encoder{i}", blk))
            c_prev = c

        self.subnets: list[list[Module]] = []
        for i, (c, seq) in enumerate(zip(chans, cfg.subnet_specs)):
            blocks = []
            if has_subnets:
                for j, kind in enumerate(seq):
                    if kind == "AFeB" and keep_afeb:
                        blk = AFeB(c, rng)
                    elif kind == "AMB" and keep_amb:
                        blk = AMB(c, rng, cfg.dilations)
                    else:
                        blk = ResidualBlock(c, c, rng)
                    blocks.append(self.add_child(f"subnet{i}.{j}", blk))
            self.subnets.append(blocks)

        self.lift = self.add_child("lift", Conv(cfg.in_channels, base, rng))
        self.decoder = []
        for k, i in enumerate(range(cfg.num_scales - 2, -1, -1)):
            self.decoder.append(self.add_child(f"decoder{k}", self._fusion(chans[i], rng, True, keep_afub, cfg)))
        last = self._fusion(base, rng, False, keep_afub, cfg)
        self.decoder.append(self.add_child(f"decoder{len(self.decoder)}", last))
        self.head = self.add_child("head", Conv(base, cfg.in_channels, rng))
        self.params = ParamStore(self.named_parameters(), dict(self.named_init_specs()))

    @staticmethod
    def _fusion(c, rng, upsample, keep_afub, cfg):
        if keep_afub:
            return AFuB(c, rng, upsample=upsample)
        return SkipFusion(c, rng, upsample=upsample, with_resblock=cfg.variant != "ED")

    def encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        f = x
        for blk in self.encoder:
            f = blk(f)
            feats.append(f)
        return feats

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        m = cfg.size_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ShapeError(f"H and W must be multiples of {m}, got {x.shape[2]}x{x.shape[3]}")
        feats = self.encode(x)
        for i, blocks in enumerate(self.subnets):
            for blk in blocks:
                feats[i] = blk(feats[i])
        f = feats[-1]
        for k, i in enumerate(range(cfg.num_scales - 2, -1, -1)):
            f = self.decoder[k](f, feats[i])
        f = self.decoder[-1](f, self.lift(x))
        return self.head(f)

    def count_params(self) -> int:
        return self.params.num_scalars()


def build(config: ModelConfig, seed: int = 0) -> MSANet:
    return MSANet(config, seed)


def count_params(model: MSANet) -> int:
    return model.count_params()


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form learnable scalar count assembled from per-block formulas."""
    cfg = config.validate()
    keep_afeb, keep_amb, keep_afub, has_subnets = VARIANTS[cfg.variant]
    chans = cfg.scale_channels
    total = 0
    c_prev = cfg.in_channels
    for i, c in enumerate(chans):
        total += ResidualBlock.count(c_prev, c, 1 if i == 0 else 2)
        c_prev = c
    if has_subnets:
        for c, seq in zip(chans, cfg.subnet_specs):
            for kind in seq:
                if kind == "AFeB" and keep_afeb:
                    total += AFeB.count(c)
                elif kind == "AMB" and keep_amb:
                    total += AMB.count(c, len(cfg.dilations))
                else:
                    total += ResidualBlock.count(c, c)
    total += Conv.count(cfg.in_channels, chans[0]) + Conv.count(chans[0], cfg.in_channels)
    stages = [(chans[i], True) for i in range(cfg.num_scales - 2, -1, -1)] + [(chans[0], False)]
    for c, up in stages:
        if keep_afub:
            total += AFuB.count(c, up)
        else:
            total += (2 * c * c * 16 + c if up else 0) + Conv.count(2 * c, c)
            if cfg.variant != "ED":
                total += ResidualBlock.count(c, c)
    return total
