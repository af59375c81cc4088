"""Central finite-difference verification of analytic gradients.

Analytic gradients come from the float32 reverse pass. The numeric side
re-runs the same forward code on float64 copies of every input, so the
comparison measures the backward implementation rather than float32
cancellation in the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .blocks import AFeB, AFuB, AMB, Module, ResidualBlock, SkipFusion
from .tensor import (
    Tensor,
    add,
    backward,
    channel_slice,
    concat_channels,
    mul,
    no_grad,
    scale,
    sub,
    sum_all,
)

POINTWISE_TOL = 1e-3
DEFAULT_TOL = 1e-2


@dataclass
class GradCheckResult:
    target: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


Builder = Callable[[np.random.Generator, tuple], tuple[list[Tensor], Callable[[], Tensor]]]
_REGISTRY: dict[str, tuple[Builder, str, tuple]] = {}


def register(name: str, scope: str, shape=(1, 4, 8, 8)):
    def deco(fn: Builder) -> Builder:
        _REGISTRY[name] = (fn, scope, tuple(shape))
        return fn

    return deco


def registered(scope: str | None = None) -> list[str]:
    return [k for k, (_, s, _) in _REGISTRY.items() if scope is None or s == scope]


def _leaf(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, eps=1e-3) -> Tensor:
    x = rng.uniform(-2.0, 2.0, size=shape)
    x = np.sign(x) * (np.abs(x) + 10 * eps)
    return Tensor(x, requires_grad=True)


def jitter_params(module: Module, rng: np.random.Generator, offset_scale: float = 0.3) -> None:
    """Give zero-initialized parameters generic values.

    Zero offsets put every deformable tap exactly on the pixel grid, where
    bilinear interpolation has a kink; finite differences straddle it.
    """
    for name, t in module.named_parameters():
        if np.all(t.data == 0):
            s = offset_scale if "offset" in name else 0.1
            t.data = rng.normal(0.0, s, size=t.shape).astype(np.float32)


def _params(module: Module) -> list[Tensor]:
    return [t for _, t in module.named_parameters()]


# ---------------------------------------------------------------------------
# op targets
# ---------------------------------------------------------------------------


@register("add", "op")
def _g_add(rng, shape):
    a, b = _leaf(rng, shape), _leaf(rng, shape)
    return [a, b], lambda: add(a, b)


@register("sub", "op")
def _g_sub(rng, shape):
    a, b = _leaf(rng, shape), _leaf(rng, shape)
    return [a, b], lambda: sub(a, b)


@register("mul_channel", "op")
def _g_mul_channel(rng, shape):
    a, b = _leaf(rng, shape), _leaf(rng, (shape[0], shape[1], 1, 1))
    return [a, b], lambda: mul(a, b)


@register("mul_position", "op")
def _g_mul_position(rng, shape):
    a, b = _leaf(rng, shape), _leaf(rng, (shape[0], 1, *shape[2:]))
    return [a, b], lambda: mul(a, b)


@register("scale", "op")
def _g_scale(rng, shape):
    a = _leaf(rng, shape)
    return [a], lambda: scale(a, 2.0)


@register("concat", "op")
def _g_concat(rng, shape):
    a = _leaf(rng, (shape[0], 2, *shape[2:]))
    b = _leaf(rng, (shape[0], 3, *shape[2:]))
    return [a, b], lambda: concat_channels([a, b])


@register("channel_slice", "op")
def _g_slice(rng, shape):
    a = _leaf(rng, shape)
    return [a], lambda: channel_slice(a, 1, shape[1])


@register("sum", "op")
def _g_sum(rng, shape):
    a = _leaf(rng, shape)
    return [a], lambda: sum_all(a)


@register("leaky_relu", "op")
def _g_lrelu(rng, shape):
    a = _away_from_zero(rng, shape)
    return [a], lambda: ops.leaky_relu(a)


@register("sigmoid", "op")
def _g_sigmoid(rng, shape):
    a = _leaf(rng, shape)
    return [a], lambda: ops.sigmoid(a)


@register("avg_pool_global", "op")
def _g_pool(rng, shape):
    a = _leaf(rng, shape)
    return [a], lambda: ops.adaptive_avg_pool_global(a)


@register("channel_mean", "op")
def _g_cmean(rng, shape):
    a = _leaf(rng, shape)
    return [a], lambda: ops.channel_mean(a)


@register("linear", "op")
def _g_linear(rng, shape):
    n, c = shape[:2]
    x = _leaf(rng, (n, c, 1, 1))
    w, b = _leaf(rng, (c + 1, c)), _leaf(rng, (c + 1,))
    return [x, w, b], lambda: ops.linear(x, w, b)


@register("conv2d", "op", shape=(1, 2, 5, 5))
def _g_conv(rng, shape):
    x = _leaf(rng, shape)
    w, b = _leaf(rng, (3, shape[1], 3, 3), -0.5, 0.5), _leaf(rng, (3,))
    return [x, w, b], lambda: ops.conv2d(x, w, b, padding=1)


@register("conv2d_strided", "op")
def _g_conv_s(rng, shape):
    x = _leaf(rng, shape)
    w, b = _leaf(rng, (3, shape[1], 3, 3), -0.5, 0.5), _leaf(rng, (3,))
    return [x, w, b], lambda: ops.conv2d(x, w, b, stride=2, padding=1)


@register("conv2d_dilated", "op")
def _g_conv_d(rng, shape):
    x = _leaf(rng, shape)
    w, b = _leaf(rng, (2, shape[1], 3, 3), -0.5, 0.5), _leaf(rng, (2,))
    return [x, w, b], lambda: ops.conv2d(x, w, b, padding=2, dilation=2)


@register("transpose_conv2d", "op")
def _g_tconv(rng, shape):
    x = _leaf(rng, shape)
    w, b = _leaf(rng, (shape[1], 3, 4, 4), -0.5, 0.5), _leaf(rng, (3,))
    return [x, w, b], lambda: ops.transpose_conv2d(x, w, b, stride=2, padding=1)


@register("modulated_deform_conv", "op")
def _g_mdc(rng, shape):
    n, c, h, w = shape
    x = _leaf(rng, shape)
    # fractional offsets kept >= 0.05 away from integer lattice points
    frac = rng.uniform(0.05, 0.95, size=(n, 18, h, w))
    off = Tensor(rng.integers(-2, 2, size=frac.shape) + frac, requires_grad=True)
    m = _leaf(rng, (n, 9, h, w), 0.1, 1.0)
    wt, b = _leaf(rng, (3, c, 3, 3), -0.5, 0.5), _leaf(rng, (3,))
    return [x, off, m, wt, b], lambda: ops.modulated_deform_conv(x, off, m, wt, b)


@register("loss_l2", "op")
def _g_l2(rng, shape):
    from .train import loss_lp

    y, yh = _leaf(rng, shape), _leaf(rng, shape)
    return [y, yh], lambda: loss_lp(y, yh, 2)


@register("loss_l1", "op")
def _g_l1(rng, shape):
    from .train import loss_lp

    y = _leaf(rng, shape)
    yh = Tensor(y.data + _away_from_zero(rng, shape).data * 0.5, requires_grad=True)
    return [y, yh], lambda: loss_lp(y, yh, 1)


POINTWISE = {"add", "sub", "mul_channel", "mul_position", "scale", "leaky_relu", "sigmoid", "sum",
             "concat", "channel_slice", "loss_l2", "loss_l1"}


# ---------------------------------------------------------------------------
# block and model targets
# ---------------------------------------------------------------------------


def _block_target(make):
    def build(rng, shape):
        blk = make(shape[1], rng)
        jitter_params(blk, rng)
        x = _leaf(rng, shape, -1.0, 1.0)
        return [x, *_params(blk)], lambda: blk(x)

    return build


register("residual_block", "block")(_block_target(lambda c, rng: ResidualBlock(c, c, rng)))
register("residual_block_stride2", "block")(
    _block_target(lambda c, rng: _Strided(ResidualBlock(c, 2 * c, rng, stride=2)))
)
register("afeb", "block")(_block_target(lambda c, rng: AFeB(c, rng)))
register("amb", "block")(_block_target(lambda c, rng: AMB(c, rng, (1, 2))))


class _Strided(Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = self.add_child("inner", inner)

    def forward(self, x):
        return self.inner(x)


def _fusion_target(cls, upsample):
    def build(rng, shape):
        n, c, h, w = shape
        blk = cls(c, rng, upsample=upsample)
        jitter_params(blk, rng)
        fine = _leaf(rng, shape, -1.0, 1.0)
        coarse_shape = (n, 2 * c, h // 2, w // 2) if upsample else shape
        coarse = _leaf(rng, coarse_shape, -1.0, 1.0)
        return [coarse, fine, *_params(blk)], lambda: blk(coarse, fine)

    return build


register("afub", "block")(_fusion_target(AFuB, True))
register("afub_same_scale", "block")(_fusion_target(AFuB, False))
register("skip_fusion", "block")(_fusion_target(SkipFusion, True))


@register("model", "model", shape=(1, 3, 16, 16))
def _g_model(rng, shape):
    from .model import ModelConfig, build

    model = build(ModelConfig(in_channels=shape[1]), seed=int(rng.integers(1 << 31)))
    jitter_params(model, rng)
    x = _leaf(rng, shape, 0.0, 1.0)
    return [x, *_params(model)], lambda: model(x)


# ---------------------------------------------------------------------------
# checking
# ---------------------------------------------------------------------------


def check_gradients(
    leaves: list[Tensor],
    fn: Callable[[], Tensor],
    eps: float = 1e-3,
    rng: np.random.Generator | None = None,
    max_per_leaf: int | None = None,
    total_samples: int | None = None,
) -> tuple[float, int]:
    """Max relative error between reverse-mode and central-difference gradients.

    The scalar checked is ``sum(fn() * R)`` for a fixed random projection
    ``R``. ``total_samples`` draws that many scalar entries uniformly over
    all leaves; otherwise up to ``max_per_leaf`` entries per leaf are checked.
    Returns ``(max_rel_error, n_checked)``.
    """
    rng = rng or np.random.default_rng(0)
    for t in leaves:
        t.grad = None
    out = fn()
    proj = rng.uniform(-1.0, 1.0, size=out.shape)
    loss = sum_all(mul(out, Tensor(proj)))
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in leaves]

    sizes = np.array([t.size for t in leaves])
    if total_samples is not None:
        # oversample; entries straddling a kink are skipped until enough are checked
        flat = rng.choice(sizes.sum(), size=min(10 * total_samples, sizes.sum()), replace=False)
        bounds = np.cumsum(sizes)
        picks = [(int(np.searchsorted(bounds, f, side="right")), 0) for f in flat]
        picks = [(li, int(f - (bounds[li] - sizes[li]))) for (li, _), f in zip(picks, flat)]
    else:
        picks = []
        for li, s in enumerate(sizes):
            idx = np.arange(s) if max_per_leaf is None or s <= max_per_leaf else rng.choice(s, max_per_leaf, replace=False)
            picks += [(li, int(i)) for i in idx]

    saved = [t.data for t in leaves]
    for t in leaves:
        t.data = t.data.astype(np.float64)
    worst, checked = 0.0, 0
    try:
        with no_grad():
            _, base = _probed(fn, proj)
            for li, i in picks:
                flat = leaves[li].data.reshape(-1)
                orig = flat[i]
                flat[i] = orig + eps
                fp, rp = _probed(fn, proj)
                flat[i] = orig - eps
                fm, rm = _probed(fn, proj)
                flat[i] = orig
                if not (_same_regions(base, rp) and _same_regions(base, rm)):
                    continue
                num = (fp - fm) / (2 * eps)
                ana = float(analytic[li].reshape(-1)[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                worst = max(worst, rel)
                checked += 1
                if total_samples is not None and checked == total_samples:
                    break
    finally:
        for t, d in zip(leaves, saved):
            t.data = d
            t.grad = None
    return worst, checked


def _probed(fn, proj) -> tuple[float, list]:
    ops._kink_probe = []
    try:
        value = float((fn().data * proj).sum())
        return value, ops._kink_probe
    finally:
        ops._kink_probe = None


def _same_regions(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(op: str, shape=None, seed: int = 0, eps: float = 1e-3, **kw) -> float:
    """Max relative gradient error for a registered target."""
    return grad_check_result(op, shape, seed, eps, **kw).max_rel_error


def grad_check_result(op: str, shape=None, seed: int = 0, eps: float = 1e-3, **kw) -> GradCheckResult:
    if op not in _REGISTRY:
        raise ValueError(f"unknown gradient-check target {op!r}; known: {', '.join(_REGISTRY)}")
    builder, scope, default_shape = _REGISTRY[op]
    rng = np.random.default_rng(seed)
    leaves, fn = builder(rng, tuple(shape or default_shape))
    if scope == "model":
        kw.setdefault("total_samples", 20)
    elif scope == "block":
        kw.setdefault("max_per_leaf", 128)
    err, n = check_gradients(leaves, fn, eps, rng, **kw)
    tol = POINTWISE_TOL if op in POINTWISE else DEFAULT_TOL
    return GradCheckResult(op, err, n, tol)


def run_suite(scope: str, seed: int = 0) -> list[GradCheckResult]:
    if scope not in ("op", "block", "model"):
        raise ValueError(f"unknown scope {scope!r}")
    return [grad_check_result(name, seed=seed) for name in registered(scope)]
