"""Finite-difference gradient suite over every primitive, loss and a miniature model.

Used by the ``gradcheck`` command and the test-suite. Inputs are drawn away from
the kinks of non-smooth primitives (|x| near 0 for abs/relu, the branch cut of
atan2, odd multiples of pi for phase wrapping).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import GradCheckReport, grad_check

H = 1e-4
TOL = 1e-3
MODEL_TOL = 3e-3


def _away_from_zero(rng, shape, lo=0.2):
    x = rng.uniform(lo, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# Each case: name -> (shapes, builder). A builder takes (rng, shape) and returns
# (fn, inputs) with fn(*inputs) a scalar tensor.
Builder = Callable[[np.random.Generator, tuple], tuple[Callable[..., Tensor], list[Tensor]]]


def _unary(op, sampler=None) -> Builder:
    def build(rng, shape):
        x = _t(sampler(rng, shape) if sampler else rng.standard_normal(shape))
        w = rng.standard_normal(shape)
        return (lambda a: ad.tsum(ad.mul(op(a), w))), [x]

    return build


def _binary(op, broadcast=False) -> Builder:
    def build(rng, shape):
        a = _t(rng.standard_normal(shape))
        bshape = shape[-1:] if broadcast else shape
        b = _t(rng.standard_normal(bshape))
        w = rng.standard_normal(shape)
        return (lambda x, y: ad.tsum(ad.mul(op(x, y), w))), [a, b]

    return build


def _build_mul(rng, shape):
    return _binary(ad.mul, broadcast=len(shape) > 1)(rng, shape)


def _build_magnitude(rng, shape):
    re, im = _t(_away_from_zero(rng, shape)), _t(_away_from_zero(rng, shape))
    w = rng.standard_normal(shape)
    return (lambda a, b: ad.tsum(ad.mul(ad.magnitude(a, b), w))), [re, im]


def _build_atan2(rng, shape):
    y = _t(rng.standard_normal(shape))
    x = _t(rng.uniform(0.3, 1.5, size=shape))  # right half-plane: no branch cut
    w = rng.standard_normal(shape)
    return (lambda a, b: ad.tsum(ad.mul(ad.atan2(a, b), w))), [y, x]


def _wrap_sampler(rng, shape):
    k = rng.integers(-2, 3, size=shape)
    return rng.uniform(-2.8, 2.8, size=shape) + 2 * np.pi * k


def _build_softmax(fn):
    def build(rng, shape):
        x = _t(rng.standard_normal(shape))
        w = rng.standard_normal(shape)
        return (lambda a: ad.tsum(ad.mul(fn(a, axis=-1), w))), [x]

    return build


def _build_l2n(rng, shape):
    x = _t(rng.standard_normal(shape) + 0.5)
    w = rng.standard_normal(shape)
    return (lambda a: ad.tsum(ad.mul(ad.l2_normalize(a, axis=-1), w))), [x]


def _build_sum_axis(rng, shape):
    x = _t(rng.standard_normal(shape))
    axis = len(shape) - 1
    w = rng.standard_normal(shape[:axis] + shape[axis + 1 :])
    return (lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=axis), w))), [x]


def _build_mean(rng, shape):
    x = _t(rng.standard_normal(shape))
    w = rng.standard_normal(shape[1:])
    return (lambda a: ad.tsum(ad.mul(ad.mean(a, axis=0), w))), [x]


def _build_reshape(rng, shape):
    x = _t(rng.standard_normal(shape))
    w = rng.standard_normal(int(np.prod(shape)))
    return (lambda a: ad.tsum(ad.mul(ad.reshape(a, (-1,)), w))), [x]


def _build_permute(rng, shape):
    x = _t(rng.standard_normal(shape))
    axes = tuple(reversed(range(len(shape))))
    w = rng.standard_normal(tuple(shape[i] for i in axes))
    return (lambda a: ad.tsum(ad.mul(ad.permute(a, axes), w))), [x]


def _build_getitem(rng, shape):
    x = _t(rng.standard_normal(shape))
    idx = (slice(1, None),) + (slice(None, None, 2),) * (len(shape) - 1)
    w = rng.standard_normal(x.data[idx].shape)
    return (lambda a: ad.tsum(ad.mul(a[idx], w))), [x]


def _build_concat(rng, shape):
    a, b = _t(rng.standard_normal(shape)), _t(rng.standard_normal(shape))
    w = rng.standard_normal((2 * shape[0],) + shape[1:])
    return (lambda x, y: ad.tsum(ad.mul(ad.concat([x, y], axis=0), w))), [a, b]


def _build_matmul(rng, shape):
    *batch, n, k = shape
    a = _t(rng.standard_normal(shape))
    b = _t(rng.standard_normal(tuple(batch) + (k, 3)))
    w = rng.standard_normal(tuple(batch) + (n, 3))
    return (lambda x, y: ad.tsum(ad.mul(ad.matmul(x, y), w))), [a, b]


def _build_conv(rng, spec):
    B, C, Hh, Ww, Co, k, stride, pad = spec
    x = _t(rng.standard_normal((B, C, Hh, Ww)))
    wt = _t(rng.standard_normal((Co, C, k, k)) * 0.5)
    b = _t(rng.standard_normal(Co))
    out = ad.conv2d(x, wt, b, stride, pad)
    w = rng.standard_normal(out.shape)
    return (lambda a, ww, bb: ad.tsum(ad.mul(ad.conv2d(a, ww, bb, stride, pad), w))), [x, wt, b]


def _build_convt(rng, spec):
    B, C, Hh, Ww, Co, k, stride, pad = spec
    x = _t(rng.standard_normal((B, C, Hh, Ww)))
    wt = _t(rng.standard_normal((C, Co, k, k)) * 0.5)
    b = _t(rng.standard_normal(Co))
    out = ad.conv2d_transpose(x, wt, b, stride, pad)
    w = rng.standard_normal(out.shape)
    return (lambda a, ww, bb: ad.tsum(ad.mul(ad.conv2d_transpose(a, ww, bb, stride, pad), w))), [x, wt, b]


def _build_upconv(rng, shape):
    B, C, Hh, Ww, Co = shape
    x = _t(rng.standard_normal((B, C, Hh, Ww)))
    wt = _t(rng.standard_normal((Co, C, 3, 3)) * 0.5)
    b = _t(rng.standard_normal(Co))
    w = rng.standard_normal((B, Co, 2 * Hh, 2 * Ww))
    return (lambda a, ww, bb: ad.tsum(ad.mul(ad.upsample_conv3x3(a, ww, bb), w))), [x, wt, b]


def _build_bn(rng, shape):
    x = _t(rng.standard_normal(shape) * 2 + 1)
    g = _t(rng.uniform(0.5, 1.5, shape[1]))
    b = _t(rng.standard_normal(shape[1]))
    w = rng.standard_normal(shape)

    def fn(a, gg, bb):
        rm, rv = np.zeros(shape[1]), np.ones(shape[1])
        return ad.tsum(ad.mul(ad.batchnorm2d(a, rm, rv, True, gg, bb), w))

    return fn, [x, g, b]


def _build_avgpool(rng, shape):
    x = _t(rng.standard_normal(shape))
    w = rng.standard_normal(shape[:2] + (shape[2] // 2, shape[3] // 2))
    return (lambda a: ad.tsum(ad.mul(ad.avgpool2d(a, 2), w))), [x]


def _build_upsample(rng, shape):
    x = _t(rng.standard_normal(shape))
    w = rng.standard_normal(shape[:2] + (shape[2] * 2, shape[3] * 2))
    return (lambda a: ad.tsum(ad.mul(ad.upsample_nearest2(a), w))), [x]


# -- losses ---------------------------------------------------------------


def _build_loss_mse(rng, shape):
    from .losses import loss_mse

    g = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    pr, pi = _t(rng.standard_normal(shape)), _t(rng.standard_normal(shape))
    return (lambda a, b: loss_mse(g, (a, b))), [pr, pi]


def _build_loss_apm(rng, shape):
    from .losses import loss_apm

    g = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    # keep |pred| well separated from |gt| so the absolute value is smooth
    mag = np.abs(g) + rng.choice([-1, 1], size=shape) * rng.uniform(0.3, 0.6, size=shape)
    mag = np.where(mag > 0.05, mag, np.abs(g) + 0.3)
    ang = rng.uniform(-np.pi, np.pi, size=shape)
    pr, pi = _t(mag * np.cos(ang)), _t(mag * np.sin(ang))
    return (lambda a, b: loss_apm(g, (a, b))), [pr, pi]


def _build_loss_phs(rng, shape):
    from .losses import loss_phs

    gl = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    gr = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    # predictions within +-2.5 rad of the target phase: away from the wrap point
    def near(g):
        ang = np.angle(g) + rng.uniform(-2.5, 2.5, size=shape)
        mag = rng.uniform(0.5, 1.5, size=shape)
        return _t(mag * np.cos(ang)), _t(mag * np.sin(ang))

    (lr, li), (rr, ri) = near(gl), near(gr)
    return (lambda a, b, c, d: loss_phs((gl, gr), ((a, b), (c, d)))), [lr, li, rr, ri]


def _build_loss_scl(rng, shape):
    from .losses import ContrastiveBatch, LossConfig, loss_scl

    cfg = LossConfig()
    anchors, pos, neg = (_t(rng.standard_normal(shape)) for _ in range(3))

    def fn(a, p, n):
        cb = ContrastiveBatch(
            ad.l2_normalize(a, axis=-1), ad.l2_normalize(p, axis=-1), ad.l2_normalize(n, axis=-1)
        )
        return loss_scl(cb, cfg)

    return fn, [anchors, pos, neg]


SHAPES_ND = [(3,), (2, 4), (3, 2, 2), (1, 5), (2, 3, 4)]
SHAPES_2D = [(2, 3), (4, 2), (1, 6), (3, 5), (5, 4)]
SHAPES_4D = [(2, 3, 4, 4), (1, 2, 6, 4), (3, 1, 4, 6), (2, 2, 2, 8), (4, 3, 2, 2)]
SHAPES_BN = [(4, 3, 3, 3), (3, 2, 4, 2), (2, 4, 3, 5), (5, 1, 2, 3), (2, 2, 4, 4)]
CONV_SPECS = [
    (2, 3, 6, 6, 4, 3, 1, 1),
    (1, 2, 8, 6, 3, 4, 2, 1),
    (2, 2, 4, 4, 2, 2, 2, 0),
    (1, 3, 5, 7, 2, 3, 2, 0),
    (2, 1, 6, 4, 3, 1, 1, 0),
]
CONVT_SPECS = [
    (2, 3, 3, 3, 2, 4, 2, 1),
    (1, 2, 4, 2, 3, 3, 1, 1),
    (2, 2, 2, 3, 2, 2, 2, 0),
    (1, 1, 3, 3, 2, 3, 2, 0),
    (2, 2, 2, 2, 1, 1, 1, 0),
]
SHAPES_LOSS = [(4, 3), (2, 4, 3), (1, 5, 2), (3, 2, 2), (2, 3, 3)]
SHAPES_SCL = [(2, 3), (3, 4), (4, 2), (2, 6), (5, 3)]

CASES: dict[str, tuple[list, Builder]] = {
    "add": (SHAPES_ND, _binary(ad.add)),
    "sub": (SHAPES_ND, _binary(ad.sub)),
    "mul": (SHAPES_ND, _build_mul),
    "scale": (SHAPES_ND, _unary(lambda a: ad.scale(a, -1.7))),
    "square": (SHAPES_ND, _unary(ad.square)),
    "abs": (SHAPES_ND, _unary(ad.tabs, _away_from_zero)),
    "exp": (SHAPES_ND, _unary(ad.exp)),
    "log": (SHAPES_ND, _unary(ad.log, lambda r, s: r.uniform(0.3, 2.0, s))),
    "magnitude": (SHAPES_ND, _build_magnitude),
    "atan2": (SHAPES_ND, _build_atan2),
    "wrap_phase": (SHAPES_ND, _unary(ad.wrap_phase, _wrap_sampler)),
    "relu": (SHAPES_ND, _unary(ad.relu, _away_from_zero)),
    "leaky_relu": (SHAPES_ND, _unary(lambda a: ad.leaky_relu(a, 0.2), _away_from_zero)),
    "sigmoid": (SHAPES_ND, _unary(ad.sigmoid)),
    "tanh": (SHAPES_ND, _unary(ad.tanh)),
    "softmax": (SHAPES_2D, _build_softmax(ad.softmax)),
    "log_softmax": (SHAPES_2D, _build_softmax(ad.log_softmax)),
    "l2_normalize": (SHAPES_2D, _build_l2n),
    "sum": (SHAPES_2D, _build_sum_axis),
    "mean": (SHAPES_2D, _build_mean),
    "reshape": (SHAPES_ND, _build_reshape),
    "permute": (SHAPES_ND, _build_permute),
    "getitem": (SHAPES_2D, _build_getitem),
    "concat": (SHAPES_ND, _build_concat),
    "matmul": ([(2, 3), (4, 2), (2, 3, 4), (1, 2, 5), (3, 1, 2)], _build_matmul),
    "conv2d": (CONV_SPECS, _build_conv),
    "conv2d_transpose": (CONVT_SPECS, _build_convt),
    "upsample_conv3x3": ([(2, 3, 2, 3, 2), (1, 2, 3, 3, 3), (2, 1, 2, 2, 4), (1, 4, 1, 2, 2), (3, 2, 2, 1, 1)], _build_upconv),
    "batchnorm2d": (SHAPES_BN, _build_bn),
    "avgpool2d": (SHAPES_4D, _build_avgpool),
    "upsample_nearest2": (SHAPES_4D, _build_upsample),
    "loss_mse": (SHAPES_LOSS, _build_loss_mse),
    "loss_apm": (SHAPES_LOSS, _build_loss_apm),
    "loss_phs": (SHAPES_LOSS, _build_loss_phs),
    "loss_scl": (SHAPES_SCL, _build_loss_scl),
}


@dataclass
class CheckResult:
    name: str
    shape: tuple
    worst: float
    passed: bool


def check_case(name: str, shape, seed: int = 0, tol: float = TOL) -> CheckResult:
    _, build = CASES[name]
    rng = np.random.default_rng([seed, zlib.crc32(name.encode()), *np.ravel(shape)])
    fn, inputs = build(rng, tuple(shape))
    rep = grad_check(fn, inputs, h=H, tol=tol)
    return CheckResult(name, tuple(shape), rep.worst, rep.passed)


def run_primitive_suite(seed: int = 0) -> list[CheckResult]:
    return [check_case(name, shape, seed) for name, (shapes, _) in CASES.items() for shape in shapes]


# -- miniature model ------------------------------------------------------


def miniature_config():
    from .model import ModelConfig

    return ModelConfig(
        image_channels=[4, 8],
        image_strides=[2, 2],
        audio_unet_channels=[4, 8],
        attention_heads=2,
        attention_dim=8,
        avad_hidden_dim=4,
        input_freq_bins=16,
        input_frames=8,
        image_height=16,
        image_width=32,
    )


def miniature_model_check(seed: int = 0, max_entries: int = 4, tol: float = MODEL_TOL) -> GradCheckReport:
    """Full forward (both losses, AVAD on, non-zero alpha/beta heads) in float64."""
    from .losses import LossConfig, embed_sets, loss_rec, loss_scl
    from .model import BinauralUNet, apply_mask, spec_to_input

    rng = np.random.default_rng(seed)
    cfg = miniature_config()
    model = BinauralUNet(cfg, rng, dtype=np.float64)
    for stage in model.decoder:
        # move off the zero initialisation so the alpha/beta paths carry gradient
        for lin in (stage.avad.alpha, stage.avad.beta):
            lin.weight.data[...] = 0.1 * rng.standard_normal(lin.weight.shape)
            lin.bias.data[...] = 0.1 * rng.standard_normal(lin.bias.shape)
    model.head.weight.data[...] = 0.3 * rng.standard_normal(model.head.weight.shape)
    B = 3
    mono = rng.standard_normal((B, 17, 8)) + 1j * rng.standard_normal((B, 17, 8))
    gt_l = rng.standard_normal((B, 16, 8)) + 1j * rng.standard_normal((B, 16, 8))
    gt_r = rng.standard_normal((B, 16, 8)) + 1j * rng.standard_normal((B, 16, 8))
    gt_d = gt_l - gt_r
    img = rng.standard_normal((3 * B, 3, 16, 32))
    lc = LossConfig(shuffle_grid=(4, 8))
    x = spec_to_input(mono, 16, np.float64)

    def fn(*_):
        ua, skips = model.encode_audio(x)
        vis = model.encode_image(img)
        uv = vis[:B]
        fused = model.cross_attention(ua, uv)
        mask = model.decode(fused, skips, uv)
        pr, pi = apply_mask(mask, x)
        pl = (ad.scale(ad.add(pr, x[:, 0]), 0.5), ad.scale(ad.add(pi, x[:, 1]), 0.5))
        prr = (ad.scale(ad.sub(x[:, 0], pr), 0.5), ad.scale(ad.sub(x[:, 1], pi), 0.5))
        rec, _ = loss_rec(gt_d, (pr, pi), (gt_l, gt_r), (pl, prr), lc)
        cb = embed_sets(model, ua, fused, vis[B : 2 * B], vis[2 * B :])
        return ad.add(rec, ad.scale(loss_scl(cb, lc), lc.lam))

    return grad_check(fn, model.parameters(), h=H, tol=tol, max_entries=max_entries, rng=rng, kink_aware=True)
