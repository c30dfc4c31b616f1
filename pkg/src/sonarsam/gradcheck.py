"""Finite-difference suite covering every differentiable operation.

Each check builds seeded inputs in [-1, 1], reduces the operation's output
to a scalar through a fixed random projection and compares the tape
gradient with central differences for every input that requires a gradient.
Checks run in float64 so that the differences measure the gradient code
rather than float32 rounding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .metrics import (
    binary_cross_entropy_with_logits,
    binary_joint_loss,
    cross_entropy,
    dice_loss,
    semantic_joint_loss,
)
from .tensor import ComputationTape, Tensor, backward, finite_difference_grad, precision, relative_error

TOLERANCE = 1e-3
STEP = 1e-5


@dataclass(frozen=True)
class GradCheck:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def _u(rng, *shape, grad=True) -> Tensor:
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=grad)


def _projected(fn: Callable[[], Tensor]):
    """Scalar wrapper of ``fn``; scalar outputs are used directly."""
    proj = None

    def f(_=None):
        nonlocal proj
        y = fn()
        if y.size == 1:
            return T.reshape(y, ())
        if proj is None:
            proj = Tensor(np.random.default_rng(99).uniform(-1, 1, y.shape))
        return T.total(T.mul(y, proj))

    return f


def check(fn: Callable[[], Tensor], inputs, h: float = STEP) -> float:
    """Largest norm-wise relative error over ``inputs``."""
    f = _projected(fn)
    with ComputationTape() as tape:
        loss = f()
    grads = backward(loss, tape)
    return max(relative_error(grads[x], finite_difference_grad(f, x, h=h)) for x in inputs)


def _cases():
    """(name, builder) pairs; a builder returns (fn, inputs)."""
    cases = []

    def case(name):
        def register(builder):
            cases.append((name, builder))
            return builder

        return register

    @case("add/sub/mul with broadcasting")
    def _(rng):
        a, b = _u(rng, 3, 4), _u(rng, 4)
        return lambda: T.mul(T.sub(T.add(a, b), T.mul(b, b)), T.add(a, a)), (a, b)

    @case("scale/total/mean")
    def _(rng):
        a = _u(rng, 3, 5)
        return lambda: T.add(T.scale(T.total(a, axis=1), 2.5), T.mean(a, axis=1)), (a,)

    @case("reshape/transpose/slice/concat")
    def _(rng):
        a, b = _u(rng, 2, 3, 4), _u(rng, 2, 3, 2)
        fn = lambda: T.concat([T.slice_axis(T.transpose(a, (0, 2, 1)), 1, 1, 3), T.reshape(b, (2, 2, 3))], axis=1)
        return fn, (a, b)

    @case("add_into/take_rows/repeat_batch")
    def _(rng):
        a, d, tbl = _u(rng, 3, 6), _u(rng, 3, 2), _u(rng, 4, 6)
        fn = lambda: T.add(T.add_into(a, d, 2), T.mean(T.repeat_batch(T.take_rows(tbl, [1, 3, 1]), 2), axis=0))
        return fn, (a, d, tbl)

    @case("matmul (batched)")
    def _(rng):
        a, b = _u(rng, 2, 3, 4), _u(rng, 4, 5)
        return lambda: T.matmul(a, b), (a, b)

    @case("linear")
    def _(rng):
        x, w, bias = _u(rng, 2, 3, 4), _u(rng, 5, 4), _u(rng, 5)
        return lambda: T.linear(x, w, bias), (x, w, bias)

    @case("softmax")
    def _(rng):
        x = _u(rng, 3, 5)
        return lambda: T.softmax(T.scale(x, 3.0), axis=0), (x,)

    @case("sigmoid/relu/gelu")
    def _(rng):
        x = _u(rng, 4, 5)
        return lambda: T.add(T.add(T.sigmoid(x), T.relu(x)), T.gelu(x)), (x,)

    @case("layer_norm")
    def _(rng):
        x, g, b = _u(rng, 3, 8), _u(rng, 8), _u(rng, 8)
        return lambda: T.layer_norm(x, g, b), (x, g, b)

    @case("conv2d (stride 2, padding 1, groups 2)")
    def _(rng):
        x, w, b = _u(rng, 1, 4, 6, 6), _u(rng, 4, 2, 3, 3), _u(rng, 4)
        return lambda: T.conv2d(x, w, b, stride=2, padding=1, groups=2), (x, w, b)

    @case("transpose_conv2d")
    def _(rng):
        x, w, b = _u(rng, 1, 3, 4, 4), _u(rng, 3, 2, 2, 2), _u(rng, 2)
        return lambda: T.transpose_conv2d(x, w, b, stride=2), (x, w, b)

    @case("resize_bilinear")
    def _(rng):
        x = _u(rng, 2, 3, 4)
        return lambda: T.resize_bilinear(x, (7, 9)), (x,)

    @case("cross_entropy")
    def _(rng):
        z = _u(rng, 4, 3, 3)
        y = rng.integers(0, 4, (3, 3))
        return lambda: cross_entropy(T.softmax(z, axis=0), y), (z,)

    @case("binary cross-entropy")
    def _(rng):
        z = _u(rng, 2, 4, 4)
        y = rng.uniform(0, 1, (2, 4, 4)) > 0.5
        return lambda: binary_cross_entropy_with_logits(z, y), (z,)

    @case("dice_loss")
    def _(rng):
        z = _u(rng, 2, 5, 5)
        y = rng.uniform(0, 1, (2, 5, 5)) > 0.5
        return lambda: dice_loss(T.sigmoid(z), y), (z,)

    @case("joint loss, box prompt")
    def _(rng):
        z = _u(rng, 2, 6, 6)
        y = rng.uniform(0, 1, (2, 6, 6)) > 0.6
        return lambda: binary_joint_loss(z, y), (z,)

    @case("joint loss, semantic")
    def _(rng):
        z = _u(rng, 2, 4, 5, 5)
        y = rng.integers(0, 4, (2, 5, 5))
        return lambda: semantic_joint_loss(z, y), (z,)

    @case("end-to-end box-prompt loss")
    def _(rng):
        from .model import BackbonePreset, build_model, decode_mask, encode_boxes, encode_image

        model = build_model(BackbonePreset("check", 16, 1, 2, 8, 32), 2, seed=1)
        for _, p in model.named_parameters():
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
        img = Tensor(rng.uniform(0, 1, (3, 32, 32)))
        mask = np.zeros((32, 32), bool)
        mask[8:20, 6:18] = True
        dec = model.mask_decoder

        def fn():
            logits = decode_mask(model, encode_image(model, img), encode_boxes(model, [(6, 8, 18, 20)]))
            return binary_joint_loss(T.reshape(logits, (32, 32)), mask)

        inputs = (dec.mask_token, dec.blocks[0].token_to_image.q.weight, dec.hyper_out.weight, model.encoder.blocks[0].qkv.weight)
        return fn, inputs

    return cases


def run_suite(seed: int = 0) -> list[GradCheck]:
    """Run every check with a per-check seed derived from ``seed``."""
    out = []
    for i, (name, builder) in enumerate(_cases()):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        with precision(np.float64):
            fn, inputs = builder(rng)
            err = check(fn, inputs)
        out.append(GradCheck(name, err, time.perf_counter() - start))
    return out
