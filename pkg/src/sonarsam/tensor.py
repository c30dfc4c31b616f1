"""Dense float32 tensors with tape-recorded reverse-mode gradients.

Operations run eagerly on numpy arrays. While a :class:`ComputationTape` is
active, every op that touches a tensor with ``requires_grad`` appends a record
holding its inputs, its output and a closure computing input gradients from
the output gradient. :func:`backward` replays the records in reverse.

Leaves with ``requires_grad=False`` (frozen parameters, data) never receive a
gradient, and ops whose inputs are all such leaves are not recorded at all.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError, UsageError

DTYPE = np.float32


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Compute in ``dtype`` inside the block; tensors created there use it.

    Meant for gradient checking, where float32 rounding in the forward pass
    swamps central differences.
    """
    global DTYPE
    saved, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = saved

_ACTIVE_TAPES: list["ComputationTape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar for the handful of elementwise ops used in model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputationTape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded if any of their inputs requires a gradient.
    """

    def __init__(self) -> None:
        self.records: list[Record] = []

    def __enter__(self) -> "ComputationTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of an op and record it on the active tape.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input. It is only stored when at least one input requires a gradient.
    """
    out = Tensor(data)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].records.append(Record(tuple(inputs), out, backward))
    return out


def backward(loss: Tensor, tape: ComputationTape) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) for every ``requires_grad`` leaf on ``tape``.

    Returns a map leaf -> gradient and also stores each gradient in
    ``leaf.grad`` (overwriting any previous value).
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring a gradient")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = tensors[key]
        g = np.ascontiguousarray(g, dtype=DTYPE).reshape(t.shape)
        t.grad = g
        result[t] = g
    return result


def finite_difference_grad(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time.

    ``f`` is evaluated without a tape. ``x.data`` is restored afterwards.
    The divisor is the distance between the float32-rounded probe points, not
    ``2h``, so representation error in ``x +- h`` does not bias the estimate.
    """
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + DTYPE(h)
        hi = float(flat[i])
        fp = float(f(x).data.sum())
        flat[i] = orig - DTYPE(h)
        lo = float(flat[i])
        fm = float(f(x).data.sum())
        flat[i] = orig
        out[i] = (fp - fm) / (hi - lo)
    return out.reshape(x.shape).astype(DTYPE)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record_op(ad * bd, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return record_op(x.data * c, (x,), lambda g: (g * c,))


def total(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(total(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    shape = x.shape
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[idx] = g
        return (out,)

    return record_op(np.ascontiguousarray(x.data[idx]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return record_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def add_into(x: Tensor, delta: Tensor, start: int) -> Tensor:
    """``x`` with ``delta`` added to features ``start : start + width`` of the last axis."""
    stop = start + delta.shape[-1]
    if stop > x.shape[-1] or x.shape[:-1] != delta.shape[:-1]:
        raise ShapeError(f"add_into: {delta.shape} does not fit {x.shape} at {start}")
    out = x.data.copy()
    out[..., start:stop] += delta.data
    return record_op(out, (x, delta), lambda g: (g, g[..., start:stop]))


def take_rows(table: Tensor, index) -> Tensor:
    """Gather along the leading axis; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return record_op(table.data[index], (table,), bw)


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    return record_op(
        np.repeat(x.data[None], n, axis=0), (x,), lambda g: (g.sum(axis=0),)
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` may batch a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record_op(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)
    return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op(x.data * mask, (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi).astype(DTYPE)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    xd = x.data
    inner = _GELU_C * (xd + DTYPE(0.044715) * (xd * xd * xd))
    t = np.tanh(inner)
    y = DTYPE(0.5) * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + DTYPE(3 * 0.044715) * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return record_op(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = xc * rstd
    gd = gamma.data
    y = xhat * gd + beta.data

    def bw(g):
        gx_hat = g * gd
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return record_op(y, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolutions and resampling


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or B x C x H x W, got {x.shape}")
    return x, False


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``weight`` is
    (C_out, C_in // groups, k, k).
    """
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    if C % groups or O % groups:
        raise ConfigurationError(
            f"conv2d: channels in={C}, out={O} not divisible by groups={groups}"
        )
    if Cg * groups != C:
        raise ShapeError(f"conv2d: weight {weight.shape} does not fit input {x.shape}")
    G, Og = groups, O // groups
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]
    # (B, G, Ho*Wo, Cg*kh*kw)
    cols = (
        win.reshape(B, G, Cg, Ho, Wo, kh, kw)
        .transpose(0, 1, 3, 4, 2, 5, 6)
        .reshape(B, G, Ho * Wo, Cg * kh * kw)
    )
    wmat = weight.data.reshape(G, Og, Cg * kh * kw)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # (B, G, P, Og)
    out = out.transpose(0, 1, 3, 2).reshape(B, O, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gG = g.reshape(B, G, Og, Ho * Wo)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("bgop,bgpk->gok", gG, cols, optimize=True).reshape(weight.shape)
        if not x.requires_grad:
            return None, gw, gb
        dcols = np.matmul(gG.transpose(0, 1, 3, 2), wmat)  # (B, G, P, K)
        dcols = dcols.reshape(B, G, Ho, Wo, Cg, kh, kw).transpose(0, 1, 4, 5, 6, 2, 3)
        dcols = dcols.reshape(B, C, kh, kw, Ho, Wo)
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += dcols[
                    :, :, i, j
                ]
        gx = dxp[:, :, p : p + H, p : p + W] if p else dxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    y = record_op(out, inputs, bw)
    return reshape(y, y.shape[1:]) if squeeze else y


def transpose_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1
) -> Tensor:
    """Transposed convolution (spatial upsampling), no padding.

    ``weight`` is (C_in, C_out, k, k); output extent is ``(in - 1) * stride + k``.
    """
    if stride < 1:
        raise ConfigurationError("transpose_conv2d: stride must be >= 1")
    x, squeeze = _batched(x)
    B, C, H, W = x.shape
    Ci, Co, k, k2 = weight.shape
    if Ci != C or k != k2:
        raise ShapeError(f"transpose_conv2d: weight {weight.shape} does not fit input {x.shape}")
    s = stride
    Ho, Wo = (H - 1) * s + k, (W - 1) * s + k
    wmat = weight.data.reshape(Ci, Co * k * k)
    xl = x.data.transpose(0, 2, 3, 1)  # (B, H, W, Ci)
    t = (xl @ wmat).reshape(B, H, W, Co, k, k)
    if s == k:
        out = t.transpose(0, 3, 1, 4, 2, 5).reshape(B, Co, Ho, Wo)
    else:
        out = np.zeros((B, Co, Ho, Wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                out[:, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s] += t[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=DTYPE)

    def bw(g):
        if s == k:
            gp = g.reshape(B, Co, H, k, W, k).transpose(0, 2, 4, 1, 3, 5)
        else:
            gp = np.empty((B, H, W, Co, k, k), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gp[..., i, j] = g[
                        :, :, i : i + s * (H - 1) + 1 : s, j : j + s * (W - 1) + 1 : s
                    ].transpose(0, 2, 3, 1)
        gp = gp.reshape(B * H * W, Co * k * k)
        gx = (gp @ wmat.T).reshape(B, H, W, Ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xl.reshape(-1, Ci).T @ gp).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    y = record_op(out, inputs, bw)
    return reshape(y, y.shape[1:]) if squeeze else y


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edge-clamped."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(DTYPE)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinearly resample the last two axes to ``size``."""
    H, W = x.shape[-2:]
    ry = bilinear_matrix(H, size[0])
    rx = bilinear_matrix(W, size[1])
    out = ry @ x.data @ rx.T
    return record_op(out, (x,), lambda g: (ry.T @ g @ rx,))
