"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and registers its
backward rule on the active tape. Leading batch axes are allowed throughout;
weights are always 2-D ``(fan_in, fan_out)`` so an affine map reads
``y = x @ W + b``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import EmptySequence, InvalidLabel, InvalidShape
from . import kernels
from .tensor import Tensor, as_tensor, emit, note_branch

CE_FLOOR = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values + b.values
    return emit("add", (a, b), [out],
                lambda g: (_unbroadcast(g[0], a.shape), _unbroadcast(g[0], b.shape)))[0]


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values - b.values
    return emit("sub", (a, b), [out],
                lambda g: (_unbroadcast(g[0], a.shape), -_unbroadcast(g[0], b.shape)))[0]


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values * b.values
    return emit("mul", (a, b), [out],
                lambda g: (_unbroadcast(g[0] * b.values, a.shape),
                           _unbroadcast(g[0] * a.values, b.shape)))[0]


def scale(a: Tensor, c: float) -> Tensor:
    return emit("scale", (a,), [a.values * c], lambda g: (g[0] * c,))[0]


def relu(a: Tensor) -> Tensor:
    pos = a.values > 0
    note_branch(pos)
    return emit("relu", (a,), [np.where(pos, a.values, 0.0)], lambda g: (g[0] * pos,))[0]


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return emit("tanh", (a,), [y], lambda g: (g[0] * (1.0 - y * y),))[0]


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return emit("sigmoid", (a,), [y], lambda g: (g[0] * y * (1.0 - y),))[0]


# -- linear algebra ----------------------------------------------------------

def _check_matmul(x: Tensor, w: Tensor):
    if w.values.ndim != 2 or x.values.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise InvalidShape(f"cannot multiply {x.shape} by {w.shape}")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` with ``w`` 2-D and ``x`` of any rank >= 1."""
    x, w = as_tensor(x), as_tensor(w)
    _check_matmul(x, w)
    out = x.values @ w.values

    def backward(g):
        g = g[0]
        gx = g @ w.values.T
        gw = x.values.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return emit("matmul", (x, w), [out], backward)[0]


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``y = x @ w + b`` (the column form ``Wᵀx + b`` applied row-wise)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_matmul(x, w)
    if b.shape != (w.shape[1],):
        raise InvalidShape(f"bias shape {b.shape} does not match weight {w.shape}")
    out = x.values @ w.values + b.values

    def backward(g):
        g = g[0]
        g2 = g.reshape(-1, w.shape[1])
        return (g @ w.values.T,
                x.values.reshape(-1, w.shape[0]).T @ g2,
                g2.sum(axis=0))

    return emit("affine", (x, w, b), [out], backward)[0]


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise InvalidShape("transpose expects a matrix")
    return emit("transpose", (a,), [a.values.T.copy()], lambda g: (g[0].T,))[0]


# -- structural ----------------------------------------------------------------

def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidShape("concat of nothing")
    vals = [t.values for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise InvalidShape(str(exc)) from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g[0], sizes, axis=axis))

    return emit("concat", tuple(tensors), [out], backward)[0]


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.values for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g[0], axis, 0))

    return emit("stack", tuple(tensors), [out], backward)[0]


def reshape(a: Tensor, shape) -> Tensor:
    return emit("reshape", (a,), [a.values.reshape(shape)], lambda g: (g[0].reshape(a.shape),))[0]


def getitem(a: Tensor, key) -> Tensor:
    out = np.array(a.values[key])
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in parts)

    def backward(g):
        ga = np.zeros_like(a.values)
        if basic:
            ga[key] += g[0]
        else:
            np.add.at(ga, key, g[0])
        return (ga,)

    return emit("getitem", (a,), [out], backward)[0]


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]`` for an integer index array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    out = table.values[index]

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, index.reshape(-1), g[0].reshape(-1, table.shape[1]))
        return (gt,)

    return emit("embedding", (table,), [out], backward)[0]


def time_maxpool(x: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Max over axis -2 of ``x`` (..., T, C), restricted to ``valid`` steps.

    Rows with no valid step pool to zero.
    """
    v = x.values
    if v.ndim < 2:
        raise InvalidShape("time_maxpool expects (..., T, C)")
    if valid is None:
        valid = np.ones(v.shape[:-1], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if v.shape[-2] == 0:
        out = np.zeros(v.shape[:-2] + v.shape[-1:])
        return emit("time_maxpool", (x,), [out], lambda g: (np.zeros_like(v),))[0]
    masked = np.where(valid[..., None], v, -np.inf)
    arg = masked.argmax(axis=-2)
    note_branch(arg)
    any_valid = valid.any(axis=-1)
    out = np.take_along_axis(v, arg[..., None, :], axis=-2)[..., 0, :]
    out = np.where(any_valid[..., None], out, 0.0)

    def backward(g):
        gx = np.zeros_like(v)
        gsel = np.where(any_valid[..., None], g[0], 0.0)
        np.put_along_axis(gx, arg[..., None, :], gsel[..., None, :], axis=-2)
        return (gx,)

    return emit("time_maxpool", (x,), [out], backward)[0]


def conv1d_wide(x: Tensor, w: Tensor, b: Tensor, width: int) -> Tensor:
    """Wide temporal convolution over ``x`` (B, T, E).

    The sequence is padded with ``width - 1`` zero vectors on both ends, so
    output has ``T + width - 1`` steps and ``w`` has shape (width*E, C).
    """
    xv = x.values
    if xv.ndim != 3:
        raise InvalidShape("conv1d_wide expects (B, T, E)")
    B, T, E = xv.shape
    if w.shape[0] != width * E:
        raise InvalidShape(f"kernel {w.shape} does not match width {width} x {E}")
    pad = np.zeros((B, T + 2 * (width - 1), E))
    pad[:, width - 1: width - 1 + T] = xv
    win = sliding_window_view(pad, width, axis=1)  # (B, T', E, width)
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, -1, width * E)
    out = cols @ w.values + b.values

    def backward(g):
        g = g[0]
        Tp = g.shape[1]
        gcols = (g @ w.values.T).reshape(B, Tp, width, E)
        gpad = np.zeros_like(pad)
        for j in range(width):
            gpad[:, j: j + Tp] += gcols[:, :, j]
        gw = cols.reshape(-1, width * E).T @ g.reshape(-1, w.shape[1])
        return gpad[:, width - 1: width - 1 + T], gw, g.reshape(-1, w.shape[1]).sum(axis=0)

    return emit("conv1d_wide", (x, w, b), [out], backward)[0]


# -- probabilistic heads --------------------------------------------------------

def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    logits = as_tensor(logits)
    z = logits.values
    if z.size == 0 or z.shape[axis] == 0:
        raise InvalidShape("softmax of an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        g = g[0]
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return emit("softmax", (logits,), [p], backward)[0]


def cross_entropy(probs: Tensor, target, weights=None) -> Tensor:
    """Weighted sum of ``-log(p[target] + 1e-12)`` over the leading axes.

    ``probs`` is (..., N) and ``target`` an integer array of the leading
    shape. With a rank-1 ``probs`` and scalar ``target`` this is the plain
    single-example loss.
    """
    probs = as_tensor(probs)
    p = probs.values
    if p.ndim == 0 or p.shape[-1] == 0:
        raise InvalidShape("cross_entropy needs at least one class")
    target = np.asarray(target, dtype=np.int64)
    if target.shape != p.shape[:-1]:
        raise InvalidShape(f"target shape {target.shape} vs probs {p.shape}")
    n = p.shape[-1]
    if target.size and (target.min() < 0 or target.max() >= n):
        raise InvalidLabel(f"target out of range [0, {n})")
    w = np.ones(target.shape) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=np.float64), target.shape)
    picked = np.take_along_axis(p, target[..., None], axis=-1)[..., 0]
    loss = np.array(-(w * np.log(picked + CE_FLOOR)).sum())

    def backward(g):
        gp = np.zeros_like(p)
        np.put_along_axis(gp, target[..., None], (-g[0] * w / (picked + CE_FLOOR))[..., None], axis=-1)
        return (gp,)

    return emit("cross_entropy", (probs,), [loss], backward)[0]


def sum_all(a: Tensor) -> Tensor:
    return emit("sum", (a,), [np.array(a.values.sum())],
                lambda g: (np.broadcast_to(g[0], a.shape).copy(),))[0]


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    return emit("mean", (a,), [np.array(a.values.mean())],
                lambda g: (np.full(a.shape, float(g[0]) / n),))[0]


# -- recurrent ------------------------------------------------------------------

def _split_gates(z: Tensor, h: int):
    return z[..., :h], z[..., h:2 * h], z[..., 2 * h:3 * h], z[..., 3 * h:]


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params) -> tuple:
    """One LSTM cell step built from elementary primitives.

    ``params`` provides ``wx`` (d_in, 4h), ``wh`` (h, 4h) and ``b`` (4h),
    gates ordered input, forget, candidate, output.
    """
    wx, wh, b = params["wx"], params["wh"], params["b"]
    hdim = wh.shape[0]
    if (wx.shape[0] != x.shape[-1] or wx.shape[1] != 4 * hdim or wh.shape[1] != 4 * hdim
            or b.shape != (4 * hdim,) or h_prev.shape[-1] != hdim or c_prev.shape[-1] != hdim):
        raise InvalidShape("lstm_step parameter shapes are inconsistent")
    z = add(affine(x, wx, b), matmul(h_prev, wh))
    zi, zf, zg, zo = _split_gates(z, hdim)
    c = add(mul(sigmoid(zf), c_prev), mul(sigmoid(zi), tanh(zg)))
    h = mul(sigmoid(zo), tanh(c))
    return h, c


def lstm_sequence(x: Tensor, params, mask=None, reverse: bool = False) -> tuple:
    """Fused masked LSTM over ``x`` (B, T, d_in) from a zero state.

    Returns (outputs (B, T, h), final (B, h)). Masked steps (mask 0) keep the
    running state and emit zeros; with ``reverse`` the scan runs from T-1 to 0
    and outputs stay aligned to input positions.
    """
    wx, wh, b = params["wx"], params["wh"], params["b"]
    xv = x.values
    if xv.ndim != 3 or wx.shape[0] != xv.shape[2]:
        raise InvalidShape(f"lstm_sequence input {xv.shape} vs weight {wx.shape}")
    B, T, _ = xv.shape
    hdim = wh.shape[0]
    m = np.ones((B, T)) if mask is None else np.asarray(mask, dtype=np.float64)
    xt = np.ascontiguousarray(np.swapaxes(xv, 0, 1))
    mt = np.ascontiguousarray(m.T)
    if reverse:
        xt, mt = xt[::-1].copy(), mt[::-1].copy()
    gx = xt @ wx.values + b.values
    zeros = np.zeros((B, hdim))
    out, hs, cs, gates, tc = kernels.lstm_forward(gx, wh.values, mt, zeros, zeros)
    outputs = out[::-1] if reverse else out
    outputs = np.ascontiguousarray(np.swapaxes(outputs, 0, 1))
    final = hs[T].copy()

    def backward(g):
        gout, gfinal = g
        dout = np.swapaxes(gout, 0, 1)
        if reverse:
            dout = dout[::-1]
        dout = np.ascontiguousarray(dout)
        dg, _, _ = kernels.lstm_backward(dout, gfinal, zeros, wh.values, mt, cs, gates, tc)
        dg2 = dg.reshape(-1, 4 * hdim)
        gwx = xt.reshape(-1, xt.shape[2]).T @ dg2
        gwh = hs[:T].reshape(-1, hdim).T @ dg2
        gb = dg2.sum(axis=0)
        gx_t = dg @ wx.values.T
        if reverse:
            gx_t = gx_t[::-1]
        return np.swapaxes(gx_t, 0, 1), gwx, gwh, gb

    o, f = emit("lstm_sequence", (x, wx, wh, b), [outputs, final], backward)
    return o, f


def bilstm_encode(seq, params, mask=None) -> tuple:
    """Bidirectional encoding.

    ``seq`` is a list of rank-1 tensors, a (T, d_in) tensor or a batched
    (B, T, d_in) tensor. ``params`` maps ``"fwd"`` and ``"bwd"`` to LSTM
    parameter dicts. Returns (hiddens, final): hiddens[..., t, :] is the
    forward and backward hidden at step t concatenated; final joins the
    forward state after the last step with the backward state after the
    first step.
    """
    single = False
    if isinstance(seq, (list, tuple)):
        if not seq:
            raise EmptySequence("bilstm_encode needs at least one step")
        seq = stack([as_tensor(s) for s in seq], axis=0)
    seq = as_tensor(seq)
    if seq.values.ndim == 2:
        single = True
        seq = reshape(seq, (1,) + seq.shape)
        if mask is not None:
            mask = np.asarray(mask)[None]
    if seq.shape[1] == 0:
        raise EmptySequence("bilstm_encode needs at least one step")
    hf, ff = lstm_sequence(seq, params["fwd"], mask)
    hb, fb = lstm_sequence(seq, params["bwd"], mask, reverse=True)
    hiddens = concat([hf, hb], axis=-1)
    final = concat([ff, fb], axis=-1)
    if single:
        hiddens = reshape(hiddens, hiddens.shape[1:])
        final = reshape(final, final.shape[1:])
    return hiddens, final
