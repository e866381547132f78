"""Differentiable layer primitives: convolution, pooling, affine maps, losses.

Inputs are single samples without a batch axis: a 3D volume is
``(C, X, Y, Z)`` and an image is ``(C, H, W)``.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeMismatch, Tensor, _sigmoid, as_tensor


def _triple(v, n):
    if np.isscalar(v):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ShapeMismatch(f"expected {n} values, got {v}")
    return v


def _out_size(size, k, s, p):
    span = size + 2 * p - k
    if span < 0 or span % s:
        raise ShapeMismatch(f"size {size} with kernel {k}, stride {s}, padding {p} is not an exact tiling")
    return span // s + 1


def _windows(xp, kernel, stride):
    """Strided window view of a padded (C, *S) array: (C, *S_out, *K)."""
    nd = len(kernel)
    view = sliding_window_view(xp, kernel, axis=tuple(range(1, nd + 1)))
    return view[(slice(None),) + tuple(slice(None, None, s) for s in stride)]


def _col2im(gcols, padded_shape, kernel, stride, out_shape, dtype):
    # gcols: (C, *K, *S_out)
    grad = np.zeros(padded_shape, dtype=dtype)
    for off in itertools.product(*(range(k) for k in kernel)):
        index = (slice(None),) + tuple(slice(o, o + s * n, s) for o, s, n in zip(off, stride, out_shape))
        grad[index] += gcols[(slice(None),) + off]
    return grad


def _convnd(x, weight, bias, stride, padding, nd):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != nd + 1 or weight.ndim != nd + 2:
        raise ShapeMismatch(f"conv{nd}d expects input rank {nd + 1} and weight rank {nd + 2}")
    c_in = x.shape[0]
    c_out = weight.shape[0]
    if weight.shape[1] != c_in:
        raise ShapeMismatch(f"weight expects {weight.shape[1]} input channels, got {c_in}")
    kernel = weight.shape[2:]
    stride = _triple(stride, nd)
    padding = _triple(padding, nd)
    out_shape = tuple(_out_size(n, k, s, p) for n, k, s, p in zip(x.shape[1:], kernel, stride, padding))

    xd = x.data
    pointwise = all(k == 1 for k in kernel) and all(p == 0 for p in padding)
    if pointwise:
        sub = xd[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
        cols = sub.reshape(c_in, -1)
        xp_shape = None
    else:
        pad = [(0, 0)] + [(p, p) for p in padding]
        xp = np.pad(xd, pad) if any(padding) else xd
        xp_shape = xp.shape
        win = _windows(xp, kernel, stride)
        perm = (0,) + tuple(range(nd + 1, 2 * nd + 1)) + tuple(range(1, nd + 1))
        cols = win.transpose(perm).reshape(c_in * int(np.prod(kernel)), -1)

    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ cols
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents.append(bias)
    out = out.reshape((c_out,) + out_shape)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        grads = []
        if x.requires_grad:
            gcols = w2.T @ g2
            if pointwise:
                gx = np.zeros(xd.shape, dtype=xd.dtype)
                gx[(slice(None),) + tuple(slice(None, None, s) for s in stride)] = gcols.reshape((c_in,) + out_shape)
            else:
                gcols = gcols.reshape((c_in,) + tuple(kernel) + out_shape)
                gp = _col2im(gcols, xp_shape, kernel, stride, out_shape, xd.dtype)
                gx = gp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, xd.shape[1:]))]
            grads.append(gx)
        if weight.requires_grad:
            grads.append((g2 @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return Tensor._make(out, tuple(parents), backward)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate a ``(C_in, X, Y, Z)`` volume with ``(C_out, C_in, kx, ky, kz)`` weights.

    Output extents must tile exactly: ``(X + 2p - k) / s + 1`` is an integer
    on every axis, otherwise :class:`ShapeMismatch` is raised.
    """
    return _convnd(x, weight, bias, stride, padding, 3)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2D counterpart of :func:`conv3d` on ``(C_in, H, W)`` images."""
    return _convnd(x, weight, bias, stride, padding, 2)


def maxpool3d(x, kernel=3, stride=1, padding=0):
    """Max pooling over ``(C, X, Y, Z)`` with implicit -inf padding.

    The backward pass routes each output gradient to the first maximising
    element of its window (lowest flat offset within the window).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool3d expects (C, X, Y, Z), got {x.shape}")
    kernel, stride, padding = _triple(kernel, 3), _triple(stride, 3), _triple(padding, 3)
    out_shape = tuple(_out_size(n, k, s, p) for n, k, s, p in zip(x.shape[1:], kernel, stride, padding))
    xd = x.data
    xp = np.pad(xd, [(0, 0)] + [(p, p) for p in padding], constant_values=-np.inf) if any(padding) else xd
    win = _windows(xp, kernel, stride).reshape((xd.shape[0],) + out_shape + (-1,))
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros(xp.shape, dtype=xd.dtype)
        for flat, off in enumerate(itertools.product(*(range(k) for k in kernel))):
            index = (slice(None),) + tuple(slice(o, o + s * n, s) for o, s, n in zip(off, stride, out_shape))
            gp[index] += np.where(arg == flat, g, 0)
        return (gp[(slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, xd.shape[1:]))],)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def fc(x, weight, bias=None):
    """Affine map ``weight @ x + bias`` for a flat input of length ``in``.

    ``weight`` has shape ``(out, in)``.  A 2D input ``(N, in)`` maps each row.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 2 or weight.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"fc input {x.shape} incompatible with weight {weight.shape}")
    out = xd @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"bias {bias.shape} for weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g[None] if squeeze else g
        grads = []
        if x.requires_grad:
            gx = g2 @ weight.data
            grads.append(gx[0] if squeeze else gx)
        if weight.requires_grad:
            grads.append(g2.T @ xd)
        if bias is not None and bias.requires_grad:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out[0] if squeeze else out, tuple(parents), backward)


def relu(x):
    return as_tensor(x).relu()


def sigmoid(x):
    return as_tensor(x).sigmoid()


# -- losses ------------------------------------------------------------------

def _logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def cross_entropy(logits, target):
    """Mean softmax cross entropy of ``(N, K)`` logits against integer targets."""
    logits = as_tensor(logits)
    z = logits.data[None] if logits.ndim == 1 else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ShapeMismatch(f"cross_entropy logits {logits.shape} vs target {t.shape}")
    n = z.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=z.dtype))
    lse = _logsumexp(z)
    rows = np.arange(n)
    loss = np.mean(lse[:, 0] - z[rows, t])

    def backward(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        p *= g / n
        return (p[0] if logits.ndim == 1 else p,)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def huber(pred, target, delta=1.0):
    """Mean elementwise Huber loss: quadratic within ``delta``, linear beyond."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeMismatch(f"huber pred {pred.shape} vs target {t.shape}")
    n = pred.data.size
    if n == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    r = pred.data - t
    a = np.abs(r)
    per = np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))
    loss = per.mean()

    def backward(g):
        return (g * np.clip(r, -delta, delta) / n,)

    return Tensor._make(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def bce_with_logits(logits, target):
    """Mean binary cross entropy computed from logits, stable for large |logit|."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeMismatch(f"bce logits {x.shape} vs target {t.shape}")
    n = x.size
    if n == 0:
        return Tensor(np.zeros((), dtype=x.dtype))
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        return (g * (_sigmoid(x) - t) / n,)

    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


# -- scatter / gather ----------------------------------------------------------

def scatter_max(values, index, size):
    """Scatter columns of ``values`` (C, M) into ``size`` slots with max on collision.

    ``index[m]`` is the destination slot of column ``m`` or ``-1`` to drop it.
    Slots receiving nothing are zero.  The gradient of a slot flows to the
    first column (in input order) holding its maximum, per channel.
    """
    values = as_tensor(values)
    v = values.data
    index = np.asarray(index, dtype=np.int64)
    if v.ndim != 2 or index.shape != (v.shape[1],):
        raise ShapeMismatch(f"scatter_max values {v.shape} with index {index.shape}")
    c = v.shape[0]
    out = np.zeros((c, size), dtype=v.dtype)
    cols = np.flatnonzero(index >= 0)
    if cols.size == 0:
        return Tensor._make(out, (values,), lambda g: (np.zeros_like(v),))
    order = cols[np.argsort(index[cols], kind="stable")]
    dest = index[order]
    starts = np.flatnonzero(np.r_[True, dest[1:] != dest[:-1]])
    slots = dest[starts]
    vs = v[:, order]
    best = np.maximum.reduceat(vs, starts, axis=1)
    out[:, slots] = best
    group = np.repeat(np.arange(starts.size), np.diff(np.r_[starts, order.size]))
    pos = np.where(vs == best[:, group], np.arange(order.size)[None, :], order.size)
    first = np.minimum.reduceat(pos, starts, axis=1)  # (C, n_groups) into sorted positions
    winners = order[first]

    def backward(g):
        gv = np.zeros_like(v)
        rows = np.arange(c)[:, None]
        gv[rows, winners] = g[:, slots]
        return (gv,)

    return Tensor._make(out, (values,), backward)


def roi_bins(n, bins=4):
    """Index ranges splitting ``n`` cells into ``bins`` contiguous non-empty bins.

    Bin ``b`` spans ``[floor(b*n/bins), floor((b+1)*n/bins))``; when ``n < bins``
    a bin that would be empty repeats its nearest cell.
    """
    out = []
    for b in range(bins):
        lo = (b * n) // bins
        hi = max(((b + 1) * n) // bins, lo + 1)
        lo = min(lo, n - 1)
        hi = min(hi, n)
        out.append((lo, max(hi, lo + 1)))
    return out


def roi_pool(x, lo, hi, bins=4):
    """Max-pool the integer region ``[lo, hi)`` of a ``(C, X, Y, Z)`` volume into ``bins``^3 cells."""
    x = as_tensor(x)
    lo = [int(v) for v in lo]
    hi = [int(v) for v in hi]
    if any(h <= l for l, h in zip(lo, hi)):
        raise ShapeMismatch(f"empty RoI region {lo}-{hi}")
    xd = x.data
    c = xd.shape[0]
    ranges = [roi_bins(h - l, bins) for l, h in zip(lo, hi)]
    out = np.empty((c, bins, bins, bins), dtype=xd.dtype)
    src = np.empty((c, bins, bins, bins, 3), dtype=np.int64)
    rows = np.arange(c)
    for i, (ax0, ax1) in enumerate(ranges[0]):
        for j, (ay0, ay1) in enumerate(ranges[1]):
            for k, (az0, az1) in enumerate(ranges[2]):
                block = xd[:, lo[0] + ax0:lo[0] + ax1, lo[1] + ay0:lo[1] + ay1, lo[2] + az0:lo[2] + az1]
                shape = block.shape[1:]
                flat = block.reshape(c, -1)
                am = np.argmax(flat, axis=1)
                out[:, i, j, k] = flat[rows, am]
                ii, jj, kk = np.unravel_index(am, shape)
                src[:, i, j, k, 0] = lo[0] + ax0 + ii
                src[:, i, j, k, 1] = lo[1] + ay0 + jj
                src[:, i, j, k, 2] = lo[2] + az0 + kk

    def backward(g):
        gx = np.zeros_like(xd)
        ch = np.broadcast_to(rows[:, None, None, None], g.shape)
        np.add.at(gx, (ch, src[..., 0], src[..., 1], src[..., 2]), g)
        return (gx,)

    return Tensor._make(out, (x,), backward)
