"""Forward/backward definitions for every layer the two networks use.

Convolutions are computed as a loop over kernel offsets, each offset being a
single BLAS contraction; this keeps memory flat (no im2col buffer) while
staying fast enough for CPU training. Transposed convolution is implemented
as the exact adjoint of ``conv3d``: sharing a weight array, the two satisfy
the inner-product identity <conv(x), y> == <x, tconv(y)>.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateBatch, InvalidScore, ShapeMismatch
from .tensor import Tensor, as_tensor, make_node

CE_EPS = 1e-7


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ShapeMismatch(f"expected 3 values, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatch(f"add shapes {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(g):
        ga = g if a.shape == out.shape else np.sum(g).reshape(a.shape)
        gb = g if b.shape == out.shape else np.sum(g).reshape(b.shape)
        return ga, gb

    return make_node(out, (a, b), vjp)


def scale(x, s):
    x = as_tensor(x)
    s = float(s)
    return make_node(x.data * s, (x,), lambda g: (g * s,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# im2col buffers at or below this size are kept alive for the backward
# pass; larger convolutions gather/scatter in kernel-offset chunks so no
# intermediate exceeds this bound
COL_CACHE_LIMIT = 32 * 2 ** 20


def _offsets(kx, ky, kz):
    return [(dx, dy, dz) for dx in range(kx) for dy in range(ky) for dz in range(kz)]


def _offset_chunks(offsets, lead, n, odims, itemsize):
    """Yield (start, stop) offset ranges whose column buffer stays under the
    cache limit; ``lead`` is the per-offset channel count."""
    per = lead * n * int(np.prod(odims)) * itemsize
    step = max(1, COL_CACHE_LIMIT // max(per, 1))
    for start in range(0, len(offsets), step):
        yield start, min(start + step, len(offsets))


def _gather_cols(xp, offsets, strides, odims):
    """Build the (C, len(offsets), N, ox, oy, oz) patch tensor."""
    N, C = xp.shape[:2]
    sx, sy, sz = strides
    ox, oy, oz = odims
    cols = np.empty((C, len(offsets), N, ox, oy, oz), dtype=xp.dtype)
    for i, (dx, dy, dz) in enumerate(offsets):
        cols[:, i] = xp[:, :, dx:dx + sx * ox:sx, dy:dy + sy * oy:sy,
                        dz:dz + sz * oz:sz].transpose(1, 0, 2, 3, 4)
    return cols


def _scatter_cols(cols, out, offsets, strides, idims):
    """Adjoint of :func:`_gather_cols`: scatter-add columns into the
    (N, C, fx, fy, fz) volume ``out``."""
    sx, sy, sz = strides
    ix, iy, iz = idims
    view = out.transpose(1, 0, 2, 3, 4)
    for i, (dx, dy, dz) in enumerate(offsets):
        view[:, :, dx:dx + sx * ix:sx, dy:dy + sy * iy:sy,
             dz:dz + sz * iz:sz] += cols[:, i]


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation over (N, C, X, Y, Z) input.

    ``w`` has shape (out_channels, in_channels, kx, ky, kz); output spatial
    size is floor((dim + 2*pad - k) / stride) + 1 per axis.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5D input/weight, got {x.shape}/{w.shape}")
    N, C, X, Y, Z = x.shape
    O, Cw, kx, ky, kz = w.shape
    if Cw != C:
        raise ShapeMismatch(f"conv3d channel mismatch: input {C}, weight {Cw}")
    sx, sy, sz = _triple(stride)
    px, py, pz = _triple(padding)
    if min(sx, sy, sz) < 1:
        raise ShapeMismatch("stride must be >= 1")
    dims_out = []
    for d, k, s, p in ((X, kx, sx, px), (Y, ky, sy, py), (Z, kz, sz, pz)):
        if d + 2 * p < k:
            raise ShapeMismatch(f"kernel {k} does not fit dimension {d} with padding {p}")
        dims_out.append((d + 2 * p - k) // s + 1)
    ox, oy, oz = dims_out
    K = kx * ky * kz

    xp = np.pad(x.data, ((0, 0), (0, 0), (px, px), (py, py), (pz, pz))) if (px or py or pz) else x.data
    offsets = _offsets(kx, ky, kz)
    strides, odims = (sx, sy, sz), (ox, oy, oz)
    chunks = list(_offset_chunks(offsets, C, N, odims, xp.dtype.itemsize))
    w3 = w.data.reshape(O, C, K)
    out_mat = np.zeros((O, N * ox * oy * oz), dtype=x.data.dtype)
    keep = None
    for i0, i1 in chunks:
        cols = _gather_cols(xp, offsets[i0:i1], strides, odims)
        out_mat += w3[:, :, i0:i1].reshape(O, -1) @ cols.reshape(C * (i1 - i0), -1)
        if len(chunks) == 1:
            keep = cols
    out = np.ascontiguousarray(out_mat.reshape(O, N, ox, oy, oz).transpose(1, 0, 2, 3, 4))
    bias = as_tensor(b) if b is not None else None
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeMismatch(f"conv3d bias shape {bias.shape}, expected ({O},)")
        out += bias.data[None, :, None, None, None]

    def vjp(g):
        need_x = x.requires_grad or x._vjp is not None
        need_w = w.requires_grad or w._vjp is not None
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(O, -1)
        gw = gb = gx = gxp = None
        if need_w:
            gw = np.empty((O, C, K), dtype=w.data.dtype)
        if need_x:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i0, i1 in chunks:
            if need_w or need_x:
                cols = keep if keep is not None else _gather_cols(
                    xp, offsets[i0:i1], strides, odims) if need_w else None
            if need_w:
                gw[:, :, i0:i1] = (gmat @ cols.reshape(C * (i1 - i0), -1).T) \
                    .reshape(O, C, i1 - i0)
            if need_x:
                gcols = (w3[:, :, i0:i1].reshape(O, -1).T @ gmat) \
                    .reshape(C, i1 - i0, N, ox, oy, oz)
                _scatter_cols(gcols, gxp, offsets[i0:i1], strides, odims)
        if need_w:
            gw = gw.reshape(w.data.shape)
        if need_x:
            gx = gxp[:, :, px:px + X, py:py + Y, pz:pz + Z] if (px or py or pz) else gxp
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3, 4))
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return make_node(out, parents, vjp)


def tconv3d(x, w, b=None, stride=1, padding=0):
    """Transposed 3D convolution; adjoint of :func:`conv3d`.

    ``w`` has shape (in_channels, out_channels, kx, ky, kz); output spatial
    size is (dim - 1) * stride - 2 * pad + k per axis.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeMismatch(f"tconv3d expects 5D input/weight, got {x.shape}/{w.shape}")
    N, C, X, Y, Z = x.shape
    Cw, O, kx, ky, kz = w.shape
    if Cw != C:
        raise ShapeMismatch(f"tconv3d channel mismatch: input {C}, weight {Cw}")
    sx, sy, sz = _triple(stride)
    px, py, pz = _triple(padding)
    fx, fy, fz = (X - 1) * sx + kx, (Y - 1) * sy + ky, (Z - 1) * sz + kz
    ox, oy, oz = fx - 2 * px, fy - 2 * py, fz - 2 * pz
    if min(ox, oy, oz) < 1:
        raise ShapeMismatch("tconv3d output would be empty")
    K = kx * ky * kz

    offsets = _offsets(kx, ky, kz)
    strides, idims = (sx, sy, sz), (X, Y, Z)
    chunks = list(_offset_chunks(offsets, O, N, idims, x.data.itemsize))
    w3 = w.data.reshape(C, O, K)
    xmat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(C, -1)
    full = np.zeros((N, O, fx, fy, fz), dtype=x.data.dtype)
    for i0, i1 in chunks:
        prod = (w3[:, :, i0:i1].reshape(C, -1).T @ xmat) \
            .reshape(O, i1 - i0, N, X, Y, Z)
        _scatter_cols(prod, full, offsets[i0:i1], strides, idims)
    out = np.ascontiguousarray(full[:, :, px:fx - px, py:fy - py, pz:fz - pz]) \
        if (px or py or pz) else full
    bias = as_tensor(b) if b is not None else None
    if bias is not None:
        if bias.shape != (O,):
            raise ShapeMismatch(f"tconv3d bias shape {bias.shape}, expected ({O},)")
        out += bias.data[None, :, None, None, None]

    def vjp(g):
        need_x = x.requires_grad or x._vjp is not None
        need_w = w.requires_grad or w._vjp is not None
        if px or py or pz:
            gfull = np.zeros((N, O, fx, fy, fz), dtype=g.dtype)
            gfull[:, :, px:fx - px, py:fy - py, pz:fz - pz] = g
        else:
            gfull = g
        gx = gw = gb = None
        gxmat = np.zeros((C, N * X * Y * Z), dtype=g.dtype) if need_x else None
        if need_w:
            gw = np.empty((C, O, K), dtype=w.data.dtype)
        for i0, i1 in chunks:
            gcols = _gather_cols(gfull, offsets[i0:i1], strides, idims)
            gmat = gcols.reshape(O * (i1 - i0), -1)
            if need_x:
                gxmat += w3[:, :, i0:i1].reshape(C, -1) @ gmat
            if need_w:
                gw[:, :, i0:i1] = (xmat @ gmat.T).reshape(C, O, i1 - i0)
        if need_x:
            gx = np.ascontiguousarray(
                gxmat.reshape(C, N, X, Y, Z).transpose(1, 0, 2, 3, 4))
        if need_w:
            gw = gw.reshape(w.data.shape)
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3, 4))
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return make_node(out, parents, vjp)


def leaky_relu(x, slope=0.01):
    if not 0.0 < slope < 1.0:
        raise InvalidScore(f"leaky_relu slope must be in (0,1), got {slope}")
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return make_node(out, (x,), lambda g: (np.where(mask, g, slope * g),))


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the output strictly inside (0,1) even where exp underflows
    tiny = 1e-12
    np.clip(out, tiny, 1.0 - tiny, out=out)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def maxpool3d(x, window, stride=None):
    """Windowed maximum; gradient routes to the first-occurring argmax."""
    x = as_tensor(x)
    if x.data.ndim != 5:
        raise ShapeMismatch(f"maxpool3d expects 5D input, got {x.shape}")
    wx, wy, wz = _triple(window)
    sx, sy, sz = _triple(stride) if stride is not None else (wx, wy, wz)
    N, C, X, Y, Z = x.shape
    if wx > X or wy > Y or wz > Z:
        raise ShapeMismatch(f"pool window {(wx, wy, wz)} exceeds input {(X, Y, Z)}")

    if (sx, sy, sz) == (wx, wy, wz) and X % wx == 0 and Y % wy == 0 and Z % wz == 0:
        ox, oy, oz = X // wx, Y // wy, Z // wz
        v = x.data.reshape(N, C, ox, wx, oy, wy, oz, wz)
        v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, ox, oy, oz, wx * wy * wz)
        idx = v.argmax(axis=-1)
        out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

        def vjp(g):
            gflat = np.zeros((N, C, ox, oy, oz, wx * wy * wz), dtype=g.dtype)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(N, C, ox, oy, oz, wx, wy, wz)
            gx = gx.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(N, C, X, Y, Z)
            return (np.ascontiguousarray(gx),)

        return make_node(out, (x,), vjp)

    # general (possibly overlapping) path
    ox = (X - wx) // sx + 1
    oy = (Y - wy) // sy + 1
    oz = (Z - wz) // sz + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, (wx, wy, wz), axis=(2, 3, 4))
    view = view[:, :, ::sx, ::sy, ::sz]
    flat = view.reshape(N, C, ox, oy, oz, wx * wy * wz)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        wi, wj, wk = np.unravel_index(idx, (wx, wy, wz))
        n, c, i, j, k = np.indices(idx.shape, sparse=True)
        gx = np.zeros((N, C, X, Y, Z), dtype=g.dtype)
        np.add.at(gx, (n, c, i * sx + wi, j * sy + wj, k * sz + wk), g)
        return (gx,)

    return make_node(out, (x,), vjp)


def batchnorm(x, gamma, beta, running_mean, running_var, training,
              momentum=0.1, eps=1e-5):
    """Per-channel normalization over (N, spatial) with learnable scale/shift.

    Training mode uses batch statistics (biased variance) and updates the
    running arrays in place; inference mode normalizes by the running stats.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if x.data.ndim < 2:
        raise ShapeMismatch("batchnorm expects at least 2D (N, C, ...) input")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batchnorm scale/shift must be ({C},)")
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, C) + (1,) * (x.data.ndim - 2)

    if training:
        if x.shape[0] < 2:
            raise DegenerateBatch(f"batchnorm needs N >= 2 in training mode, got {x.shape[0]}")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(shape)) * invstd.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
        m = x.data.size // C

        def vjp(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gamma.data.reshape(shape)
            s1 = dxhat.sum(axis=axes).reshape(shape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
            gx = (invstd.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
            return gx, dgamma, dbeta

        return make_node(out, (x, gamma, beta), vjp)

    invstd = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(shape)) * invstd.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def vjp(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        gx = g * (gamma.data * invstd).reshape(shape)
        return gx, dgamma, dbeta

    return make_node(out, (x, gamma, beta), vjp)


def dense(x, w, b=None):
    """Affine map x @ W + b for (N, D) input and (D, K) weight."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense shapes {x.shape} @ {w.shape}")
    out = x.data @ w.data
    bias = as_tensor(b) if b is not None else None
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise ShapeMismatch(f"dense bias shape {bias.shape}, expected ({w.shape[1]},)")
        out = out + bias.data

    def vjp(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        if bias is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return make_node(out, parents, vjp)


def cross_entropy(scores, labels, mean=False, normalize=True):
    """Summed cross entropy -sum_i sum_j y_ij log(v_ij) over the batch.

    With ``normalize=True`` (default) each score row is first divided by its
    sum so the log sees a distribution; taken literally over independent
    per-class scores the loss is degenerate for one-hot targets (its
    minimum drives every score to 1), so the normalized form is what makes
    the classifier trainable. Probabilities are clamped from below at
    CE_EPS before the log and the gradient is zero where the clamp is
    active. ``mean=True`` divides by the batch size (used to keep the
    optimizer step batch-size stable).
    """
    scores = as_tensor(scores)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=scores.data.dtype)
    if scores.shape != y.shape:
        raise ShapeMismatch(f"cross_entropy shapes {scores.shape} vs {y.shape}")
    if np.any(scores.data < 0.0) or np.any(scores.data > 1.0):
        raise InvalidScore("class scores must lie in [0, 1]")
    B = scores.shape[0] if scores.data.ndim > 1 else 1
    norm = B if mean else 1

    if not normalize:
        v = np.clip(scores.data, CE_EPS, 1.0 - CE_EPS)
        loss = -(y * np.log(v)).sum() / norm
        active = (scores.data > CE_EPS) & (scores.data < 1.0 - CE_EPS)

        def vjp(g):
            return (np.where(active, -g * y / v / norm, 0.0),)

        return make_node(np.asarray(loss), (scores,), vjp)

    S = np.maximum(scores.data.sum(axis=-1, keepdims=True), CE_EPS)
    p = scores.data / S
    pc = np.maximum(p, CE_EPS)
    loss = -(y * np.log(pc)).sum() / norm
    active = p > CE_EPS

    def vjp(g):
        dldp = np.where(active, -g * y / pc / norm, 0.0)
        return ((dldp - (dldp * p).sum(axis=-1, keepdims=True)) / S,)

    return make_node(np.asarray(loss), (scores,), vjp)


def l2_loss(pred, target):
    """Sum over the batch of per-sample Euclidean norms of the difference."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"l2_loss shapes {pred.shape} vs {t.shape}")
    B = pred.shape[0] if pred.data.ndim > 1 else 1
    diff = (pred.data - t).reshape(B, -1)
    norms = np.sqrt((diff * diff).sum(axis=1))
    loss = norms.sum()

    def vjp(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        gd = diff / safe[:, None]
        gd[norms == 0.0] = 0.0
        return (g * gd.reshape(pred.shape),)

    return make_node(np.asarray(loss), (pred,), vjp)
