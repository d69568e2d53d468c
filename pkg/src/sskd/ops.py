"""Differentiable CNN primitives over the tape engine.

Every function takes and returns :class:`~sskd.tensor.Tensor` and records
itself on the active tape when any input requires a gradient. Reductions
accumulate in float64 regardless of the working dtype so that loss traces
stay stable enough for plateau detection in float32 runs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .tensor import Tensor, record


def _reduce_sum(arr, axis=None):
    """Sum with float64 accumulation, result cast back to ``arr``'s dtype."""
    return np.sum(arr, axis=axis, dtype=np.float64).astype(arr.dtype)


# ---------------------------------------------------------------------------
# elementwise / shaping


def add(a, b):
    """Elementwise sum of two same-shaped tensors (residual connections)."""
    if a.shape != b.shape:
        raise DimensionError.mismatch("add", a.shape, b.shape)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    """Elementwise product of two same-shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError.mismatch("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, c):
    """Multiply a tensor by a python scalar."""
    c = float(c)
    return record(x.data * np.asarray(c, dtype=x.dtype), (x,), lambda g: (g * c,))


def tsum(x):
    """Sum all entries down to a scalar."""
    out = _reduce_sum(x.data).reshape(())
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (x,), bwd)


def relu(x):
    mask = x.data > 0
    # backward uses np.where so rejected gradients are clean +0.0 regardless
    # of g's sign
    return record(
        np.maximum(x.data, x.dtype.type(0)),
        (x,),
        lambda g: (np.where(mask, g, x.dtype.type(0)),),
    )


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(extent, k, stride, padding, axis):
    span = extent + 2 * padding - k
    if span < 0:
        raise DimensionError(
            f"conv2d: kernel {k} exceeds padded input extent {extent + 2 * padding} on axis {axis}"
        )
    if span % stride != 0:
        raise ConfigError(
            f"conv2d: non-integer output extent on axis {axis}: "
            f"({extent} + 2*{padding} - {k}) / {stride} is not integral"
        )
    return span // stride + 1


def _im2col(xd, kh, kw, stride, padding):
    """Gather conv patches into a (C*kh*kw, N*Ho*Wo) matrix."""
    n, c, h, w = xd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xd.shape[2], xd.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xd.strides
    patches = np.lib.stride_tricks.as_strided(
        xd,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    cols = patches.reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols), (n, c, hp, wp, ho, wo)


def _col2im(gcols, meta, kh, kw, stride, padding):
    """Scatter-add column gradients back to input layout.

    Accumulation happens in the (C, N, H, W) layout matching the column
    matrix, so the kernel loop adds contiguous blocks; one transpose at the
    end restores NCHW.
    """
    n, c, hp, wp, ho, wo = meta
    gx = np.zeros((c, n, hp, wp), dtype=gcols.dtype)
    blocks = gcols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        rows = slice(i, i + stride * ho, stride)
        for j in range(kw):
            cols = slice(j, j + stride * wo, stride)
            gx[:, :, rows, cols] += blocks[:, i, j]
    if padding:
        gx = gx[:, :, padding : hp - padding, padding : wp - padding]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation in NCHW layout.

    ``weight`` is (C_out, C_in, kH, kW); the spatial output extents must be
    exactly integral for the given stride/padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d: padding must be >= 0, got {padding}")
    n, c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if c_in != c_w:
        raise DimensionError.mismatch("conv2d: input channels vs weight", x.shape, weight.shape)
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError.mismatch("conv2d: bias", bias.shape, (c_out,))
    ho = _conv_out_extent(h, kh, stride, padding, "H")
    wo = _conv_out_extent(w, kw, stride, padding, "W")

    cols, meta = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gout = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = (gout @ cols.T).reshape(weight.shape)
        gx = _col2im(wmat.T @ gout, meta, kh, kw, stride, padding) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# linear / pooling


def linear(x, weight, bias=None):
    """Fully-connected layer: x (N,D) @ weight (O,D)^T + bias (O,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError.mismatch("linear", x.shape, weight.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError.mismatch("linear: bias", bias.shape, (weight.shape[0],))
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)
    xd, wd = x.data, weight.data

    def bwd(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record(out, inputs, bwd)


def _pool_windows(xd, kernel, stride):
    n, c, h, w = xd.shape
    if (h - kernel) % stride or (w - kernel) % stride:
        raise ConfigError(
            f"pool: input {h}x{w} not tileable by kernel {kernel} stride {stride}"
        )
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sn, sc, sh, sw = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    return win, ho, wo


def max_pool2d(x, kernel, stride=None):
    stride = kernel if stride is None else stride
    win, ho, wo = _pool_windows(x.data, kernel, stride)
    n, c = x.shape[0], x.shape[1]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + am // kernel
        cols = wi * stride + am % kernel
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), bwd)


def avg_pool2d(x, kernel, stride=None):
    stride = kernel if stride is None else stride
    win, ho, wo = _pool_windows(x.data, kernel, stride)
    out = win.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)
    in_shape = x.shape
    inv = 1.0 / (kernel * kernel)

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gshare = g * g.dtype.type(inv)
        for i in range(kernel):
            rows = slice(i, i + stride * ho, stride)
            for j in range(kernel):
                cols = slice(j, j + stride * wo, stride)
                gx[:, :, rows, cols] += gshare
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), bwd)


def global_avg_pool(x):
    """Mean over the spatial dims: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.mean(x.data, axis=(2, 3), dtype=np.float64).astype(x.dtype)
    inv = 1.0 / (h * w)

    def bwd(g):
        gx = np.empty((n, c, h, w), dtype=g.dtype)
        gx[:] = (g * g.dtype.type(inv))[:, :, None, None]
        return (gx,)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm2d(x, scale_p, shift_p, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N,H,W).

    In training mode the batch statistics normalize the activations and the
    running buffers (plain numpy arrays, mutated in place) track them; in
    inference mode only the running buffers are read.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d: expected 4-d input, got {x.shape}")
    c = x.shape[1]
    if scale_p.shape != (c,) or shift_p.shape != (c,):
        raise DimensionError.mismatch("batch_norm2d: scale/shift", scale_p.shape, (c,))
    xd = x.data
    if training:
        mu = np.mean(xd, axis=(0, 2, 3), dtype=np.float64)
        var = np.mean(np.square(xd, dtype=np.float64), axis=(0, 2, 3)) - mu * mu
        var = np.maximum(var, 0.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
        xhat = (xd - mu.astype(xd.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    else:
        inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(xd.dtype)
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = scale_p.data[None, :, None, None] * xhat + shift_p.data[None, :, None, None]
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    sdata = scale_p.data

    def bwd(g):
        g_scale = _reduce_sum(g * xhat, axis=(0, 2, 3))
        g_shift = _reduce_sum(g, axis=(0, 2, 3))
        coef = (sdata * inv_std)[None, :, None, None]
        if training:
            gsum = np.sum(g, axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            gxhat_sum = np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64).astype(g.dtype)
            gx = coef * (
                g
                - gsum[None, :, None, None] / m
                - xhat * gxhat_sum[None, :, None, None] / m
            )
        else:
            gx = coef * g
        return gx, g_scale, g_shift

    return record(out, (x, scale_p, shift_p), bwd)


# ---------------------------------------------------------------------------
# softmax family


def _log_softmax(zd):
    zmax = zd.max(axis=1, keepdims=True)
    shifted = zd - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True, dtype=np.float64)).astype(zd.dtype)
    return shifted - lse


def softmax(logits, temperature=1.0):
    """Row-wise softmax of logits / temperature."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax: expected (N,C) logits, got {logits.shape}")
    if temperature <= 0:
        raise ConfigError(f"softmax: temperature must be positive, got {temperature}")
    t = float(temperature)
    p = np.exp(_log_softmax(logits.data / logits.dtype.type(t)))

    def bwd(g):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return ((p * (g - dot)) / g.dtype.type(t),)

    return record(p, (logits,), bwd)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected (N,C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError.mismatch("softmax_cross_entropy: labels", labels.shape, (n,))
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValidationError(f"label {bad} outside [0, {c})")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = (-np.sum(logp[rows, labels], dtype=np.float64) / n).astype(logits.dtype).reshape(())

    def bwd(g):
        gl = np.exp(logp)
        gl[rows, labels] -= 1.0
        gl *= g / n
        return (gl,)

    return record(loss, (logits,), bwd)


def l2_distance(a, b):
    """Squared l2 distance summed over features, averaged over the batch.

    The batch size is the leading extent for tensors of rank >= 2; a rank-1
    tensor counts as a single sample. Division by feature count is
    deliberately omitted so per-sample magnitudes stay comparable across
    stages.
    """
    if a.shape != b.shape:
        raise DimensionError.mismatch("l2_distance", a.shape, b.shape)
    n = a.shape[0] if a.ndim >= 2 else 1
    diff = a.data - b.data
    out = (_reduce_sum(np.square(diff)) / a.dtype.type(n)).reshape(())
    two_over_n = a.dtype.type(2.0 / n)

    def bwd(g):
        ga = g * two_over_n * diff
        return ga, -ga

    return record(out, (a, b), bwd)


def kl_soft_targets(teacher_logits, student_logits, temperature=1.0, t2_rescale=True):
    """KL(softmax(teacher/T) || softmax(student/T)), mean over the batch.

    The teacher side is a constant: no gradient ever flows into it. With
    ``t2_rescale`` the result is multiplied by T^2, keeping the gradient
    scale on the student logits temperature-invariant.
    """
    if teacher_logits.shape != student_logits.shape or teacher_logits.ndim != 2:
        raise DimensionError.mismatch(
            "kl_soft_targets", teacher_logits.shape, student_logits.shape
        )
    if temperature <= 0:
        raise ConfigError(f"kl_soft_targets: temperature must be positive, got {temperature}")
    t = float(temperature)
    dt = student_logits.dtype.type
    n = teacher_logits.shape[0]
    logp = _log_softmax(teacher_logits.data / dt(t))
    logq = _log_softmax(student_logits.data / dt(t))
    p = np.exp(logp)
    kl = np.sum(p * (logp - logq), dtype=np.float64) / n
    if t2_rescale:
        kl *= t * t
    out = np.asarray(kl, dtype=student_logits.dtype).reshape(())
    # d/ds of the (rescaled) mean KL: (q - p) * T / N, or (q - p)/(N*T) raw
    gscale = dt(t / n) if t2_rescale else dt(1.0 / (n * t))

    def bwd(g):
        return None, g * gscale * (np.exp(logq) - p)

    return record(out, (teacher_logits, student_logits), bwd)


# ---------------------------------------------------------------------------
# resizing


def resize_bilinear(x, target):
    """Corner-aligned bilinear resize of (N,C,H,W) to spatial ``target``.

    Identity when the target matches the input resolution.
    """
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear: expected 4-d input, got {x.shape}")
    ht, wt = int(target[0]), int(target[1])
    if ht < 1 or wt < 1:
        raise ConfigError(f"resize_bilinear: target must be >= 1, got {(ht, wt)}")
    n, c, h, w = x.shape
    if (ht, wt) == (h, w):
        return x

    def axis_coords(src, dst):
        if dst == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, src - 1)
        hi = np.minimum(lo + 1, src - 1)
        frac = (pos - lo).astype(x.dtype)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, ht)
    x0, x1, fx = axis_coords(w, wt)
    fy_col = fy[:, None]
    xd = x.data
    top = xd[:, :, y0][:, :, :, x0] * (1 - fy_col) + xd[:, :, y1][:, :, :, x0] * fy_col
    bot = xd[:, :, y0][:, :, :, x1] * (1 - fy_col) + xd[:, :, y1][:, :, :, x1] * fy_col
    out = top * (1 - fx) + bot * fx

    def bwd(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        for rows, rw in ((y0, 1 - fy_col), (y1, fy_col)):
            for cols, cw in ((x0, 1 - fx), (x1, fx)):
                np.add.at(
                    gx,
                    (ni, ci, rows[:, None], cols[None, :]),
                    g * (rw * cw).astype(g.dtype),
                )
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), bwd)
