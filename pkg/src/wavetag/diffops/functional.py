"""Forward operators and their backward closures.

Every op takes :class:`~wavetag.diffops.tensor.Tensor` inputs, validates
shapes eagerly, and returns a new tensor wired into the autograd graph via
``make_op_output``. Convolutions use the cross-correlation convention (no
kernel flip) and materialize an im2col matrix so both directions run as
single BLAS calls; max pooling breaks ties toward the lowest window index
so gradient routing is deterministic.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_op_output

BCE_EPS = 1e-7
BN_EPS = 1e-5


def _stable_expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv1d_cols(xp: np.ndarray, kernel: int, stride: int, l_out: int) -> np.ndarray:
    """(B, C, Lp) -> im2col matrix (B * Lout, C * K). One copy, then GEMM."""
    b, c, _ = xp.shape
    sb, sc, sl = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kernel, l_out), (sb, sc, sl, sl * stride), writeable=False
    )
    return view.transpose(0, 3, 1, 2).reshape(b * l_out, c * kernel)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects (B,Cin,L) and (Cout,Cin,K), got {x.shape} and {weight.shape}")
    b, c_in, length = x.shape
    c_out, w_cin, kernel = weight.shape
    if w_cin != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in} vs weight {w_cin}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv1d invalid stride/pad ({stride}, {pad})")
    if length + 2 * pad < kernel:
        raise ShapeError(f"conv1d input length {length} too short for kernel {kernel} (pad {pad})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {bias.shape} != ({c_out},)")

    l_out = (length + 2 * pad - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    cols = _conv1d_cols(xp, kernel, stride, l_out)
    w_mat = weight.data.reshape(c_out, c_in * kernel)
    out = cols @ w_mat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, l_out, c_out).transpose(0, 2, 1))

    parents = [x, weight] if bias is None else [x, weight, bias]

    def backward(dout: np.ndarray):
        dout_r = np.ascontiguousarray(dout.transpose(0, 2, 1)).reshape(b * l_out, c_out)
        d_w = (dout_r.T @ cols).reshape(c_out, c_in, kernel)
        d_cols = (dout_r @ w_mat).reshape(b, l_out, c_in, kernel)
        d_xp = np.zeros_like(xp)
        for k in range(kernel):
            d_xp[:, :, k : k + stride * l_out : stride] += d_cols[:, :, :, k].transpose(0, 2, 1)
        d_x = d_xp[:, :, pad : pad + length] if pad else d_xp
        if bias is None:
            return d_x, d_w
        return d_x, d_w, dout.sum(axis=(0, 2))

    return make_op_output(out, parents, backward)


def _conv2d_cols(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, h_out: int, w_out: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> im2col matrix (B * Hout * Wout, C * Kh * Kw)."""
    b, c, _, _ = xp.shape
    sb, sc, srow, scol = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (b, c, kh, kw, h_out, w_out),
        (sb, sc, srow, scol, srow * sh, scol * sw),
        writeable=False,
    )
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(b * h_out * w_out, c * kh * kw)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: tuple[int, int] = (1, 1),
    pad: tuple[int, int] = (0, 0),
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (B,Cin,H,W) and (Cout,Cin,Kh,Kw), got {x.shape} and {weight.shape}")
    b, c_in, height, width = x.shape
    c_out, w_cin, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = pad
    if w_cin != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in} vs weight {w_cin}")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"conv2d invalid stride/pad ({stride}, {pad})")
    if height + 2 * ph < kh or width + 2 * pw < kw:
        raise ShapeError(f"conv2d input {height}x{width} too small for kernel {kh}x{kw} (pad {pad})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({c_out},)")

    h_out = (height + 2 * ph - kh) // sh + 1
    w_out = (width + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _conv2d_cols(xp, kh, kw, sh, sw, h_out, w_out)
    w_mat = weight.data.reshape(c_out, c_in * kh * kw)
    out = cols @ w_mat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, h_out, w_out, c_out).transpose(0, 3, 1, 2))

    parents = [x, weight] if bias is None else [x, weight, bias]

    def backward(dout: np.ndarray):
        dout_r = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(b * h_out * w_out, c_out)
        d_w = (dout_r.T @ cols).reshape(c_out, c_in, kh, kw)
        d_cols = (dout_r @ w_mat).reshape(b, h_out, w_out, c_in, kh, kw)
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i : i + sh * h_out : sh, j : j + sw * w_out : sw] += d_cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        d_x = d_xp[:, :, ph : ph + height, pw : pw + width] if (ph or pw) else d_xp
        if bias is None:
            return d_x, d_w
        return d_x, d_w, dout.sum(axis=(0, 2, 3))

    return make_op_output(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool1d(x: Tensor, kernel: int, stride: int | None = None, pad: int = 0) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects (B,C,L), got {x.shape}")
    stride = kernel if stride is None else stride
    b, c, length = x.shape
    if length + 2 * pad < kernel:
        raise ShapeError(f"maxpool1d input length {length} too short for kernel {kernel}")
    l_out = (length + 2 * pad - kernel) // stride + 1
    if pad:
        xp = np.full((b, c, length + 2 * pad), -np.inf, dtype=x.dtype)
        xp[:, :, pad : pad + length] = x.data
    else:
        xp = x.data

    out = np.full((b, c, l_out), -np.inf, dtype=x.dtype)
    arg = np.zeros((b, c, l_out), dtype=np.int8)
    # First strictly-greater wins, so ties route to the lowest window index.
    for k in range(kernel):
        window = xp[:, :, k : k + stride * l_out : stride]
        better = window > out
        out[better] = window[better]
        arg[better] = k

    def backward(dout: np.ndarray):
        d_xp = np.zeros((b, c, length + 2 * pad), dtype=dout.dtype)
        for k in range(kernel):
            d_xp[:, :, k : k + stride * l_out : stride] += dout * (arg == k)
        return (d_xp[:, :, pad : pad + length] if pad else d_xp,)

    return make_op_output(out, [x], backward)


def maxpool2d(
    x: Tensor,
    kernel: tuple[int, int],
    stride: tuple[int, int] | None = None,
    pad: tuple[int, int] = (0, 0),
) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B,C,H,W), got {x.shape}")
    kh, kw = kernel
    sh, sw = (kh, kw) if stride is None else stride
    ph, pw = pad
    b, c, height, width = x.shape
    if height + 2 * ph < kh or width + 2 * pw < kw:
        raise ShapeError(f"maxpool2d input {height}x{width} too small for kernel {kernel}")
    h_out = (height + 2 * ph - kh) // sh + 1
    w_out = (width + 2 * pw - kw) // sw + 1
    if ph or pw:
        xp = np.full((b, c, height + 2 * ph, width + 2 * pw), -np.inf, dtype=x.dtype)
        xp[:, :, ph : ph + height, pw : pw + width] = x.data
    else:
        xp = x.data

    out = np.full((b, c, h_out, w_out), -np.inf, dtype=x.dtype)
    arg = np.zeros((b, c, h_out, w_out), dtype=np.int16)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i : i + sh * h_out : sh, j : j + sw * w_out : sw]
            better = window > out
            out[better] = window[better]
            arg[better] = i * kw + j

    def backward(dout: np.ndarray):
        d_xp = np.zeros((b, c, height + 2 * ph, width + 2 * pw), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i : i + sh * h_out : sh, j : j + sw * w_out : sw] += dout * (
                    arg == i * kw + j
                )
        return (d_xp[:, :, ph : ph + height, pw : pw + width] if (ph or pw) else d_xp,)

    return make_op_output(out, [x], backward)


# ---------------------------------------------------------------------------
# normalization and dense layers
# ---------------------------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over axis 1.

    In train mode the batch statistics normalize the input and the running
    buffers are updated in place (decay ``momentum`` on the old value); in
    eval mode the running buffers are used unchanged.
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects channel axis 1, got shape {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} != ({channels},)")
    axes = (0,) + tuple(range(2, x.ndim))
    n_reduce = int(np.prod([x.shape[a] for a in axes]))
    bshape = (1, channels) + (1,) * (x.ndim - 2)

    if train:
        if n_reduce < 2:
            raise ShapeError(
                f"batchnorm train mode needs >= 2 elements per channel, got {n_reduce}"
            )
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * x_hat + beta.data.reshape(bshape)

    def backward(dout: np.ndarray):
        d_gamma = (dout * x_hat).sum(axis=axes)
        d_beta = dout.sum(axis=axes)
        d_xhat = dout * gamma.data.reshape(bshape)
        if train:
            d_x = (
                d_xhat
                - d_xhat.mean(axis=axes, keepdims=True)
                - x_hat * (d_xhat * x_hat).mean(axis=axes, keepdims=True)
            ) * inv_std.reshape(bshape)
        else:
            d_x = d_xhat * inv_std.reshape(bshape)
        return d_x, d_gamma, d_beta

    return make_op_output(out, [x, gamma, beta], backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects (B,Din) and (Dout,Din), got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear feature mismatch: input {x.shape[1]} vs weight {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = [x, weight] if bias is None else [x, weight, bias]

    def backward(dout: np.ndarray):
        d_x = dout @ weight.data
        d_w = dout.T @ x.data
        if bias is None:
            return d_x, d_w
        return d_x, d_w, dout.sum(axis=0)

    return make_op_output(out, parents, backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum propagates NaN (np.where would silently zero it), so a
    # diverged activation surfaces in the loss instead of being masked.
    out = np.maximum(x.data, 0.0).astype(x.dtype, copy=False)

    def backward(dout: np.ndarray):
        return (dout * mask,)

    return make_op_output(out, [x], backward)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_expit(x.data)

    def backward(dout: np.ndarray):
        return (dout * s * (1.0 - s),)

    return make_op_output(s, [x], backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis`` (the time axis for attention weights)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(dout: np.ndarray):
        inner = (dout * s).sum(axis=axis, keepdims=True)
        return (s * (dout - inner),)

    return make_op_output(s, [x], backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(dout: np.ndarray):
        return dout, dout

    return make_op_output(out, [a, b], backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(dout: np.ndarray):
        return dout * b.data, dout * a.data

    return make_op_output(out, [a, b], backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def backward(dout: np.ndarray):
        return (dout * factor,)

    return make_op_output(out, [x], backward)


def sum_over_axis(x: Tensor, axis: int) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(dout: np.ndarray):
        return (np.broadcast_to(np.expand_dims(dout, axis), x.shape).copy(),)

    return make_op_output(out, [x], backward)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def backward(dout: np.ndarray):
        return (np.broadcast_to(np.expand_dims(dout / n, axis), x.shape).copy(),)

    return make_op_output(out, [x], backward)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for ndim {x.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(dout: np.ndarray):
        return (np.ascontiguousarray(dout.transpose(inverse)),)

    return make_op_output(out, [x], backward)


def transpose_c1t_to_1ct(x: Tensor) -> Tensor:
    """Relabel the front-end output (B, C, 1, T) as a 2D map (B, 1, C, T)."""
    if x.ndim != 4 or x.shape[2] != 1:
        raise ShapeError(f"expected (B,C,1,T), got {x.shape}")
    return permute(x, (0, 2, 1, 3))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(x.data).reshape(shape)
    orig = x.shape

    def backward(dout: np.ndarray):
        return (dout.reshape(orig),)

    return make_op_output(out, [x], backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(dout: np.ndarray):
        return tuple(np.ascontiguousarray(g) for g in np.split(dout, splits, axis=axis))

    return make_op_output(out, parts, backward)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_from_probability(t: Tensor, y) -> Tensor:
    """Multi-label cross entropy on probabilities: sum over classes, mean
    over the batch. Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS]
    before the logs; clamped entries get zero gradient."""
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"bce_from_probability expects (B,N) probabilities, got {t.shape}")
    if t.shape != y_arr.shape:
        raise ShapeError(f"bce_from_probability shape mismatch: {t.shape} vs {y_arr.shape}")
    batch = t.shape[0]
    lo, hi = BCE_EPS, 1.0 - BCE_EPS
    tc = np.clip(t.data, lo, hi)
    y_arr = y_arr.astype(t.dtype, copy=False)
    loss = -(np.log(tc) * y_arr + np.log1p(-tc) * (1.0 - y_arr)).sum() / batch
    out = np.asarray(loss, dtype=t.dtype)
    interior = (t.data >= lo) & (t.data <= hi)

    def backward(dout: np.ndarray):
        d_scale = np.asarray(dout).reshape(())
        d_t = -(y_arr / tc - (1.0 - y_arr) / (1.0 - tc)) * (d_scale / batch)
        return (d_t * interior,)

    return make_op_output(out, [t], backward)
