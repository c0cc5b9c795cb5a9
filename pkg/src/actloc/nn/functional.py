"""Forward and vector-Jacobian kernels for the layer set.

Tensors are float64 numpy arrays in channels-last layout
``(batch, time, height, width, channels)``. Each ``*_forward`` returns the
output together with whatever the matching ``*_backward`` needs.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
_AXES = ("time", "height", "width")


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def output_extent(size, kernel, stride, padding):
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def same_pads(size, kernel, stride):
    """(before, after) zero padding; the odd element goes on the trailing side."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def pad_volume(x, kernel, stride, padding):
    if padding == "valid":
        return x, ((0, 0),) * 3
    pads = tuple(same_pads(x.shape[1 + i], kernel[i], stride[i]) for i in range(3))
    if not any(p for pair in pads for p in pair):
        return x, pads
    return np.pad(x, ((0, 0),) + pads + ((0, 0),)), pads


def _windows(xp, kernel, stride, out_shape):
    """Strided (N, To, Ho, Wo, C, kt, kh, kw) view of all kernel windows."""
    view = sliding_window_view(xp, kernel, axis=(1, 2, 3))
    to, ho, wo = out_shape
    return view[:, : (to - 1) * stride[0] + 1 : stride[0],
                : (ho - 1) * stride[1] + 1 : stride[1],
                : (wo - 1) * stride[2] + 1 : stride[2]]


def conv3d_forward(x, weight, bias, stride=1, padding="same"):
    """Cross-correlation over (time, height, width).

    ``weight`` has shape ``(kt, kh, kw, c_in, c_out)``.
    """
    if x.ndim != 5:
        raise ValueError(f"conv3d expects a rank-5 input, got rank {x.ndim}")
    kernel = weight.shape[:3]
    stride = _triple(stride)
    if x.shape[4] != weight.shape[3]:
        raise ValueError(
            f"channel axis mismatch: input has {x.shape[4]}, kernel expects {weight.shape[3]}"
        )
    xp, pads = pad_volume(x, kernel, stride, padding)
    out_shape = []
    for i, name in enumerate(_AXES):
        if xp.shape[1 + i] < kernel[i]:
            raise ValueError(
                f"{name} axis too small: extent {x.shape[1 + i]} < kernel {kernel[i]}"
            )
        out_shape.append((xp.shape[1 + i] - kernel[i]) // stride[i] + 1)
    win = _windows(xp, kernel, stride, out_shape)
    n = x.shape[0]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(-1, int(np.prod(weight.shape[:4])))
    out = cols @ weight.reshape(-1, weight.shape[4])
    if bias is not None:
        out += bias
    out = out.reshape(n, *out_shape, weight.shape[4])
    record = {"cols": cols, "xp_shape": xp.shape, "pads": pads, "stride": stride,
              "in_shape": x.shape}
    return out, record


def conv3d_backward(g, weight, record, input_grad=True):
    cols = record["cols"]
    stride = record["stride"]
    kt, kh, kw, cin, cout = weight.shape
    g2 = g.reshape(-1, cout)
    dweight = (cols.T @ g2).reshape(weight.shape)
    dbias = g2.sum(axis=0)
    if not input_grad:
        return None, dweight, dbias
    # one contiguous (N, To, Ho, Wo, C_in) slab per kernel offset
    wk = weight.reshape(kt * kh * kw, cin, cout)
    dcols = np.einsum("mo,kco->kmc", g2, wk, optimize=True)
    dcols = dcols.reshape(kt, kh, kw, *g.shape[:4], cin)
    dxp = np.zeros(record["xp_shape"])
    to, ho, wo = g.shape[1:4]
    st, sh, sw = stride
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                dxp[:, i : i + (to - 1) * st + 1 : st,
                    j : j + (ho - 1) * sh + 1 : sh,
                    k : k + (wo - 1) * sw + 1 : sw] += dcols[i, j, k]
    (pt, _), (ph, _), (pw, _) = record["pads"]
    t, h, w = record["in_shape"][1:4]
    dx = dxp[:, pt : pt + t, ph : ph + h, pw : pw + w]
    return dx, dweight, dbias


def maxpool3d_forward(x, window, stride=None):
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if min(window) < 1 or min(stride) < 1:
        raise ValueError("pooling window and stride must be positive")
    out_shape = []
    for i, name in enumerate(_AXES):
        if x.shape[1 + i] < window[i]:
            raise ValueError(f"{name} axis too small for pooling window {window[i]}")
        out_shape.append((x.shape[1 + i] - window[i]) // stride[i] + 1)
    win = _windows(x, window, stride, out_shape)
    flat = win.reshape(*win.shape[:5], -1)
    # argmax returns the first maximal element: lowest linear index in the window
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, {"arg": arg, "window": window, "stride": stride, "in_shape": x.shape}


def maxpool3d_backward(g, record):
    arg = record["arg"]
    kt, kh, kw = record["window"]
    st, sh, sw = record["stride"]
    to, ho, wo = g.shape[1:4]
    dx = np.zeros(record["in_shape"])
    offset = 0
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                dx[:, i : i + (to - 1) * st + 1 : st,
                   j : j + (ho - 1) * sh + 1 : sh,
                   k : k + (wo - 1) * sw + 1 : sw] += np.where(arg == offset, g, 0.0)
                offset += 1
    return dx


def batchnorm_frozen_forward(x, scale, offset, mean, var, eps=BN_EPS):
    denom = var + eps
    if np.any(denom <= 0):
        raise ValueError("batch norm variance + eps must be positive")
    inv = 1.0 / np.sqrt(denom)
    xhat = (x - mean) * inv
    return scale * xhat + offset, {"xhat": xhat, "inv": inv}


def batchnorm_frozen_backward(g, scale, record):
    axes = tuple(range(g.ndim - 1))
    dscale = (g * record["xhat"]).sum(axis=axes)
    doffset = g.sum(axis=axes)
    return g * (scale * record["inv"]), dscale, doffset


def relu_forward(x):
    return np.maximum(x, 0.0), {"mask": x > 0}


def relu_backward(g, record):
    return g * record["mask"]


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, {"y": y}


def sigmoid_backward(g, record):
    y = record["y"]
    return g * y * (1.0 - y)


def linear_forward(x, weight, bias):
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"linear inner extent mismatch: input has {x.shape[-1]}, weight expects {weight.shape[0]}"
        )
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out, {"x": x}


def linear_backward(g, weight, record):
    x = record["x"]
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return g @ weight.T, x2.T @ g2, g2.sum(axis=0)


def global_avg_pool_forward(x):
    """Mean over every axis between batch and channels."""
    axes = tuple(range(1, x.ndim - 1))
    return x.mean(axis=axes), {"shape": x.shape}


def global_avg_pool_backward(g, record):
    shape = record["shape"]
    cells = int(np.prod(shape[1:-1]))
    expand = g.reshape(shape[0], *([1] * (len(shape) - 2)), shape[-1])
    return np.broadcast_to(expand / cells, shape).copy()
