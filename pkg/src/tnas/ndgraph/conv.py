"""Same-size 2-d convolution and sub-pixel rearrangement, with gradients.

Convolution is plain cross-correlation with zero padding, stride 1 and odd
kernels only. Calls lower to matrix products: 1x1 kernels are a pure
channel matmul, depthwise kernels shift-and-accumulate, and the general
case gathers sliding windows once per call (channels-last, tap-major) and
multiplies. The input gradient is itself a same-size correlation with the
flipped transposed kernel, so backward reuses the forward machinery. All of
it is the direct computation, just vectorized so desk-scale training stays
inside numpy.
"""

from __future__ import annotations

import numpy as np

from .tensor import from_op

__all__ = ["conv2d", "pixel_shuffle", "space_to_depth", "conv2d_raw"]

# forward-call counter, resettable; lets tests probe which parts of a model
# actually executed
CONV_CALLS = 0


def _validate(x, kernel, bias, padding, groups):
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-d [N,Cin,H,W], got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d [Cout,Cin/groups,k,k], got rank {kernel.ndim}")
    cout, cg, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got {kh}")
    if padding != (kh - 1) // 2:
        raise ValueError(f"conv2d: padding must be (k-1)/2={(kh - 1) // 2} for same-size output, got {padding}")
    cin = x.shape[1]
    if cin % groups != 0:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups {groups}")
    if cg != cin // groups:
        raise ValueError(
            f"conv2d: kernel channel dim {cg} does not match input channels/groups {cin}//{groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match output channels ({cout},)")


def _is_depthwise(x, kernel, groups):
    return groups > 1 and groups == x.shape[1] and kernel.shape[0] == groups and kernel.shape[1] == 1


def _to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _gather_taps(x, k, pad):
    """Sliding windows as [N*H*W, k*k*C], tap-major then channel."""
    n, c, h, w = x.shape
    xpt = np.pad(_to_nhwc(x), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, h, w, k * k, c), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a * k + b, :] = xpt[:, a : a + h, b : b + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _fwd_1x1(x, kernel):
    n, c, h, w = x.shape
    cout = kernel.shape[0]
    cols = _to_nhwc(x).reshape(n * h * w, c)
    y = cols @ kernel.reshape(cout, c).T
    return _to_nchw(y.reshape(n, h, w, cout)), cols


def _fwd_depthwise(x, kernel, pad):
    n, c, h, w = x.shape
    k = kernel.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    y = np.zeros((n, c, h, w), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            y += xp[:, :, a : a + h, b : b + w] * kernel[None, :, 0, a, b, None, None]
    return y


def _kernel_tap_major(kernel):
    """[Cout, Cin, k, k] -> [Cout, k*k*Cin] matching ``_gather_taps``."""
    cout, cin, k, _ = kernel.shape
    return np.ascontiguousarray(kernel.transpose(0, 2, 3, 1)).reshape(cout, k * k * cin)


def _fwd_general(x, kernel, pad, groups):
    n, cin, h, w = x.shape
    cout, cg, k, _ = kernel.shape
    if groups == 1:
        cols = _gather_taps(x, k, pad)  # [NHW, k*k*Cin]
        y = cols @ _kernel_tap_major(kernel).T
        return _to_nchw(y.reshape(n, h, w, cout)), cols
    og = cout // groups
    cols = _gather_taps(x, k, pad).reshape(n * h * w, k * k, groups, cg)
    colg = np.ascontiguousarray(cols.transpose(2, 0, 1, 3)).reshape(groups, n * h * w, k * k * cg)
    wg = kernel.reshape(groups, og, cg, k, k).transpose(0, 1, 3, 4, 2).reshape(groups, og, k * k * cg)
    y = np.matmul(colg, wg.transpose(0, 2, 1))  # [g, NHW, og]
    y = y.transpose(1, 0, 2).reshape(n, h, w, cout)
    return _to_nchw(y), colg


def _cache_get(cache, key, x):
    # entries carry the source array: a swapped x.data invalidates them
    if cache is None:
        return None
    ent = cache.get(key)
    if ent is not None and ent[0] is x:
        return ent[1]
    return None


def _forward(x, kernel, bias, padding, groups, want_cols=False, cache=None):
    global CONV_CALLS
    CONV_CALLS += 1
    k = kernel.shape[-1]
    cols = None
    if k == 1 and groups == 1:
        key = ("nhwc",)
        cols = _cache_get(cache, key, x)
        if cols is not None:
            n, c, h, w = x.shape
            y = _to_nchw((cols @ kernel.reshape(kernel.shape[0], c).T).reshape(n, h, w, -1))
        else:
            y, cols = _fwd_1x1(x, kernel)
            if cache is not None:
                cache[key] = (x, cols)
    elif _is_depthwise(x, kernel, groups):
        y = _fwd_depthwise(x, kernel, padding)
    else:
        key = ("taps", k, padding, groups)
        cols = _cache_get(cache, key, x) if groups == 1 else None
        if cols is not None:
            n, c, h, w = x.shape
            y = _to_nchw((cols @ _kernel_tap_major(kernel).T).reshape(n, h, w, -1))
        else:
            y, cols = _fwd_general(x, kernel, padding, groups)
            if groups == 1 and cache is not None:
                cache[key] = (x, cols)
    if bias is not None:
        y += bias[None, :, None, None]
    return (y, cols) if want_cols else y


def conv2d_raw(x, kernel, bias=None, padding=None, groups=1):
    """Forward-only convolution on plain numpy arrays (no graph)."""
    k = kernel.shape[-1]
    if padding is None:
        padding = (k - 1) // 2
    _validate(x, kernel, bias, padding, groups)
    return _forward(x, kernel, bias, padding, groups)


def _flip_transpose(kernel):
    """Kernel of the input-gradient correlation: swap in/out, rotate 180."""
    return np.ascontiguousarray(kernel.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv2d(x, kernel, bias=None, padding=None, groups=1):
    """Same-size cross-correlation: [N,Cin,H,W] -> [N,Cout,H,W].

    Gradients are defined w.r.t. input, kernel and bias. ``groups`` covers
    the depthwise case (groups == Cin, kernel [C,1,k,k]).
    """
    k = kernel.data.shape[-1]
    if padding is None:
        padding = (k - 1) // 2
    _validate(x.data, kernel.data, None if bias is None else bias.data, padding, groups)
    y, cols = _forward(x.data, kernel.data, None if bias is None else bias.data, padding, groups,
                       want_cols=True, cache=x.op_cache())

    xd, kd = x.data, kernel.data
    n, cin, h, w = xd.shape
    cout, cg, _, _ = kd.shape
    depthwise = _is_depthwise(xd, kd, groups)

    def bw(g):
        need_x = x.requires_grad or x.tape is not None
        need_k = kernel.requires_grad or kernel.tape is not None
        if k == 1 and groups == 1:
            gm = _to_nhwc(g).reshape(n * h * w, cout)
            if need_k:
                kernel.accumulate_grad((gm.T @ cols).reshape(kd.shape))
            if need_x:
                dx = (gm @ kd.reshape(cout, cin)).reshape(n, h, w, cin)
                x.accumulate_grad(_to_nchw(dx))
        elif depthwise:
            if need_k:
                xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
                dk = np.empty_like(kd)
                for a in range(k):
                    for b in range(k):
                        dk[:, 0, a, b] = np.einsum(
                            "nchw,nchw->c", g, xp[:, :, a : a + h, b : b + w]
                        )
                kernel.accumulate_grad(dk)
            if need_x:
                kf = np.ascontiguousarray(kd[:, :, ::-1, ::-1])
                x.accumulate_grad(_fwd_depthwise(g, kf, padding))
        elif groups == 1:
            if need_k:
                gm = _to_nhwc(g).reshape(n * h * w, cout)
                dk = (gm.T @ cols).reshape(cout, k, k, cg)
                kernel.accumulate_grad(np.ascontiguousarray(dk.transpose(0, 3, 1, 2)))
            if need_x:
                x.accumulate_grad(_forward(g, _flip_transpose(kd), None, padding, 1))
        else:
            og = cout // groups
            gm = _to_nhwc(g).reshape(n * h * w, groups, og).transpose(1, 0, 2)  # [g,NHW,og]
            if need_k:
                dk = np.matmul(gm.transpose(0, 2, 1), cols)  # [g, og, k*k*cg]
                dk = dk.reshape(groups * og, k, k, cg).transpose(0, 3, 1, 2)
                kernel.accumulate_grad(np.ascontiguousarray(dk))
            if need_x:
                # grouped input gradient: per-group flipped correlation
                kf = kd.reshape(groups, og, cg, k, k)[:, :, :, ::-1, ::-1]
                kft = kf.transpose(0, 2, 1, 3, 4).reshape(groups * cg, og, k, k)
                gg = g.reshape(n, groups, og, h, w)
                dx = np.empty((n, groups, cg, h, w), dtype=g.dtype)
                for gi in range(groups):
                    dx[:, gi] = _forward(
                        gg[:, gi], kft[gi * cg : (gi + 1) * cg], None, padding, 1
                    )
                x.accumulate_grad(dx.reshape(n, cin, h, w))
        if bias is not None and (bias.requires_grad or bias.tape is not None):
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return from_op(y, parents, bw)


def pixel_shuffle(x, n):
    """Depth-to-space: [N, C*n^2, H, W] -> [N, C, n*H, n*W]."""
    n = int(n)
    bn, c, h, w = x.data.shape
    if c % (n * n) != 0:
        raise ValueError(f"pixel_shuffle: channels {c} not divisible by n^2={n * n}")
    co = c // (n * n)

    def bw(g):
        x.accumulate_grad(
            g.reshape(bn, co, h, n, w, n).transpose(0, 1, 3, 5, 2, 4).reshape(bn, c, h, w)
        )

    y = x.data.reshape(bn, co, n, n, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(bn, co, h * n, w * n)
    return from_op(y, (x,), bw)


def space_to_depth(y, n):
    """Exact inverse of ``pixel_shuffle`` on plain arrays (no graph)."""
    n = int(n)
    bn, c, hh, ww = y.shape
    if hh % n != 0 or ww % n != 0:
        raise ValueError(f"space_to_depth: spatial dims {hh}x{ww} not divisible by {n}")
    h, w = hh // n, ww // n
    return y.reshape(bn, c, h, n, w, n).transpose(0, 1, 3, 5, 2, 4).reshape(bn, c * n * n, h, w)
