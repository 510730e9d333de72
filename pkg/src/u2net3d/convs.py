"""3D convolution operations (forward + reverse rules) on C×D×H×W tensors.

Standard 3x3x3 convolutions route through an im2col buffer and a single BLAS
matmul; channel-wise and transposed convolutions use small fixed loops over
kernel offsets acting on strided views. Reduction orders are fixed, so outputs
are bit-deterministic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, astensor, record_op

_AXES = ("depth", "height", "width")


def _check_volume(x: Tensor, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be C×D×H×W (4 axes), got {x.ndim} axes {x.shape}")


def _pad_spatial(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _im2col3(xp: np.ndarray, stride: int):
    """Padded (C,Dp,Hp,Wp) -> ((C*27, N) column matrix, output spatial shape)."""
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    out_sp = win.shape[1:4]
    col = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(xp.shape[0] * 27, -1)
    return np.ascontiguousarray(col), out_sp


def _col2im3(colg: np.ndarray, c: int, padded_sp, out_sp, stride: int, pad: int) -> np.ndarray:
    buf = np.zeros((c,) + tuple(padded_sp), dtype=colg.dtype)
    v = colg.reshape(c, 3, 3, 3, *out_sp)
    do, ho, wo = out_sp
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                buf[
                    :,
                    kd : kd + stride * do : stride,
                    kh : kh + stride * ho : stride,
                    kw : kw + stride * wo : stride,
                ] += v[:, kd, kh, kw]
    if pad:
        return buf[:, pad:-pad, pad:-pad, pad:-pad]
    return buf


def conv3d(x, w, stride: int = 1, padding: str = "same") -> Tensor:
    """Standard cross-correlation with a C'×C×3×3×3 filter bank, no bias.

    "same" zero-pads by 1 so stride-1 output matches the input spatially and
    stride-2 halves each extent (ceiling division).
    """
    x, w = astensor(x), astensor(w)
    _check_volume(x, "conv3d input")
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d weights must be C'×C×3×3×3, got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv3d channel mismatch on input axis 0: input has {x.shape[0]} "
            f"channels, weights expect {w.shape[1]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv3d stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv3d padding must be 'same' or 'valid', got {padding!r}")
    pad = 1 if padding == "same" else 0
    if pad == 0:
        for ax in range(3):
            if x.shape[1 + ax] < 3:
                raise ShapeError(
                    f"conv3d 'valid' needs {_AXES[ax]} extent >= 3, got {x.shape[1 + ax]}"
                )
    cin = x.shape[0]
    cout = w.shape[0]
    xp = _pad_spatial(x.data, pad)
    col, out_sp = _im2col3(xp, stride)
    w2 = w.data.reshape(cout, cin * 27)
    out = Tensor((w2 @ col).reshape((cout,) + out_sp))

    def vjp(g):
        gm = g.reshape(cout, -1)
        gw = gx = None
        if w.requires_grad:
            col_b, _ = _im2col3(xp, stride)
            gw = (gm @ col_b.T).reshape(w.shape)
        if x.requires_grad:
            colg = w2.T @ gm
            gx = _col2im3(colg, cin, xp.shape[1:], out_sp, stride, pad)
        return (gx, gw)

    return record_op(out, [x, w], vjp)


def channelwise_conv3d(x, w) -> Tensor:
    """One 3x3x3 filter per channel, stride 1, "same"; no cross-channel mixing."""
    x, w = astensor(x), astensor(w)
    _check_volume(x, "channelwise_conv3d input")
    c = x.shape[0]
    if w.shape != (c, 3, 3, 3):
        raise ShapeError(
            f"channelwise_conv3d needs one 3×3×3 filter per channel: input has "
            f"{c} channels, weights are {w.shape}"
        )
    d, h, wd = x.shape[1:]
    xp = _pad_spatial(x.data, 1)
    out_data = np.zeros_like(x.data)
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                out_data += w.data[:, kd, kh, kw].reshape(c, 1, 1, 1) * xp[
                    :, kd : kd + d, kh : kh + h, kw : kw + wd
                ]
    out = Tensor(out_data)

    def vjp(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for kd in range(3):
                for kh in range(3):
                    for kw in range(3):
                        gw[:, kd, kh, kw] = np.einsum(
                            "cdhw,cdhw->c", xp[:, kd : kd + d, kh : kh + h, kw : kw + wd], g
                        )
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for kd in range(3):
                for kh in range(3):
                    for kw in range(3):
                        gp[:, kd : kd + d, kh : kh + h, kw : kw + wd] += (
                            w.data[:, kd, kh, kw].reshape(c, 1, 1, 1) * g
                        )
            gx = gp[:, 1:-1, 1:-1, 1:-1]
        return (gx, gw)

    return record_op(out, [x, w], vjp)


def pointwise_conv3d(x, w) -> Tensor:
    """1x1x1 convolution: per-voxel linear mix of channels with a C'×C matrix."""
    x, w = astensor(x), astensor(w)
    _check_volume(x, "pointwise_conv3d input")
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"pointwise_conv3d weights must be C'×C with C={x.shape[0]}, got {w.shape}"
        )
    out = Tensor(np.tensordot(w.data, x.data, axes=([1], [0])))

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.tensordot(w.data.T, g, axes=([1], [0]))
        if w.requires_grad:
            gw = np.tensordot(g, x.data, axes=([1, 2, 3], [1, 2, 3]))
        return (gx, gw)

    return record_op(out, [x, w], vjp)


def transposed_conv3d(x, w) -> Tensor:
    """Stride-2 transposed convolution with a non-overlapping 2x2x2 kernel.

    Weights are C×C'×2×2×2; every input voxel scatters into one 2x2x2 output
    block, so spatial extents exactly double.
    """
    x, w = astensor(x), astensor(w)
    _check_volume(x, "transposed_conv3d input")
    if w.ndim != 5 or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"transposed_conv3d weights must be C×C'×2×2×2, got {w.shape}")
    if w.shape[0] != x.shape[0]:
        raise ShapeError(
            f"transposed_conv3d channel mismatch on input axis 0: input has "
            f"{x.shape[0]} channels, weights expect {w.shape[0]}"
        )
    cout = w.shape[1]
    d, h, wd = x.shape[1:]
    out_data = np.empty((cout, 2 * d, 2 * h, 2 * wd), dtype=x.dtype)
    for kd in range(2):
        for kh in range(2):
            for kw in range(2):
                out_data[:, kd::2, kh::2, kw::2] = np.tensordot(
                    w.data[:, :, kd, kh, kw], x.data, axes=([0], [0])
                )
    out = Tensor(out_data)

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for kd in range(2):
                for kh in range(2):
                    for kw in range(2):
                        gx += np.tensordot(
                            w.data[:, :, kd, kh, kw], g[:, kd::2, kh::2, kw::2], axes=([1], [0])
                        )
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for kd in range(2):
                for kh in range(2):
                    for kw in range(2):
                        gw[:, :, kd, kh, kw] = np.tensordot(
                            x.data, g[:, kd::2, kh::2, kw::2], axes=([1, 2, 3], [1, 2, 3])
                        )
        return (gx, gw)

    return record_op(out, [x, w], vjp)


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbor doubling of all three spatial extents."""
    x = astensor(x)
    _check_volume(x, "upsample_nearest2x input")
    out_data = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    out = Tensor(out_data)
    c, d, h, w = x.shape

    def vjp(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return record_op(out, [x], vjp)
