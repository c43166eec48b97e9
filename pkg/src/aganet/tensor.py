"""Dense float64 tensor kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in channels-first layout
``(C, T, W)`` or batched ``(N, C, T, W)``. Every op here is a pure function;
backward functions take the forward inputs (or a cache produced by the
forward) plus the upstream gradient and return gradients of the same shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


def as_tensor(values, shape=None, checked: bool = True) -> np.ndarray:
    """Convert ``values`` to a contiguous float64 array.

    With ``checked`` set, NaN and Inf are rejected. ``shape`` optionally
    reshapes a flat payload; its product must match the number of values.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ShapeError(f"shape {shape} holds {int(np.prod(shape))} values, got {arr.size}")
        arr = arr.reshape(shape)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"kernel sizes must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ValueError(f"strides must be >= 1, got ({self.stride_h}, {self.stride_w})")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError(f"pads must be >= 0, got ({self.pad_h}, {self.pad_w})")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @classmethod
    def same(cls, kernel_h, kernel_w, in_channels, out_channels, stride_h=1, stride_w=1):
        """Zero padding that preserves size at stride 1 (odd kernels)."""
        return cls(kernel_h, kernel_w, stride_h, stride_w, (kernel_h - 1) // 2,
                   (kernel_w - 1) // 2, in_channels, out_channels)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def num_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_channels

    def output_size(self, h: int, w: int):
        ho = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        wo = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w} "
                             f"with pad ({self.pad_h}, {self.pad_w}): output {ho}x{wo}")
        return ho, wo


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")


def _check_conv_args(c_in, spec: ConvSpec, weight, bias):
    if c_in != spec.in_channels:
        raise ShapeError(f"input has {c_in} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != expected ({spec.out_channels},)")


def _im2col(x, spec: ConvSpec):
    """Columns (C*kh*kw, N*Ho*Wo) of a channel-major (C, N, H, W) input."""
    c, n, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    if spec.pad_h or spec.pad_w:
        xp = np.zeros((c, n, h + 2 * spec.pad_h, w + 2 * spec.pad_w))
        xp[:, :, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + w] = x
        x = xp
    if spec.kernel_h == spec.kernel_w == spec.stride_h == spec.stride_w == 1:
        return x.reshape(c, n * ho * wo), (ho, wo)
    sh, sw = spec.stride_h, spec.stride_w
    cols = np.empty((c, spec.kernel_h, spec.kernel_w, n, ho, wo))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            cols[:, i, j] = x[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * spec.kernel_h * spec.kernel_w, n * ho * wo), (ho, wo)


def _col2im(dcols, x_shape, spec: ConvSpec, out_hw):
    c, n, h, w = x_shape
    ho, wo = out_hw
    if spec.kernel_h == spec.kernel_w == spec.stride_h == spec.stride_w == 1:
        return dcols.reshape(c, n, h + 2 * spec.pad_h, w + 2 * spec.pad_w)[
            :, :, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + w]
    sh, sw = spec.stride_h, spec.stride_w
    dcols = dcols.reshape(c, spec.kernel_h, spec.kernel_w, n, ho, wo)
    dx = np.zeros((c, n, h + 2 * spec.pad_h, w + 2 * spec.pad_w))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dcols[:, i, j]
    return dx[:, :, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + w]


def conv2d_cnhw(x, spec: ConvSpec, weight, bias):
    """Convolution on a channel-major ``(C, N, H, W)`` batch; returns ``(out, cache)``.

    This is the layout the model keeps internally: the im2col slices and the
    GEMM output need no transposes.
    """
    _check_conv_args(x.shape[0], spec, weight, bias)
    cols, (ho, wo) = _im2col(x, spec)
    out = weight.reshape(spec.out_channels, -1) @ cols
    out = out.reshape(spec.out_channels, x.shape[1], ho, wo)
    if bias is not None:
        out += bias[:, None, None, None]
    return out, (cols, x.shape, (ho, wo))


def conv2d_cnhw_backward(cache, spec: ConvSpec, weight, upstream):
    cols, x_shape, out_hw = cache
    expected = (spec.out_channels, x_shape[1]) + tuple(out_hw)
    if upstream.shape != expected:
        raise ShapeError(f"upstream gradient shape {tuple(upstream.shape)} != forward output "
                         f"{expected}")
    g2 = upstream.reshape(spec.out_channels, -1)
    grad_w = (g2 @ cols.T).reshape(spec.weight_shape)
    grad_b = upstream.sum(axis=(1, 2, 3))
    dcols = weight.reshape(spec.out_channels, -1).T @ g2
    return _col2im(dcols, x_shape, spec, out_hw), grad_w, grad_b


def conv2d(x, spec: ConvSpec, weight, bias):
    """2D cross-correlation with zero padding.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``weight`` is
    ``(C_out, C_in, kernel_h, kernel_w)`` and ``bias`` has length ``C_out``.
    """
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64))
    out, _ = conv2d_cnhw(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), spec,
                         np.asarray(weight, dtype=np.float64),
                         None if bias is None else np.asarray(bias, dtype=np.float64))
    out = out.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[0] if squeeze else out)


def conv2d_backward(x, spec: ConvSpec, weight, upstream):
    """Gradients ``(grad_input, grad_weight, grad_bias)`` of :func:`conv2d`."""
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64))
    gb, _ = _batched(np.asarray(upstream, dtype=np.float64))
    weight = np.asarray(weight, dtype=np.float64)
    _, cache = conv2d_cnhw(np.ascontiguousarray(xb.transpose(1, 0, 2, 3)), spec, weight, None)
    gx, gw, gbias = conv2d_cnhw_backward(
        cache, spec, weight, np.ascontiguousarray(gb.transpose(1, 0, 2, 3)))
    gx = gx.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx[0] if squeeze else gx), gw, gbias


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, upstream):
    """Backward given the sigmoid *output* ``y``."""
    return upstream * y * (1.0 - y)


def pool_time(x, mode: str = "max", full_extent: bool = True):
    """Collapse the T axis (second to last) to length 1 by max or mean.

    Returns ``(pooled, cache)``; pass the cache to :func:`pool_time_backward`.
    """
    if not full_extent:
        raise NotImplementedError("only full-extent temporal pooling is supported")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.ndim < 2:
        raise ShapeError(f"cannot pool empty tensor of shape {x.shape}")
    t_axis = x.ndim - 2
    if mode == "max":
        # argmax picks the first maximum, which is the index that gets the gradient
        idx = np.argmax(x, axis=t_axis)
        out = np.take_along_axis(x, np.expand_dims(idx, t_axis), axis=t_axis)
        return out, ("max", x.shape, idx)
    if mode == "avg":
        return x.mean(axis=t_axis, keepdims=True), ("avg", x.shape, None)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_time_backward(cache, upstream):
    mode, shape, idx = cache
    t_axis = len(shape) - 2
    if mode == "avg":
        return np.broadcast_to(upstream / shape[t_axis], shape).copy()
    grad = np.zeros(shape)
    np.put_along_axis(grad, np.expand_dims(idx, t_axis), upstream, axis=t_axis)
    return grad


def upsample_time(x, factor: int):
    """Nearest-neighbour repetition along T: ``[a, b]`` -> ``[a, a, b, b]``."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    return np.repeat(x, factor, axis=x.ndim - 2)


def upsample_time_backward(upstream, factor: int):
    t_axis = upstream.ndim - 2
    t = upstream.shape[t_axis] // factor
    shape = upstream.shape[:t_axis] + (t, factor) + upstream.shape[t_axis + 1:]
    return upstream.reshape(shape).sum(axis=t_axis + 1)
