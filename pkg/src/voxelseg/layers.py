"""Differentiable layer kernel: 2D/3D convolution, max-pooling, fully
connected, ReLU, softmax and concatenation.

Conventions
-----------
* Convolution is valid (no padding) cross-correlation: the kernel is not
  flipped.  Learned kernels make the orientation immaterial; the test
  oracles use the same convention.
* Every op accepts either a single datapoint at the documented rank or a
  batch with one extra leading axis.
* Backward passes compute gradients of ``sum(upstream * forward(x))``.
* Max-pooling records the window argmax; ties resolve to the lowest
  linear index inside the window.  ReLU's subgradient at 0 is 0.

Dtype follows the input: float32 in production, float64 for gradient
checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class ConvLayer:
    """Convolution kernels (n_out, n_in, t, t) or (n_out, n_in, t, t, t)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim not in (4, 5):
            raise ValueError(f"conv weights must be rank 4 or 5, got {self.weights.ndim}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal the output map count")

    @property
    def t(self) -> int:
        return self.weights.shape[-1]

    @property
    def spatial_ndim(self) -> int:
        return self.weights.ndim - 2


@dataclass
class FullLayer:
    """Affine map weights (n_out, n_in) and bias (n_out,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("inconsistent fully-connected shapes")


class GradientTape(dict):
    """Per-parameter gradient buffers, keyed like the parameter store."""

    @classmethod
    def for_params(cls, params: dict) -> "GradientTape":
        return cls({k: np.zeros_like(v) for k, v in params.items()})

    def zero(self) -> None:
        for v in self.values():
            v[...] = 0

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self[name] += grad


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected rank {rank} or {rank + 1}, got {x.ndim}")


def _unbatch(y, squeeze):
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_forward(x, layer, nd):
    x, squeeze = _batched(x, nd + 1)
    w, b = layer.weights, layer.bias
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} maps, kernels expect {w.shape[1]}")
    t = layer.t
    if any(s < t for s in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} smaller than kernel side {t}")
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(x, (t,) * nd, axis=axes)
    # contract (in_maps, window) against the kernels -> (B, spatial..., out)
    in_axes = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    k_axes = tuple(range(1, 2 + nd))
    out = np.tensordot(win, w, axes=(in_axes, k_axes))
    out = np.moveaxis(out, -1, 1)
    out += b.reshape((1, -1) + (1,) * nd)
    return _unbatch(out, squeeze)


def _conv_backward(x, layer, upstream, nd):
    x, squeeze = _batched(x, nd + 1)
    upstream, _ = _batched(upstream, nd + 1)
    w = layer.weights
    t = layer.t
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(x, (t,) * nd, axis=axes)
    if upstream.shape != (x.shape[0], w.shape[0]) + win.shape[2 : 2 + nd]:
        raise ValueError(
            f"upstream shape {upstream.shape} inconsistent with forward output"
        )

    grad_b = upstream.sum(axis=(0,) + axes)

    # (B, spatial) contracted out -> (in, window..., out) -> (out, in, window...)
    batch_axes = (0,) + axes
    grad_w = np.tensordot(win, upstream, axes=(batch_axes, batch_axes))
    grad_w = np.moveaxis(grad_w, -1, 0)

    # full correlation of the padded upstream with flipped kernels
    pad = ((0, 0), (0, 0)) + ((t - 1, t - 1),) * nd
    up_pad = np.pad(upstream, pad)
    win_u = sliding_window_view(up_pad, (t,) * nd, axis=axes)
    flip = w[(slice(None), slice(None)) + (slice(None, None, -1),) * nd]
    out_axes = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    k_axes = (0,) + tuple(range(2, 2 + nd))
    grad_x = np.tensordot(win_u, flip, axes=(out_axes, k_axes))
    grad_x = np.moveaxis(grad_x, -1, 1)
    return _unbatch(grad_x, squeeze), grad_w, grad_b


def conv2d_forward(x, layer: ConvLayer):
    """x: (maps_in, H, W) -> (maps_out, H-t+1, W-t+1); batch axis optional."""
    return _conv_forward(x, layer, 2)


def conv2d_backward(x, layer: ConvLayer, upstream):
    return _conv_backward(x, layer, upstream, 2)


def conv3d_forward(x, layer: ConvLayer):
    """x: (maps_in, D, H, W) -> valid cross-correlation output."""
    return _conv_forward(x, layer, 3)


def conv3d_backward(x, layer: ConvLayer, upstream):
    return _conv_backward(x, layer, upstream, 3)


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------


def _pool_blocks(x, p, nd):
    lead = x.shape[:-nd]
    spatial = x.shape[-nd:]
    if any(s % p for s in spatial):
        raise ValueError(f"spatial sides {spatial} not divisible by pool side {p}")
    split = lead + tuple(q for s in spatial for q in (s // p, p))
    xr = x.reshape(split)
    k = len(lead)
    src = [k + 2 * i + 1 for i in range(nd)]
    dst = [len(split) - nd + i for i in range(nd)]
    xr = np.moveaxis(xr, src, dst)
    out_spatial = tuple(s // p for s in spatial)
    return np.ascontiguousarray(xr).reshape(lead + out_spatial + (p**nd,)), out_spatial


def _maxpool_forward(x, p, nd):
    x, squeeze = _batched(x, nd + 1)
    blocks, _ = _pool_blocks(x, p, nd)
    argmax = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return _unbatch(y, squeeze), _unbatch(argmax, squeeze)


def _maxpool_backward(argmax, upstream, p, nd):
    upstream, squeeze = _batched(upstream, nd + 1)
    argmax, _ = _batched(argmax, nd + 1)
    blocks = np.zeros(upstream.shape + (p**nd,), dtype=upstream.dtype)
    np.put_along_axis(blocks, argmax[..., None], upstream[..., None], axis=-1)
    lead = upstream.shape[:-nd]
    out_spatial = upstream.shape[-nd:]
    interleaved = lead + tuple(q for s in out_spatial for q in (s, p))
    k = len(lead)
    src = [len(interleaved) - nd + i for i in range(nd)]
    dst = [k + 2 * i + 1 for i in range(nd)]
    blocks = blocks.reshape(lead + out_spatial + (p,) * nd)
    blocks = np.moveaxis(blocks, src, dst)
    full = lead + tuple(s * p for s in out_spatial)
    return _unbatch(np.ascontiguousarray(blocks).reshape(full), squeeze)


def maxpool2d_forward(x, p):
    """Non-overlapping p x p window max; returns (pooled, argmax indices)."""
    return _maxpool_forward(x, p, 2)


def maxpool2d_backward(argmax, upstream, p):
    """Routes upstream to the recorded argmax position of each window."""
    return _maxpool_backward(argmax, upstream, p, 2)


def maxpool3d_forward(x, p):
    return _maxpool_forward(x, p, 3)


def maxpool3d_backward(argmax, upstream, p):
    return _maxpool_backward(argmax, upstream, p, 3)


def crop_trailing(x, target_spatial):
    """Drop trailing rows/columns so the spatial sides equal target_spatial."""
    sl = (Ellipsis,) + tuple(slice(0, s) for s in target_spatial)
    return x[sl]


def crop_trailing_backward(upstream, full_spatial):
    nd = len(full_spatial)
    pad = ((0, 0),) * (upstream.ndim - nd) + tuple(
        (0, f - s) for f, s in zip(full_spatial, upstream.shape[-nd:])
    )
    return np.pad(upstream, pad)


# ---------------------------------------------------------------------------
# fully connected / activations
# ---------------------------------------------------------------------------


def full_forward(x, layer: FullLayer):
    """Affine map W x + b; x rank 1 or (batch, n_in)."""
    x, squeeze = _batched(x, 1)
    if x.shape[1] != layer.weights.shape[1]:
        raise ValueError(
            f"input width {x.shape[1]} != layer n_in {layer.weights.shape[1]}"
        )
    return _unbatch(x @ layer.weights.T + layer.bias, squeeze)


def full_backward(x, layer: FullLayer, upstream):
    x, squeeze = _batched(x, 1)
    upstream, _ = _batched(upstream, 1)
    grad_w = upstream.T @ x
    grad_b = upstream.sum(axis=0)
    grad_x = upstream @ layer.weights
    return _unbatch(grad_x, squeeze), grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def softmax(z):
    """Max-subtracted softmax along the last axis."""
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def concat(parts, batched=False):
    """Flattened concatenation of the parts in declared order."""
    if batched:
        b = parts[0].shape[0]
        return np.concatenate([np.asarray(p).reshape(b, -1) for p in parts], axis=1)
    return np.concatenate([np.asarray(p).ravel() for p in parts])


def concat_backward(upstream, shapes, batched=False):
    """Split upstream back into the original part shapes."""
    up = upstream if batched else upstream[None]
    out, off = [], 0
    for s in shapes:
        w = int(np.prod(s))
        part = up[:, off : off + w]
        off += w
        shape = (up.shape[0],) + tuple(s) if batched else tuple(s)
        out.append(part.reshape(shape))
    if off != up.shape[1]:
        raise ValueError("upstream width does not match the declared parts")
    return out
