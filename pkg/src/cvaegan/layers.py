"""Layer operations: convolution, transposed convolution, batch norm, dense.

Image tensors are laid out (batch, channels, height, width). Convolution
weights are (out_channels, in_channels, k, k); transposed-convolution weights
are (in_channels, out_channels, k, k) so that the same array drives a conv2d
and its adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateBatchError, DimensionError
from .tensor import Tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
INIT_STD = 0.02


@dataclass
class LayerParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM

    @property
    def has_batch_norm(self) -> bool:
        return self.gamma is not None

    def parameters(self) -> dict:
        out = {"weight": self.weight}
        for name in ("bias", "gamma", "beta"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def buffers(self) -> dict:
        if self.running_mean is None:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass(frozen=True)
class LayerGeometry:
    """Shape description used by :func:`init_params`.

    kind is one of ``conv``, ``conv_t``, ``dense``. For ``dense`` the kernel
    size is ignored.
    """

    kind: str
    in_features: int
    out_features: int
    kernel: int = 1
    batch_norm: bool = False
    bias: bool = True
    norm_channels: Optional[int] = None  # BN width when it differs from out_features

    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.out_features, self.in_features, self.kernel, self.kernel)
        if self.kind == "conv_t":
            return (self.in_features, self.out_features, self.kernel, self.kernel)
        if self.kind == "dense":
            return (self.in_features, self.out_features)
        raise ConfigurationError(f"unknown layer kind {self.kind!r}")


def init_params(geometry: LayerGeometry, rng, dtype=np.float32) -> LayerParams:
    """Weights ~ N(0, 0.02); zero bias; unit gamma; zero beta.

    ``rng`` may be an integer seed or a ``numpy.random.Generator``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weight = rng.normal(0.0, INIT_STD, size=geometry.weight_shape()).astype(dtype)
    params = LayerParams(weight=Tensor(weight, requires_grad=True))
    if geometry.bias:
        params.bias = Tensor(np.zeros(geometry.out_features, dtype=dtype), requires_grad=True)
    if geometry.batch_norm:
        n = geometry.norm_channels or geometry.out_features
        params.gamma = Tensor(np.ones(n, dtype=dtype), requires_grad=True)
        params.beta = Tensor(np.zeros(n, dtype=dtype), requires_grad=True)
        params.running_mean = np.zeros(n, dtype=dtype)
        params.running_var = np.ones(n, dtype=dtype)
    return params


# -- im2col helpers ---------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding, output_padding=0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*out_h*out_w, C*k*k) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * out_h * out_w, c * k * k)


def _scatter_patches(w: np.ndarray, g: np.ndarray, padded_shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of im2col followed by the weight product.

    ``w`` is (O, C, k, k) and ``g`` is (B, O, h, w); every position of ``g``
    spreads ``g . w`` over a k x k window of the (B, C, Hp, Wp) result. The
    product is laid out (k, k, C, B, h, w) so each offset adds a dense block,
    and offsets are grouped by stride phase so the accumulation never writes
    through a strided view until one final interleave.
    """
    out_c, c, k, _ = w.shape
    b, _, h, wd = g.shape
    wr = w.transpose(2, 3, 1, 0).reshape(k * k * c, out_c)
    patches = (wr @ g.transpose(1, 0, 2, 3).reshape(out_c, -1)).reshape(k, k, c, b, h, wd)
    reach = -(-k // stride)
    phases = np.zeros((stride, stride, c, b, h + reach, wd + reach), dtype=patches.dtype)
    for i in range(k):
        for j in range(k):
            qi, qj = i // stride, j // stride
            phases[i % stride, j % stride, :, :, qi : qi + h, qj : qj + wd] += patches[i, j]
    out = np.empty((c, b) + tuple(padded_shape[2:]), dtype=patches.dtype)
    for r in range(stride):
        for t in range(stride):
            block = out[:, :, r::stride, t::stride]
            block[...] = phases[r, t, :, :, : block.shape[2], : block.shape[3]]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _unpad(x: np.ndarray, padding: int, h: int, w: int) -> np.ndarray:
    return x[:, :, padding : padding + h, padding : padding + w]


def _check_image(x: Tensor, channels: int, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a BCHW tensor, got shape {x.shape}")
    if x.shape[1] != channels:
        raise DimensionError(
            f"{op}: channel axis has {x.shape[1]} channels, kernel expects {channels}"
        )


# -- convolution ------------------------------------------------------------


def conv2d(x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0) -> Tensor:
    w = params.weight
    out_c, in_c, k, k2 = w.shape
    _check_image(x, in_c, "conv2d")
    b, _, h, wd = x.shape
    for axis, size in (("height", h), ("width", wd)):
        if k > size + 2 * padding:
            raise DimensionError(
                f"conv2d: kernel {k} exceeds padded input {axis} {size + 2 * padding}"
            )
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(wd, k, stride, padding)
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = w.data.reshape(out_c, -1)
    out = cols @ wmat.T
    if params.bias is not None:
        out = out + params.bias.data
    out = out.reshape(b, oh, ow, out_c).transpose(0, 3, 1, 2)
    bias = params.bias

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _unpad(_scatter_patches(w.data, g, xp.shape, stride), padding, h, wd)
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make_node(np.ascontiguousarray(out), parents, backward)


def conv_transpose2d(
    x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    if output_padding >= stride or output_padding < 0:
        raise ConfigurationError(
            f"conv_transpose2d: output_padding must lie in [0, stride), got {output_padding}"
        )
    w = params.weight
    in_c, out_c, k, _ = w.shape
    _check_image(x, in_c, "conv_transpose2d")
    b, _, h, wd = x.shape
    oh = conv_transpose_output_size(h, k, stride, padding, output_padding)
    ow = conv_transpose_output_size(wd, k, stride, padding, output_padding)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv_transpose2d: non-positive output size {oh}x{ow}")
    padded_shape = (b, out_c, oh + 2 * padding, ow + 2 * padding)
    wmat = w.data.reshape(in_c, -1)
    out = _unpad(_scatter_patches(w.data, x.data, padded_shape, stride), padding, oh, ow)
    if params.bias is not None:
        out = out + params.bias.data.reshape(1, -1, 1, 1)
    bias = params.bias

    def backward(g):
        gx = gw = gb = None
        cols = _im2col(_pad(g, padding), k, stride, h, wd)
        if x.requires_grad:
            gx = (cols @ wmat.T).reshape(b, h, wd, in_c).transpose(0, 3, 1, 2)
        if w.requires_grad:
            xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, in_c)
            gw = (xmat.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make_node(np.ascontiguousarray(out), parents, backward)


# -- normalization ----------------------------------------------------------


def batch_norm(
    x: Tensor,
    params: LayerParams,
    mode: str = "train",
    eps: float = BN_EPS,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization for (B, C) or (B, C, H, W) inputs.

    In train mode the batch statistics are used and, unless ``update_stats``
    is false, folded into the running estimates as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batch_norm: expected 2-D or 4-D input, got shape {x.shape}")
    if x.shape[1] != params.gamma.shape[0]:
        raise DimensionError(
            f"batch_norm: channel axis has {x.shape[1]} channels, params expect "
            f"{params.gamma.shape[0]}"
        )

    gamma, beta = params.gamma, params.beta
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batch_norm in train mode needs batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            n = x.data.size // x.shape[1]
            m = params.momentum
            unbiased = var * (n / max(n - 1, 1))
            params.running_mean[...] = m * params.running_mean + (1 - m) * mu
            params.running_var[...] = m * params.running_var + (1 - m) * unbiased
    else:
        mu = params.running_mean
        var = params.running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    count = x.data.size // x.shape[1]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                mean_g = gxhat.sum(axis=axes, keepdims=True) / count
                mean_gx = (gxhat * xhat).sum(axis=axes, keepdims=True) / count
                gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(bshape)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# -- dense and activations ---------------------------------------------------


def dense(x: Tensor, params: LayerParams) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"dense: expected (batch, features) input, got shape {x.shape}")
    if x.shape[1] != params.weight.shape[0]:
        raise DimensionError(
            f"dense: feature axis has {x.shape[1]} values, weight expects "
            f"{params.weight.shape[0]}"
        )
    out = T.matmul(x, params.weight)
    if params.bias is not None:
        out = out + params.bias
    return out


def activation(x: Tensor, kind: str, alpha: float = 0.2, axis: int = -1) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky_relu":
        return T.leaky_relu(x, alpha)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    if kind == "softmax":
        return T.softmax(x, axis=axis)
    if kind in ("linear", "none"):
        return x
    raise ConfigurationError(f"unknown activation {kind!r}")


class Module:
    """Named collection of :class:`LayerParams`.

    Subclasses fill ``self.layers`` (an insertion-ordered dict) in
    ``__init__``; names are dotted paths used for checkpoints and optimizer
    state.
    """

    def __init__(self):
        self.layers: dict = {}
        self.dtype = np.float32
        self.trace: Optional[list] = None

    def named_parameters(self) -> dict:
        out = {}
        for lname, layer in self.layers.items():
            for pname, p in layer.parameters().items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_buffers(self) -> dict:
        out = {}
        for lname, layer in self.layers.items():
            for bname, b in layer.buffers().items():
                out[f"{lname}.{bname}"] = b
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def input(self, x) -> Tensor:
        """Coerce data to a tensor of the model's dtype; tensors on the tape pass through."""
        if isinstance(x, Tensor) and (x.requires_grad or x.dtype == self.dtype):
            return x
        data = x.data if isinstance(x, Tensor) else x
        return Tensor(np.asarray(data, dtype=self.dtype))

    def _record(self, name: str, value: Tensor) -> Tensor:
        if self.trace is not None:
            self.trace.append((name, value))
        return value

    def first_nonfinite(self) -> Optional[str]:
        """Name of the first traced layer output holding a NaN or inf."""
        for name, value in self.trace or ():
            if not np.isfinite(value.data).all():
                return name
        return None

    def state_dict(self) -> dict:
        """Parameters then running statistics as plain arrays, keyed by dotted name."""
        out = {name: p.data for name, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict) -> None:
        targets = {name: p.data for name, p in self.named_parameters().items()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        if missing:
            raise ConfigurationError(f"checkpoint lacks entries: {missing[:5]}")
        for name, dst in targets.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ConfigurationError(
                    f"{name}: checkpoint shape {src.shape} does not match model {dst.shape}"
                )
            dst[...] = src
