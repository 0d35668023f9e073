"""Minimal convolutional layers with hand-written forward and backward passes.

All activations are plain numpy arrays shaped ``[batch, channels, height,
width]``. Convolutions are bias-free throughout. Forward passes cache exactly
what the matching backward pass needs; the cache is consumed by ``backward``,
so each forward call supports at most one backward call.

Convolution is lowered to matrix multiplication via a strided im2col view,
and its adjoint (col2im) scatter-adds patch columns back onto the padded
image. The transposed convolution reuses the same two primitives with the
roles of forward and backward exchanged.
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution, ``floor((s + 2p - k)/stride) + 1``."""
    if size < 1 or kernel < 1 or stride < 1 or padding < 0:
        raise GeometryError(
            f"invalid conv geometry: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    if size + 2 * padding < kernel:
        raise GeometryError(
            f"kernel {kernel} exceeds padded input {size + 2 * padding}"
        )
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a transposed convolution, ``(s-1)*stride - 2p + k``."""
    if size < 1 or kernel < 1 or stride < 1 or padding < 0:
        raise GeometryError(
            f"invalid transposed-conv geometry: size={size} kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    out = (size - 1) * stride - 2 * padding + kernel
    if out < 1:
        raise GeometryError(
            f"transposed conv collapses size {size} to {out} "
            f"(kernel={kernel} stride={stride} padding={padding})"
        )
    return out


def pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    """Zero-pad the two trailing spatial axes symmetrically."""
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(xp: np.ndarray, kernel: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Gather sliding k*k patches of a padded batch into ``[n, c*k*k, h_out*w_out]``."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kernel, kernel, h_out, w_out),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(n, c * kernel * kernel, h_out * w_out)


def col2im(
    cols: np.ndarray,
    kernel: int,
    stride: int,
    h_pad: int,
    w_pad: int,
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto padded images."""
    n = cols.shape[0]
    c = cols.shape[1] // (kernel * kernel)
    h_out, w_out = _cols_spatial(cols, h_pad, w_pad, kernel, stride)
    patches = cols.reshape(n, c, kernel, kernel, h_out, w_out)
    out = np.zeros((n, c, h_pad, w_pad), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                patches[:, :, i, j]
            )
    return out


def _cols_spatial(cols, h_pad, w_pad, kernel, stride):
    h_out = (h_pad - kernel) // stride + 1
    w_out = (w_pad - kernel) // stride + 1
    if h_out * w_out != cols.shape[2]:
        raise GeometryError(
            f"column count {cols.shape[2]} does not match target "
            f"{h_pad}x{w_pad} with kernel={kernel} stride={stride}"
        )
    return h_out, w_out


class Parameter:
    """A trainable array paired with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape


class Layer:
    """Base class: a differentiable operator with named parameters and buffers."""

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sublayers(self) -> list[tuple[str, "Layer"]]:
        return []

    def own_parameters(self) -> list[tuple[str, Parameter]]:
        return []

    def own_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {prefix + name: p for name, p in self.own_parameters()}
        for child_name, child in self.sublayers():
            out.update(child.named_parameters(prefix + child_name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: b for name, b in self.own_buffers()}
        for child_name, child in self.sublayers():
            out.update(child.named_buffers(prefix + child_name + "."))
        return out

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.grad[...] = 0.0

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise GeometryError(
                f"{type(self).__name__}.backward called without a pending forward"
            )
        self._cache = None
        return cache


def _init_std(scheme: str, fan_in: int, fan_out: int) -> float:
    if scheme == "he":
        return float(np.sqrt(2.0 / fan_in))
    if scheme == "xavier":
        return float(np.sqrt(2.0 / (fan_in + fan_out)))
    raise GeometryError(f"unknown init scheme {scheme!r}")


class Conv2d(Layer):
    """Bias-free 2-d convolution with square kernel, stride and zero padding.

    The weight has shape ``[out_channels, in_channels, k, k]``. He-normal
    initialisation is the default since every convolution in this package sits
    behind a ReLU; pass ``init='xavier'`` for layers feeding a sigmoid.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        *,
        rng: np.random.Generator | None = None,
        init: str = "he",
        dtype=np.float32,
    ):
        if in_channels < 1 or out_channels < 1:
            raise GeometryError("channel counts must be positive")
        conv_output_size(max(kernel_size, 1), kernel_size, stride, padding)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        std = _init_std(init, fan_in, fan_out)
        self.weight = Parameter(
            rng.normal(0.0, std, (out_channels, in_channels, kernel_size, kernel_size))
            .astype(self.dtype)
        )
        self._cache = None

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel_size, self.stride, self.padding)

    def own_parameters(self):
        return [("weight", self.weight)]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise GeometryError(f"expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        h_out = conv_output_size(h, k, s, p)
        w_out = conv_output_size(w, k, s, p)
        if k == 1 and s == 1 and p == 0:
            # pointwise: pure channel mixing, no patch gathering needed
            cols = x.reshape(n, c, h * w)
        else:
            cols = im2col(pad2d(x, p), k, s, h_out, w_out)
        w2 = self.weight.value.reshape(self.out_channels, -1)
        y = np.matmul(w2, cols).reshape(n, self.out_channels, h_out, w_out)
        self._cache = (cols, (h, w))
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        cols, (h, w) = self._take_cache()
        n = grad.shape[0]
        k, s, p = self.kernel_size, self.stride, self.padding
        g2 = grad.reshape(n, self.out_channels, -1)
        self.weight.grad += np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(
            self.weight.shape
        )
        w2 = self.weight.value.reshape(self.out_channels, -1)
        grad_cols = np.matmul(w2.T, g2)
        if k == 1 and s == 1 and p == 0:
            return grad_cols.reshape(n, self.in_channels, h, w)
        gx = col2im(grad_cols, k, s, h + 2 * p, w + 2 * p)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        return np.ascontiguousarray(gx)


class ConvTranspose2d(Layer):
    """Bias-free 2-d transposed convolution (the adjoint of :class:`Conv2d`).

    The weight has shape ``[in_channels, out_channels, k, k]``, matching the
    convolution whose data-gradient this operator computes.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        *,
        rng: np.random.Generator | None = None,
        init: str = "he",
        dtype=np.float32,
    ):
        if in_channels < 1 or out_channels < 1:
            raise GeometryError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        std = _init_std(init, fan_in, fan_out)
        self.weight = Parameter(
            rng.normal(0.0, std, (in_channels, out_channels, kernel_size, kernel_size))
            .astype(self.dtype)
        )
        self._cache = None

    def output_size(self, size: int) -> int:
        return conv_transpose_output_size(size, self.kernel_size, self.stride, self.padding)

    def own_parameters(self):
        return [("weight", self.weight)]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise GeometryError(f"expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        h_full = (h - 1) * s + k
        w_full = (w - 1) * s + k
        conv_transpose_output_size(h, k, s, p)
        conv_transpose_output_size(w, k, s, p)
        x2 = x.reshape(n, c, h * w)
        w2 = self.weight.value.reshape(self.in_channels, -1)
        cols = np.matmul(w2.T, x2)
        y = col2im(cols, k, s, h_full, w_full)
        if p:
            y = np.ascontiguousarray(y[:, :, p:-p, p:-p])
        self._cache = (x2, (h, w))
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x2, (h, w) = self._take_cache()
        n = grad.shape[0]
        k, s, p = self.kernel_size, self.stride, self.padding
        grad_cols = im2col(pad2d(grad, p), k, s, h, w)
        self.weight.grad += np.tensordot(x2, grad_cols, axes=([0, 2], [0, 2])).reshape(
            self.weight.shape
        )
        w2 = self.weight.value.reshape(self.in_channels, -1)
        gx = np.matmul(w2, grad_cols).reshape(n, self.in_channels, h, w)
        return gx


class BatchNorm2d(Layer):
    """Per-channel batch normalisation with learned scale and shift.

    Training mode normalises with biased batch statistics and maintains
    exponential running statistics (unbiased variance) for evaluation mode.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, *, dtype=np.float32):
        if channels < 1:
            raise GeometryError("channels must be positive")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.dtype = np.dtype(dtype)
        self.scale = Parameter(np.ones(channels, dtype=self.dtype))
        self.shift = Parameter(np.zeros(channels, dtype=self.dtype))
        self.running_mean = np.zeros(channels, dtype=self.dtype)
        self.running_var = np.ones(channels, dtype=self.dtype)
        self._cache = None

    def own_parameters(self):
        return [("scale", self.scale), ("shift", self.shift)]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.channels:
            raise GeometryError(f"expected {self.channels} channels, got {c}")
        if n == 0:
            raise GeometryError("batch normalisation over an empty batch")
        shape = (1, c, 1, 1)
        if train:
            m = n * h * w
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            ivar = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(shape)) * ivar.reshape(shape)
            unbiased = var * (m / (m - 1)) if m > 1 else var
            mom = self.momentum
            self.running_mean += mom * (mean.astype(self.dtype) - self.running_mean)
            self.running_var += mom * (unbiased.astype(self.dtype) - self.running_var)
            self._cache = (xhat, ivar, True)
        else:
            ivar = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shape)) * ivar.reshape(shape)
            self._cache = (xhat, ivar, False)
        return self.scale.value.reshape(shape) * xhat + self.shift.value.reshape(shape)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, ivar, was_train = self._take_cache()
        n, c, h, w = grad.shape
        shape = (1, c, 1, 1)
        g_shift = grad.sum(axis=(0, 2, 3))
        g_scale = (grad * xhat).sum(axis=(0, 2, 3))
        self.shift.grad += g_shift.astype(self.dtype)
        self.scale.grad += g_scale.astype(self.dtype)
        coeff = (self.scale.value * ivar).reshape(shape)
        if was_train:
            m = n * h * w
            gx = coeff * (grad - (g_shift.reshape(shape) + xhat * g_scale.reshape(shape)) / m)
        else:
            gx = coeff * grad
        return gx


class ReLU(Layer):
    """Elementwise max(x, 0). Backward reuses the incoming gradient buffer."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        mask = self._take_cache()
        if grad.flags.writeable:
            np.multiply(grad, mask, out=grad)
            return grad
        return grad * mask


class Sigmoid(Layer):
    """Elementwise logistic function, computed stably for both signs."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._cache = y
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        y = self._take_cache()
        return grad * y * (1.0 - y)


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate feature maps along the channel axis.

    All parts must share batch size, spatial size and dtype.
    """
    if not parts:
        raise GeometryError("cannot concatenate an empty list of feature maps")
    first = parts[0]
    for p in parts[1:]:
        if p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise GeometryError(
                f"channel concat shape mismatch: {first.shape} vs {p.shape}"
            )
        if p.dtype != first.dtype:
            raise GeometryError(
                f"channel concat dtype mismatch: {first.dtype} vs {p.dtype}"
            )
    return np.concatenate(parts, axis=1)


def split_channels(x: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` for known channel sizes."""
    if sum(sizes) != x.shape[1]:
        raise GeometryError(f"cannot split {x.shape[1]} channels into {sizes}")
    edges = np.cumsum(sizes)[:-1]
    return np.split(x, edges, axis=1)
