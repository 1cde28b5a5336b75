"""Minimal differentiable layers on numpy arrays.

Tensors are plain ``np.ndarray``; image tensors are B x C x H x W. Convolution is
cross-correlation (no kernel flip) implemented with im2col in a channel-major
C x (B*H*W) layout, so every reduction is a single BLAS call or a numpy sum
with a fixed order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

DEBUG_FINITE = bool(os.environ.get("ARMSIGHT_DEBUG"))


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, block: str, message: str = "non-finite values"):
        super().__init__(f"{block}: {message}")
        self.block = block


def _check_finite(name, arr):
    if DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(name)


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                     dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


# -- convolution --------------------------------------------------------------

def _im2col(x, k, stride, padding, dilation):
    B, C, H, W = x.shape
    Ho = conv_output_size(H, k, stride, padding, dilation)
    Wo = conv_output_size(W, k, stride, padding, dilation)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"convolution output would be empty for input {x.shape}")
    xp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + H, padding:padding + W] = x.transpose(1, 0, 2, 3)
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=x.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            r, c = i * dilation, j * dilation
            cols[:, i, j] = xp[:, :, r:r + hs:stride, c:c + ws:stride]
    return cols.reshape(C * k * k, B * Ho * Wo), (Ho, Wo)


def _col2im(gcols, x_shape, k, stride, padding, dilation, out_hw):
    B, C, H, W = x_shape
    Ho, Wo = out_hw
    gcols = gcols.reshape(C, k, k, B, Ho, Wo)
    gxp = np.zeros((C, B, H + 2 * padding, W + 2 * padding), dtype=gcols.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(k):
        for j in range(k):
            r, c = i * dilation, j * dilation
            gxp[:, :, r:r + hs:stride, c:c + ws:stride] += gcols[:, i, j]
    return gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)


def _check_conv(x, weights, bias, stride, dilation):
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError("conv2d expects a B x C x H x W input and O x C x k x k weights")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {weights.shape[1]}")
    if weights.shape[2] != weights.shape[3]:
        raise ShapeError("only square kernels are supported")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} filters")
    if stride < 1 or dilation < 1:
        raise ShapeError("stride and dilation must be >= 1")


def conv2d_forward(x, weights, bias=None, stride=1, padding=0, dilation=1, *, _return_cols=False):
    _check_conv(x, weights, bias, stride, dilation)
    O, _, k, _ = weights.shape
    cols, (Ho, Wo) = _im2col(x, k, stride, padding, dilation)
    out = weights.reshape(O, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(O, x.shape[0], Ho, Wo).transpose(1, 0, 2, 3)
    return (out, cols) if _return_cols else out


def _conv2d_backward_cols(cols, x_shape, weights, grad_out, stride, padding, dilation,
                          need_input_grad=True):
    O, _, k, _ = weights.shape
    Ho, Wo = grad_out.shape[2:]
    g = grad_out.transpose(1, 0, 2, 3).reshape(O, -1)
    grad_w = (g @ cols.T).reshape(weights.shape)
    grad_b = g.sum(axis=1)
    grad_x = None
    if need_input_grad:
        gcols = weights.reshape(O, -1).T @ g
        grad_x = _col2im(gcols, x_shape, k, stride, padding, dilation, (Ho, Wo))
    return grad_x, grad_w, grad_b


def conv2d_backward(x, weights, grad_out, stride=1, padding=0, dilation=1):
    """Gradients (input, weights, bias) of conv2d_forward for upstream `grad_out`."""
    _check_conv(x, weights, None, stride, dilation)
    cols, out_hw = _im2col(x, weights.shape[2], stride, padding, dilation)
    expected = (x.shape[0], weights.shape[0]) + out_hw
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    return _conv2d_backward_cols(cols, x.shape, weights, grad_out, stride, padding, dilation)


# -- pooling ------------------------------------------------------------------

def _pool_windows(x, k, stride):
    B, C, H, W = x.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"pool window {k} larger than input {x.shape}")
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    return [x[:, :, i:i + hs:stride, j:j + ws:stride] for i in range(k) for j in range(k)], (Ho, Wo)


def maxpool_forward(x, k=2, stride=None):
    """Returns (output, argmax); ties resolve to the first window element in row-major order."""
    stride = stride or k
    taps, _ = _pool_windows(x, k, stride)
    win = np.stack(taps, axis=-1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(grad_out, arg, x_shape, k=2, stride=None):
    stride = stride or k
    B, C, H, W = x_shape
    Ho, Wo = grad_out.shape[2:]
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    for t in range(k * k):
        i, j = divmod(t, k)
        gx[:, :, i:i + hs:stride, j:j + ws:stride] += np.where(arg == t, grad_out, 0)
    return gx


# -- dense and pointwise --------------------------------------------------------

def dense_forward(x, weights, bias=None):
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    out = x @ weights
    if bias is not None:
        out += bias
    return out


def dense_backward(x, weights, grad_out):
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match dense output")
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0)


def sigmoid_forward(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(y, grad_out):
    return grad_out * y * (1 - y)


def softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, grad_out):
    return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


def add_forward(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def add_backward(grad_out):
    return grad_out, grad_out


# -- layer specs and parameters -------------------------------------------------

LAYER_KINDS = ("conv", "dense", "maxpool", "relu", "sigmoid", "softmax", "add")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int | None = None
    dilation: int = 1
    units_in: int = 0
    units_out: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError(f"{self.name}: stride and dilation must be >= 1")
        if self.kind == "conv" and self.kernel % 2 == 0:
            raise ValueError(f"{self.name}: convolution kernels must be odd-sized")

    @property
    def same_padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2

    @property
    def resolved_padding(self) -> int:
        return self.same_padding if self.padding is None else self.padding

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            return {"w": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                    "b": (self.out_channels,)}
        if self.kind == "dense":
            return {"w": (self.units_in, self.units_out), "b": (self.units_out,)}
        return {}

    def fans(self) -> tuple[int, int]:
        if self.kind == "conv":
            k2 = self.kernel * self.kernel
            return self.in_channels * k2, self.out_channels * k2
        return self.units_in, self.units_out


def init_parameters(specs, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform weights within sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for spec in specs:
        shapes = spec.param_shapes()
        if not shapes:
            continue
        fan_in, fan_out = spec.fans()
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{spec.name}.w"] = rng.uniform(-bound, bound, size=shapes["w"]).astype(dtype)
        params[f"{spec.name}.b"] = np.zeros(shapes["b"], dtype=dtype)
    return params


# -- stateful layers --------------------------------------------------------------

class Layer:
    """Forward caches what backward needs; backward writes into `grads`."""

    spec: LayerSpec

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, spec: LayerSpec, params, grads, need_input_grad=True):
        self.spec, self.params, self.grads = spec, params, grads
        self.need_input_grad = need_input_grad
        self.wkey, self.bkey = f"{spec.name}.w", f"{spec.name}.b"

    def forward(self, x):
        s = self.spec
        out, self._cols = conv2d_forward(x, self.params[self.wkey], self.params[self.bkey],
                                         s.stride, s.resolved_padding, s.dilation,
                                         _return_cols=True)
        self._x_shape = x.shape
        _check_finite(s.name, out)
        return out

    def backward(self, grad):
        s = self.spec
        gx, gw, gb = _conv2d_backward_cols(self._cols, self._x_shape, self.params[self.wkey], grad,
                                           s.stride, s.resolved_padding, s.dilation,
                                           self.need_input_grad)
        self.grads[self.wkey] = gw
        self.grads[self.bkey] = gb
        self._cols = None
        return gx


class Dense(Layer):
    def __init__(self, spec: LayerSpec, params, grads):
        self.spec, self.params, self.grads = spec, params, grads
        self.wkey, self.bkey = f"{spec.name}.w", f"{spec.name}.b"

    def forward(self, x):
        self._x = x
        out = dense_forward(x, self.params[self.wkey], self.params[self.bkey])
        _check_finite(self.spec.name, out)
        return out

    def backward(self, grad):
        gx, gw, gb = dense_backward(self._x, self.params[self.wkey], grad)
        self.grads[self.wkey] = gw
        self.grads[self.bkey] = gb
        return gx


class MaxPool2D(Layer):
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def forward(self, x):
        self._x_shape = x.shape
        out, self._arg = maxpool_forward(x, self.spec.kernel, self.spec.stride)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._arg, self._x_shape, self.spec.kernel, self.spec.stride)

    def regime(self):
        return self._arg


class ReLU(Layer):
    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or LayerSpec("relu")

    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)

    def regime(self):
        return self._x > 0


class Sigmoid(Layer):
    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or LayerSpec("sigmoid")

    def forward(self, x):
        self._y = sigmoid_forward(x)
        return self._y

    def backward(self, grad):
        return sigmoid_backward(self._y, grad)


class Softmax(Layer):
    def __init__(self, spec: LayerSpec | None = None):
        self.spec = spec or LayerSpec("softmax")

    def forward(self, x):
        self._y = softmax_forward(x)
        return self._y

    def backward(self, grad):
        return softmax_backward(self._y, grad)


# -- gradient checking ------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    tolerance: float = 1e-4
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error < self.tolerance

    def worst_block(self) -> str | None:
        return max(self.errors, key=self.errors.get) if self.errors else None


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def gradient_check(params: dict[str, np.ndarray], loss_and_grads, h: float = 1e-5,
                   tolerance: float = 1e-4, max_coords: int = 200, seed: int = 0,
                   blocks=None, loss_only=None, regime=None, refinements: int = 2) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    `loss_and_grads()` must evaluate the loss at the current contents of
    `params` (which are perturbed in place and restored) and return
    (loss, grads). Up to `max_coords` random coordinates are probed per block.
    `loss_only()`, when given, is used for the perturbed evaluations.

    `regime()`, when given, returns the list of arrays that fix the active
    piece of a piecewise-smooth loss (ReLU signs, pooling winners) for the most
    recent evaluation. A probe whose +h or -h evaluation lands on a different
    piece straddles a kink; it is retried with h / 10 up to `refinements`
    times and otherwise skipped and counted in `report.skipped`. If more than
    half the probes of a block are skipped the check fails.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    report = GradCheckReport(tolerance=tolerance)
    loss, grads = loss_and_grads()
    if not np.isfinite(loss):
        report.failure = "non-finite loss"
        return report
    grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}
    base = [np.array(a, copy=True) for a in regime()] if regime is not None else None
    rng = np.random.default_rng(seed)
    if loss_only is None:
        def loss_only():
            return loss_and_grads()[0]

    def same_piece():
        return base is None or all(np.array_equal(a, b) for a, b in zip(regime(), base))

    def central(flat, c):
        orig = flat[c]
        step = h
        try:
            for _ in range(refinements + 1):
                flat[c] = orig + step
                f_plus = loss_only()
                smooth = same_piece()
                flat[c] = orig - step
                f_minus = loss_only()
                if smooth and same_piece():
                    return (f_plus - f_minus) / (2 * step)
                step /= 10
            return None
        finally:
            flat[c] = orig

    for name in (blocks or list(params)):
        p = params[name]
        flat = p.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        analytic = grads[name].reshape(-1)[coords]
        numeric = np.array([central(flat, c) for c in coords], dtype=object)
        kept = np.array([v is not None for v in numeric], dtype=bool)
        numeric = numeric[kept].astype(np.float64)
        analytic = analytic[kept]
        report.skipped[name] = int((~kept).sum())
        report.checked[name] = int(kept.sum())
        if 2 * report.skipped[name] > len(coords):
            report.failure = f"{name}: most probes straddle a kink"
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
            report.failure = f"{name}: non-finite gradient"
            report.errors[name] = math.inf
            continue
        report.errors[name] = float(relative_error(analytic, numeric).max()) if kept.any() else 0.0
    return report
    grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    if loss_only is None:
        def loss_only():
            return loss_and_grads()[0]
    for name in (blocks or list(params)):
        p = params[name]
        flat = p.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        analytic = grads[name].reshape(-1)[coords]
        numeric = np.empty(len(coords))
        for slot, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            f_plus = loss_only()
            flat[c] = orig - h
            f_minus = loss_only()
            flat[c] = orig
            numeric[slot] = (f_plus - f_minus) / (2 * h)
        if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
            report.failure = f"{name}: non-finite gradient"
            report.errors[name] = math.inf
            continue
        report.errors[name] = float(relative_error(analytic, numeric).max())
        report.checked[name] = len(coords)
    return report
