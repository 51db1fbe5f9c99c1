"""Minimal deterministic tensor math for training the valuation networks.

Everything is a plain numpy array in float32, row-major. Ops are pure
functions; the Layer classes add a forward cache so the exact analytic
backward pass can be computed without an autodiff graph. All ops preserve
the input dtype, which lets the test suite run the identical code in
float64 when checking gradients against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StateError

DTYPE = np.float32


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    """Coerce to a contiguous array of the working dtype."""
    return np.ascontiguousarray(x, dtype=dtype)


@dataclass
class LayerGrad:
    """Gradients produced by one layer's backward pass.

    param_grads aligns element-for-element with the layer's params list;
    input_grad matches the shape of the cached forward input.
    """

    param_grads: list
    input_grad: np.ndarray


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map: out[i, j] = sum_k x[i, k] * w[k, j] + b[j]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias {b.shape} does not match w {w.shape}")
    return x @ w + b


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """Zero-pad by 1 and unfold 3x3 patches to a (batch*h*w, cin*9) matrix."""
    n, cin, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # windows: (n, cin, h, w, 3, 3) view over the padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cin * 9)
    return np.ascontiguousarray(cols)


def conv2d_forward(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero-padding 1, plus per-channel bias."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input/kernel, got {x.shape} and {k.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d: bias {b.shape} does not match {cout} output channels")
    cols = _im2col3x3(x)
    out = cols @ k.reshape(cout, -1).T + b
    return out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)


def maxpool2d_forward(x: np.ndarray):
    """2x2 max pooling, stride 2. Returns (pooled, argmax indices for backward)."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def relu_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean: (n, c, h, w) -> (n, c)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. pred.

    loss = mean((pred - target)^2); grad = 2 * (pred - target) / batch.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    batch = pred.shape[0]
    if batch == 0:
        raise ValueError("mse: empty batch")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / batch) * diff
    return loss, grad


# ---------------------------------------------------------------------------
# layers with forward caches
# ---------------------------------------------------------------------------

class Dense:
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = w
        self.b = b
        self._x = None

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.w, self.b)

    def backward(self, upstream):
        if self._x is None:
            raise StateError("Dense.backward called before forward")
        x = self._x
        dw = x.T @ upstream
        db = upstream.sum(axis=0)
        dx = upstream @ self.w.T
        return LayerGrad([dw, db], dx)


class Conv2d:
    """3x3/stride-1/pad-1 convolution layer, channels-last activations.

    The canonical kernel parameter keeps the (cout, cin, 3, 3) shape used by
    checkpoints; forward/backward run on (batch, h, w, c) activations via a
    patch-matrix (im2col) GEMM, which is what makes CPU training tractable.
    """

    def __init__(self, k: np.ndarray, b: np.ndarray):
        self.k = k
        self.b = b
        self._x_shape = None
        self._cols = None

    @property
    def params(self):
        return [self.k, self.b]

    def _k_mat(self):
        # rows indexed by (patch offset, cin) to match the cols layout
        return np.ascontiguousarray(self.k.transpose(2, 3, 1, 0)).reshape(-1, self.k.shape[0])

    def forward(self, x):
        n, h, w, cin = x.shape
        if cin != self.k.shape[1]:
            raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {self.k.shape[1]}")
        self._x_shape = x.shape
        xp = np.zeros((n, h + 2, w + 2, cin), dtype=x.dtype)
        xp[:, 1:h + 1, 1:w + 1, :] = x
        cols = np.empty((n, h, w, 9, cin), dtype=x.dtype)
        for di in range(3):
            for dj in range(3):
                cols[:, :, :, di * 3 + dj, :] = xp[:, di:di + h, dj:dj + w, :]
        self._cols = cols.reshape(n * h * w, 9 * cin)
        out = self._cols @ self._k_mat().astype(x.dtype) + self.b
        return out.reshape(n, h, w, self.k.shape[0])

    def backward(self, upstream, need_input_grad=True):
        if self._cols is None:
            raise StateError("Conv2d.backward called before forward")
        n, h, w, cin = self._x_shape
        cout = self.k.shape[0]
        up = upstream.reshape(n * h * w, cout)
        dk_mat = self._cols.T @ up
        dk = np.ascontiguousarray(dk_mat.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1))
        db = up.sum(axis=0)
        if not need_input_grad:  # first layer of a network: dx is never consumed
            return LayerGrad([dk, db], None)
        dcols = (up @ self._k_mat().astype(upstream.dtype).T).reshape(n, h, w, 9, cin)
        dxp = np.zeros((n, h + 2, w + 2, cin), dtype=upstream.dtype)
        for di in range(3):
            for dj in range(3):
                dxp[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, di * 3 + dj, :]
        return LayerGrad([dk, db], dxp[:, 1:h + 1, 1:w + 1, :])


class MaxPool2d:
    """2x2/stride-2 max pooling over channels-last activations."""

    def __init__(self):
        self._x_shape = None
        self._idx = None

    params = []

    def forward(self, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
        self._x_shape = x.shape
        # window axis last so argmax/take run on the contiguous axis
        windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        windows = np.ascontiguousarray(windows).reshape(n, h // 2, w // 2, c, 4)
        self._idx = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, upstream):
        if self._idx is None:
            raise StateError("MaxPool2d.backward called before forward")
        n, h, w, c = self._x_shape
        dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=upstream.dtype)
        np.put_along_axis(dwin, self._idx[..., None], upstream[..., None], axis=-1)
        dx = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return LayerGrad([], np.ascontiguousarray(dx).reshape(n, h, w, c))


class ReLU:
    def __init__(self):
        self._mask = None

    params = []

    def forward(self, x):
        self._mask = x > 0  # gradient at exactly 0 is defined as 0
        return relu_forward(x)

    def backward(self, upstream):
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        return LayerGrad([], upstream * self._mask)


class GlobalAvgPool:
    """Spatial mean over channels-last activations: (n, h, w, c) -> (n, c)."""

    def __init__(self):
        self._x_shape = None

    params = []

    def forward(self, x):
        self._x_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, upstream):
        if self._x_shape is None:
            raise StateError("GlobalAvgPool.backward called before forward")
        n, h, w, c = self._x_shape
        dx = np.broadcast_to((upstream / (h * w))[:, None, None, :], (n, h, w, c))
        return LayerGrad([], np.ascontiguousarray(dx))


def layer_backward(layer, upstream: np.ndarray) -> LayerGrad:
    """Chain-rule the layer's cached forward pass with the upstream gradient."""
    return layer.backward(upstream)


# ---------------------------------------------------------------------------
# initialization and optimizer
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            t=0, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
        )


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction. Mutates params and state in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adam: got {len(grads)} grads for {len(params)} params ({len(state.m)} moment slots)")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"adam: param {p.shape} vs grad {g.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state
