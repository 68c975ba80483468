"""Minimal float32 sequential-network core with a freezable backward pass.

Layers are grouped into named modules. Frozen modules always form a prefix
of the network; the backward pass stops at the freeze boundary, so frozen
layers incur no gradient computation at all. Everything runs on plain
numpy arrays in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FLOAT = np.float32


class ShapeMismatch(ValueError):
    """Input shape does not match what a layer or module expects."""


class BackwardStateError(RuntimeError):
    """backward() called without a preceding train-mode forward()."""


class Parameter:
    """Trainable array with an optional gradient and a freeze flag.

    While ``frozen`` is set the optimizer must leave ``value`` bitwise
    unchanged.
    """

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=FLOAT)
        self.grad: np.ndarray | None = None
        self.frozen = False

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, frozen={self.frozen})"


def _require_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"non-finite values entering {where}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "base"

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = False, record: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        raise NotImplementedError

    def flops(self, in_shape: tuple[int, ...], batch: int) -> int:
        """Analytic forward FLOPs; only dense/conv multiplies are counted."""
        return 0

    def _pop_cache(self):
        if self._cache is None:
            raise BackwardStateError(
                f"backward through layer '{self.name}' without a recorded forward"
            )
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        std = math.sqrt(2.0 / in_features)
        w = rng.normal(0.0, std, size=(in_features, out_features))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x, train=False, record=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(
                f"layer '{self.name}' expects (b, {self.in_features}), got {x.shape}"
            )
        # per-sample matmul slices: each row's result is independent of the
        # batch it arrived in, which cached activations rely on bitwise
        y = (x[:, None, :] @ self.weight.value)[:, 0, :] + self.bias.value
        if record:
            self._cache = x
        return y

    def backward(self, dy):
        x = self._pop_cache()
        self.weight.grad = x.T @ dy
        self.bias.grad = dy.sum(axis=0)
        return dy @ self.weight.value.T

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeMismatch(
                f"layer '{self.name}' expects ({self.in_features},), got {in_shape}"
            )
        return (self.out_features,)

    def flops(self, in_shape, batch):
        return 2 * self.in_features * self.out_features * batch


class Conv2d(Layer):
    """3x3 or 1x1 convolution, stride 1, zero padding k//2 (same-size output)."""

    kind = "conv2d"

    def __init__(self, name, in_channels, out_channels, kernel, rng: np.random.Generator):
        super().__init__(name)
        if kernel not in (1, 3):
            raise ValueError(f"conv kernel must be 1 or 3, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        std = math.sqrt(2.0 / (in_channels * kernel * kernel))
        w = rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels))

    def parameters(self):
        return [self.weight, self.bias]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"layer '{self.name}' expects (b, {self.in_channels}, h, w), got {x.shape}"
            )

    def _im2col(self, x):
        k, p = self.kernel, self.kernel // 2
        b, _, h, w = x.shape
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        # (b, cin, h, w, k, k) -> (b, h*w, cin*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, -1)
        return np.ascontiguousarray(cols, dtype=FLOAT)

    def forward(self, x, train=False, record=False):
        self._check_input(x)
        b, _, h, w = x.shape
        cols = self._im2col(x)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        y = cols @ wmat.T + self.bias.value
        y = y.transpose(0, 2, 1).reshape(b, self.out_channels, h, w)
        if record:
            self._cache = (cols, x.shape)
        return np.ascontiguousarray(y)

    def backward(self, dy):
        cols, x_shape = self._pop_cache()
        b, cin, h, w = x_shape
        k, p = self.kernel, self.kernel // 2
        dyr = dy.reshape(b, self.out_channels, h * w).transpose(0, 2, 1)
        wmat = self.weight.value.reshape(self.out_channels, -1)
        self.weight.grad = np.einsum("bpc,bpk->ck", dyr, cols).reshape(self.weight.value.shape)
        self.bias.grad = dy.sum(axis=(0, 2, 3))
        dcols = dyr @ wmat  # (b, h*w, cin*k*k)
        dcols = dcols.reshape(b, h, w, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((b, cin, h + 2 * p, w + 2 * p), dtype=FLOAT)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, :, :, ki, kj]
        return np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w])

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeMismatch(
                f"layer '{self.name}' expects ({self.in_channels}, h, w), got {in_shape}"
            )
        return (self.out_channels, in_shape[1], in_shape[2])

    def flops(self, in_shape, batch):
        _, h, w = in_shape
        k = self.kernel
        return 2 * k * k * self.in_channels * self.out_channels * h * w * batch


class Relu(Layer):
    kind = "relu"

    def forward(self, x, train=False, record=False):
        y = np.maximum(x, 0)
        if record:
            self._cache = x > 0
        return y

    def backward(self, dy):
        mask = self._pop_cache()
        return dy * mask

    def out_shape(self, in_shape):
        return in_shape


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; requires even spatial dims."""

    kind = "maxpool2d"

    def forward(self, x, train=False, record=False):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeMismatch(
                f"layer '{self.name}' expects (b, c, even h, even w), got {x.shape}"
            )
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        if record:
            self._cache = (idx, x.shape)
        return np.ascontiguousarray(y)

    def backward(self, dy):
        idx, x_shape = self._pop_cache()
        b, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        dblocks = np.zeros((b, c, h2, w2, 4), dtype=FLOAT)
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
        dx = dblocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return np.ascontiguousarray(dx)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"layer '{self.name}' needs even spatial dims, got {in_shape}")
        return (c, h // 2, w // 2)


class BatchNorm(Layer):
    """Batch normalization over the channel axis (2-d or 4-d inputs).

    Running statistics use momentum 0.1 and population variance. When
    ``permanent_inference`` is set (the module owning this layer froze),
    the layer normalizes with running statistics even during training so
    its output depends only on the input, never on the batch.
    """

    kind = "batchnorm"

    def __init__(self, name, num_features, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features, dtype=FLOAT)
        self.running_var = np.ones(num_features, dtype=FLOAT)
        self.permanent_inference = False

    def parameters(self):
        return [self.gamma, self.beta]

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, self.num_features)
        if x.ndim == 4:
            return (0, 2, 3), (1, self.num_features, 1, 1)
        raise ShapeMismatch(f"layer '{self.name}' expects 2-d or 4-d input, got {x.shape}")

    def forward(self, x, train=False, record=False):
        if x.shape[1] != self.num_features:
            raise ShapeMismatch(
                f"layer '{self.name}' expects {self.num_features} channels, got {x.shape}"
            )
        axes, pshape = self._axes_and_shape(x)
        g = self.gamma.value.reshape(pshape)
        b = self.beta.value.reshape(pshape)
        use_batch_stats = train and not self.permanent_inference
        if use_batch_stats:
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + FLOAT(self.eps))
            xhat = (x - mean) * inv_std
            m = FLOAT(self.momentum)
            self.running_mean = (1 - m) * self.running_mean + m * mean.reshape(-1).astype(FLOAT)
            self.running_var = (1 - m) * self.running_var + m * var.reshape(-1).astype(FLOAT)
            if record:
                self._cache = (xhat, inv_std, axes, pshape)
        else:
            rm = self.running_mean.reshape(pshape)
            rv = self.running_var.reshape(pshape)
            xhat = (x - rm) / np.sqrt(rv + FLOAT(self.eps))
        return (g * xhat + b).astype(FLOAT)

    def backward(self, dy):
        xhat, inv_std, axes, pshape = self._pop_cache()
        n = dy.size // self.num_features
        self.gamma.grad = (dy * xhat).sum(axis=axes).astype(FLOAT)
        self.beta.grad = dy.sum(axis=axes).astype(FLOAT)
        dxhat = dy * self.gamma.value.reshape(pshape)
        dx = inv_std * (
            dxhat
            - dxhat.sum(axis=axes, keepdims=True) / n
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / n
        )
        return dx.astype(FLOAT)

    def out_shape(self, in_shape):
        return in_shape


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, record=False):
        if record:
            self._cache = x.shape
        return np.ascontiguousarray(x.reshape(x.shape[0], -1))

    def backward(self, dy):
        shape = self._pop_cache()
        return dy.reshape(shape)

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


# ---------------------------------------------------------------------------
# Modules and the model
# ---------------------------------------------------------------------------


class LayerModule:
    """Contiguous group of layers: the unit of freezing and evaluation."""

    def __init__(self, name: str, layers: list[Layer], index: int):
        self.name = name
        self.layers = layers
        self.index = index

    @property
    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.parameters():
            p.frozen = frozen
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                layer.permanent_inference = frozen

    def forward(self, x: np.ndarray, train: bool = False, record: bool = False) -> np.ndarray:
        _require_finite(x, f"module '{self.name}'")
        for layer in self.layers:
            try:
                x = layer.forward(x, train=train, record=record)
            except ShapeMismatch as err:
                raise ShapeMismatch(f"module '{self.name}': {err}") from None
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def __repr__(self) -> str:
        return f"LayerModule({self.name!r}, index={self.index}, layers={len(self.layers)})"


class Model:
    """Ordered module chain with a frozen prefix ending at frontmost_active."""

    def __init__(self, modules: list[LayerModule], input_shape: tuple[int, ...]):
        for i, m in enumerate(modules):
            if m.index != i:
                raise ValueError(f"module indices must be contiguous from 0, got {m.index} at {i}")
        self.modules = modules
        self.input_shape = tuple(input_shape)
        self.frontmost_active = 0
        self.freeze_version = 0
        self._backward_ready = False

    # -- structure ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out = []
        for m in self.modules:
            out.extend(m.parameters())
        return out

    def total_param_count(self) -> int:
        return sum(m.param_count for m in self.modules)

    def active_param_count(self) -> int:
        return sum(m.param_count for m in self.modules[self.frontmost_active :])

    def frozen_param_fraction(self) -> float:
        total = self.total_param_count()
        if total == 0:
            return 0.0
        return (total - self.active_param_count()) / total

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each module, by shape inference."""
        shape = self.input_shape
        shapes = []
        for m in self.modules:
            for layer in m.layers:
                shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    # -- freezing ----------------------------------------------------------

    def freeze_frontmost(self) -> None:
        idx = self.frontmost_active
        if idx >= len(self.modules) - 1:
            raise ValueError("cannot freeze: frontmost module is the last module")
        self.modules[idx].set_frozen(True)
        self.frontmost_active = idx + 1
        self.freeze_version += 1

    def unfreeze_all(self) -> None:
        for m in self.modules:
            m.set_frozen(False)
        self.frontmost_active = 0
        self.freeze_version += 1

    # -- execution ---------------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        taps: set[int] | None = None,
        start_module: int = 0,
    ):
        """Run modules [start_module:] on x; return (output, tapped activations).

        Frozen modules never record intermediates; in train mode the
        running suffix does. ``taps`` selects module indices whose output
        activations are returned alongside the final output.
        """
        collected: dict[int, np.ndarray] = {}
        for m in self.modules[start_module:]:
            frozen = m.index < self.frontmost_active
            x = m.forward(x, train=train and not frozen, record=train and not frozen)
            if taps and m.index in taps:
                collected[m.index] = x
        if train:
            self._backward_ready = True
        return x, collected

    def backward(self, loss_grad: np.ndarray) -> None:
        """Backpropagate from the output; stops at the freeze boundary."""
        if not self._backward_ready:
            raise BackwardStateError("backward before a train-mode forward")
        self._backward_ready = False
        dy = loss_grad
        for m in reversed(self.modules[self.frontmost_active :]):
            dy = m.backward(dy)


# ---------------------------------------------------------------------------
# Loss, optimizer, schedule
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient (softmax - one_hot) / b."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (b, K), got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels must be ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    _require_finite(logits, "softmax_cross_entropy")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    return loss, (grad / b).astype(FLOAT)


def sgd_step(params: list[Parameter], lr: float) -> None:
    """value <- value - lr * grad for unfrozen params; frozen ones untouched."""
    for p in params:
        if not p.frozen and p.grad is not None:
            p.value -= FLOAT(lr) * p.grad


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "step_decay"  # "step_decay" | "constant"
    base_lr: float = 0.1
    decay_factor: float = 0.1
    milestones: tuple[int, ...] = ()

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.kind == "step_decay" and not (0 < self.decay_factor < 1):
            raise ValueError("decay_factor must be in (0, 1)")
        if self.kind not in ("step_decay", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def step_decay_lr(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.kind == "constant":
        return schedule.base_lr
    hits = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.decay_factor**hits


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


def count_flops(
    model: Model,
    frontmost_active: int,
    batch_size: int,
    cached_prefix: bool = False,
):
    """Analytic (fwd, bwd) FLOPs for one iteration.

    Backward covers only modules >= frontmost_active at 2x their forward
    cost. With ``cached_prefix`` the forward count also skips the frozen
    prefix (its activations come from the cache).
    """
    shape = model.input_shape
    fwd = 0
    active_fwd = 0
    for m in model.modules:
        mod_fwd = 0
        for layer in m.layers:
            mod_fwd += layer.flops(shape, batch_size)
            shape = layer.out_shape(shape)
        if m.index >= frontmost_active:
            active_fwd += mod_fwd
        fwd += mod_fwd
    bwd = 2 * active_fwd
    if cached_prefix:
        fwd = active_fwd
    return fwd, bwd


def prefix_flop_fraction(model: Model, frontmost_active: int) -> float:
    """Share of forward FLOPs spent in the frozen prefix."""
    full, _ = count_flops(model, 0, 1)
    if full == 0 or frontmost_active == 0:
        return 0.0
    active, _ = count_flops(model, frontmost_active, 1, cached_prefix=True)
    return (full - active) / full


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _fd_input_for(layer: Layer, rng: np.random.Generator) -> np.ndarray:
    if isinstance(layer, Dense):
        return rng.normal(size=(4, layer.in_features)).astype(FLOAT)
    if isinstance(layer, Conv2d):
        return rng.normal(size=(2, layer.in_channels, 6, 6)).astype(FLOAT)
    if isinstance(layer, Relu):
        # keep values off the kink at 0
        x = rng.uniform(0.25, 1.5, size=(4, 6)) * rng.choice([-1.0, 1.0], size=(4, 6))
        return x.astype(FLOAT)
    if isinstance(layer, MaxPool2d):
        return rng.normal(size=(2, 3, 4, 4)).astype(FLOAT)
    if isinstance(layer, BatchNorm):
        return rng.normal(size=(8, layer.num_features)).astype(FLOAT)
    if isinstance(layer, Flatten):
        return rng.normal(size=(3, 2, 4)).astype(FLOAT)
    raise ValueError(f"no finite-difference input defined for {type(layer).__name__}")


def finite_diff_check(layer: Layer, eps: float, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic grads and central differences.

    Uses the scalar probe loss L = sum(forward(x) * R) for a fixed random
    R, which makes dL/dy = R. Checks the input gradient and every
    parameter gradient of the layer.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ValueError("eps must be in [1e-5, 1e-2]")
    rng = rng or np.random.default_rng(0)
    x = _fd_input_for(layer, rng)
    y = layer.forward(x, train=True, record=True)
    r = rng.normal(size=y.shape).astype(FLOAT)
    dx = layer.backward(r)

    def probe(xv: np.ndarray) -> float:
        out = layer.forward(xv, train=True, record=False)
        return float(np.sum(out.astype(np.float64) * r.astype(np.float64)))

    def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        return float(np.max(np.abs(analytic - numeric) / scale))

    worst = 0.0

    def central_diff(arr: np.ndarray, make_probe) -> np.ndarray:
        num = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = make_probe()
            flat[i] = orig - eps
            lo = make_probe()
            flat[i] = orig
            num.reshape(-1)[i] = (hi - lo) / (2 * eps)
        return num

    worst = max(worst, rel_err(dx, central_diff(x, lambda: probe(x))))
    for p in layer.parameters():
        assert p.grad is not None
        worst = max(worst, rel_err(p.grad, central_diff(p.value, lambda: probe(x))))
    return worst
