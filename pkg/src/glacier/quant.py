"""Int8 reference models: snapshot, quantize, and run forward passes.

The reference model is a structurally identical copy of the training
model whose weights are stored as symmetric per-tensor int8. It only
ever runs forward passes (batchnorm in inference mode) to produce the
reference activations that plasticity is measured against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from glacier.nn import (
    FLOAT,
    BatchNorm,
    Conv2d,
    Dense,
    Layer,
    Model,
    ShapeMismatch,
)


@dataclass
class QuantizedTensor:
    """Symmetric per-tensor int8 values with a float dequantization scale."""

    shape: tuple[int, ...]
    q: np.ndarray  # int8, row-major
    scale: float


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(t: np.ndarray) -> QuantizedTensor:
    """scale = max|t|/127 (1 for all-zero t); q = round_half_away(t/scale)."""
    t = np.asarray(t, dtype=FLOAT)
    if not np.isfinite(t).all():
        raise ValueError("cannot quantize non-finite tensor")
    amax = float(np.abs(t).max()) if t.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    q = np.clip(_round_half_away(t.astype(np.float64) / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(tuple(t.shape), q, scale)


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    return (qt.q.astype(FLOAT) * FLOAT(qt.scale)).reshape(qt.shape)


def int8_gemm(a_q: QuantizedTensor, w_q: QuantizedTensor) -> np.ndarray:
    """(b,k) x (k,n) GEMM accumulated in int32, rescaled to float32."""
    if len(a_q.shape) != 2 or len(w_q.shape) != 2 or a_q.shape[1] != w_q.shape[0]:
        raise ShapeMismatch(f"int8_gemm: incompatible shapes {a_q.shape} x {w_q.shape}")
    acc = a_q.q.reshape(a_q.shape).astype(np.int32) @ w_q.q.reshape(w_q.shape).astype(np.int32)
    return (acc.astype(FLOAT) * FLOAT(a_q.scale * w_q.scale)).astype(FLOAT)


# ---------------------------------------------------------------------------
# Reference model
# ---------------------------------------------------------------------------


@dataclass
class _RefDense:
    name: str
    weight: QuantizedTensor | np.ndarray  # ndarray when precision == float32
    bias: np.ndarray
    in_features: int


@dataclass
class _RefGeneric:
    """Any non-dense layer, rebuilt with dequantized float weights."""

    layer: Layer


@dataclass
class _RefModule:
    name: str
    index: int
    layers: list


class ReferenceModel:
    """Immutable int8 (or float32-fallback) snapshot of a training model."""

    def __init__(self, modules: list[_RefModule], snapshot_iteration: int, version: int,
                 precision: str):
        self.modules = modules
        self.snapshot_iteration = snapshot_iteration
        self.version = version
        self.precision = precision

    @property
    def module_count(self) -> int:
        return len(self.modules)


def _clone_layer_with_weights(layer: Layer, weights: dict[str, np.ndarray]) -> Layer:
    clone = object.__new__(type(layer))
    clone.__dict__.update(layer.__dict__)
    clone._cache = None
    params = layer.parameters()
    if params:
        for attr in ("weight", "bias", "gamma", "beta"):
            if hasattr(layer, attr):
                p = getattr(layer, attr)
                newp = type(p)(p.name, weights[p.name])
                setattr(clone, attr, newp)
    if isinstance(layer, BatchNorm):
        clone.running_mean = layer.running_mean.copy()
        clone.running_var = layer.running_var.copy()
        clone.permanent_inference = True  # reference always normalizes with running stats
    return clone


def snapshot_reference(
    model: Model,
    snapshot_iteration: int = 0,
    previous: ReferenceModel | None = None,
    precision: str = "int8",
) -> ReferenceModel:
    """Deep-copy the model's weights into a quantized, forward-only replica.

    Dense weights keep their int8 form so the forward pass can use
    int8_gemm; other layers carry dequantized float copies. Batchnorm
    running statistics are copied in float and the reference always runs
    batchnorm in inference mode. ``precision='float32'`` skips
    quantization entirely (fallback for quantization-sensitive models).
    """
    if precision not in ("int8", "float32"):
        raise ValueError(f"unknown reference precision {precision!r}")
    ref_modules = []
    for m in model.modules:
        ref_layers = []
        for layer in m.layers:
            if isinstance(layer, Dense):
                if precision == "int8":
                    wq = quantize_tensor(layer.weight.value)
                    bias = dequantize_tensor(quantize_tensor(layer.bias.value))
                else:
                    wq = layer.weight.value.copy()
                    bias = layer.bias.value.copy()
                ref_layers.append(_RefDense(layer.name, wq, bias, layer.in_features))
            else:
                weights = {}
                for p in layer.parameters():
                    if precision == "int8":
                        weights[p.name] = dequantize_tensor(quantize_tensor(p.value))
                    else:
                        weights[p.name] = p.value.copy()
                ref_layers.append(_RefGeneric(_clone_layer_with_weights(layer, weights)))
        ref_modules.append(_RefModule(m.name, m.index, ref_layers))
    version = (previous.version + 1) if previous is not None else 1
    return ReferenceModel(ref_modules, snapshot_iteration, version, precision)


def _ref_dense_forward(rd: _RefDense, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != rd.in_features:
        raise ShapeMismatch(f"reference layer '{rd.name}' expects (b, {rd.in_features}), got {x.shape}")
    if isinstance(rd.weight, QuantizedTensor):
        xq = quantize_tensor(x)  # dynamic per-tensor activation quantization
        return int8_gemm(xq, rd.weight) + rd.bias
    return x @ rd.weight + rd.bias


def reference_forward(ref: ReferenceModel, batch: np.ndarray, upto_module: int) -> np.ndarray:
    """Forward through modules [0, upto_module], returning that activation."""
    if not (0 <= upto_module < ref.module_count):
        raise ValueError(f"upto_module {upto_module} out of range [0, {ref.module_count})")
    x = np.asarray(batch, dtype=FLOAT)
    for m in ref.modules[: upto_module + 1]:
        for rl in m.layers:
            if isinstance(rl, _RefDense):
                x = _ref_dense_forward(rl, x)
            else:
                x = rl.layer.forward(x, train=False, record=False)
    return x
