"""Mini training engine with plasticity-guided layer freezing.

Trains small sequential networks while measuring per-module training
plasticity against an int8-quantized reference model, freezing converged
module prefixes to skip backward compute and gradient synchronization,
and caching frozen-prefix activations to skip forward compute.
"""

from glacier.config import TrainConfig, parse_config
from glacier.harness import RunResult, evaluate, load_checkpoint, restore_model, train
from glacier.nn import (
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    Layer,
    LayerModule,
    LrSchedule,
    MaxPool2d,
    Model,
    Parameter,
    Relu,
    count_flops,
    finite_diff_check,
    sgd_step,
    softmax_cross_entropy,
    step_decay_lr,
)
from glacier.plasticity import sp_loss
from glacier.quant import (
    dequantize_tensor,
    int8_gemm,
    quantize_tensor,
    reference_forward,
    snapshot_reference,
)

__version__ = "0.1.0"
