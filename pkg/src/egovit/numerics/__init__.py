from . import tensor
from .tensor import Tensor, as_tensor, no_grad, parameter
from .layers import (
    ConfigError,
    LayerNormParams,
    LinearParams,
    LstmLayer,
    LstmParams,
    MhaParams,
    MlpParams,
    ShapeError,
    count_parameters,
    gelu,
    init_layer_norm,
    init_linear,
    init_lstm,
    init_mha,
    init_mlp,
    layer_norm,
    linear_forward,
    lstm_forward,
    mean_over_axis,
    mlp_forward,
    multi_head_attention,
    named_parameters,
    softmax,
    trunc_normal,
)

__all__ = [
    "tensor", "Tensor", "as_tensor", "no_grad", "parameter",
    "ConfigError", "ShapeError", "LayerNormParams", "LinearParams", "LstmLayer", "LstmParams",
    "MhaParams", "MlpParams", "count_parameters", "gelu", "init_layer_norm", "init_linear",
    "init_lstm", "init_mha", "init_mlp", "layer_norm", "linear_forward", "lstm_forward",
    "mean_over_axis", "mlp_forward", "multi_head_attention", "named_parameters", "softmax",
    "trunc_normal",
]
