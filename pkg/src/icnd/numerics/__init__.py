"""Dense linear algebra, attention primitives and reverse-mode gradients."""
from . import tensor as ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .layers import (
    MLP,
    Param,
    attention,
    attention_probs,
    cosine_distance,
    matmul,
    mlp_forward,
    pairwise_cosine_distance,
    relu_attention,
    softmax_rows,
    uniform_init,
)
from .optim import AdamW, adamw_step, ema_update
from .tensor import Tensor, grad_scale, lift, stop_gradient

__all__ = [
    "AdamW", "MLP", "Param", "Tensor", "adamw_step", "attention", "attention_probs", "check_gradients",
    "cosine_distance", "ema_update", "grad_scale", "lift", "matmul", "mlp_forward",
    "numeric_grad", "ops", "pairwise_cosine_distance", "relative_error",
    "relu_attention", "softmax_rows", "stop_gradient", "uniform_init",
]
