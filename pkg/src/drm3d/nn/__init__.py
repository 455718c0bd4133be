"""Minimal dense-tensor autodiff engine and transformer layers."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (CrossAttentionBlock, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter,
                     TransformerBlock, multi_head_attention)
from .optim import adam_step, clip_grad_norm, cosine_lr
from .tensor import Tensor, as_tensor, concat, gelu, layer_norm, linear, matmul, softmax, square, stack

__all__ = [
    "Tensor", "Parameter", "Module", "Linear", "LayerNorm", "FeedForward", "MultiHeadAttention",
    "TransformerBlock", "CrossAttentionBlock", "multi_head_attention", "adam_step", "clip_grad_norm",
    "cosine_lr", "save_checkpoint", "load_checkpoint", "as_tensor", "concat", "stack", "gelu",
    "layer_norm", "linear", "matmul", "softmax", "square",
]
