"""Minimal differentiable layer: autodiff tape, dense/recurrent layers, Adam."""

from edgequery.nn.autodiff import Tensor, backprop, concat, linear, log_softmax, parameter, softmax
from edgequery.nn.layers import LSTMCell, MLP, Dense, Module, dense_forward, lstm_step
from edgequery.nn.optim import ParameterSet, adam_step, clip_by_global_norm, global_norm

__all__ = [
    "Dense",
    "LSTMCell",
    "MLP",
    "Module",
    "ParameterSet",
    "Tensor",
    "adam_step",
    "backprop",
    "clip_by_global_norm",
    "concat",
    "dense_forward",
    "global_norm",
    "linear",
    "log_softmax",
    "lstm_step",
    "parameter",
    "softmax",
]
