"""Gradient engine, small networks and the Adam optimizer."""
from app.autodiff.adam import AdamState, adam_step
from app.autodiff.mlp import mlp_eval, mlp_forward_var, mlp_init, time_embedding
from app.autodiff.tape import ParamVector, Var, backward, gradient, value_and_grad

__all__ = [
    "AdamState",
    "ParamVector",
    "Var",
    "adam_step",
    "backward",
    "gradient",
    "mlp_eval",
    "mlp_forward_var",
    "mlp_init",
    "time_embedding",
    "value_and_grad",
]
