"""Small fully connected networks over flat parameter vectors.

The same forward pass exists twice: :func:`mlp_eval` runs on plain numpy
arrays for sampling, :func:`mlp_forward_var` records on the gradient tape for
training. Both read weights from the same :class:`ParamVector` layout.
"""
from typing import Optional, Union

import numpy as np

from app.autodiff import tape
from app.autodiff.tape import ParamVector, Var
from app.core.errors import ConfigurationError, ShapeError
from app.schemas.experiment import MlpSpec

_NUMPY_ACTIVATIONS = {
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(a, 0.0),
    "silu": lambda a: a / (1.0 + np.exp(-a)),
}


def time_embedding(t: Union[float, np.ndarray], dim: int, batch: int) -> np.ndarray:
    """Sinusoidal features ``sin(2^k pi t), cos(2^k pi t)`` for ``k < dim / 2``.

    Returns:
        (batch, dim) array
    """
    if dim == 0:
        return np.zeros((batch, 0))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
    freqs = (2.0 ** np.arange(dim // 2)) * np.pi
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def mlp_init(spec: MlpSpec, seed: int) -> ParamVector:
    """Initialize weights with fan-in scaled uniform draws; the last layer is zero.

    Raises:
        ConfigurationError: if a width is not positive
    """
    widths = spec.layer_widths
    if len(widths) < 3 or any(w <= 0 for w in widths):
        raise ConfigurationError(f"Invalid layer widths: {widths}")
    rng = np.random.default_rng(seed)
    chunks, layout = [], []
    n_layers = len(widths) - 1
    for layer in range(n_layers):
        fan_in, fan_out = widths[layer], widths[layer + 1]
        if layer == n_layers - 1:
            weight = np.zeros((fan_in, fan_out))
            bias = np.zeros(fan_out)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            bias = rng.uniform(-bound, bound, size=fan_out)
        chunks += [weight.reshape(-1), bias]
        layout += [(f"W{layer}", (fan_in, fan_out)), (f"b{layer}", (fan_out,))]
    return ParamVector(np.concatenate(chunks), layout)


def _inputs(spec: MlpSpec, t, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != spec.state_dim:
        raise ShapeError(f"Network expects states of dimension {spec.state_dim}, got shape {x.shape}")
    if spec.time_embedding_dim == 0:
        return x
    return np.concatenate([x, time_embedding(t, spec.time_embedding_dim, x.shape[0])], axis=1)


def mlp_eval(spec: MlpSpec, params: ParamVector, t: Optional[Union[float, np.ndarray]],
             x: np.ndarray) -> np.ndarray:
    """Evaluate the network at one state ``(d,)`` or a batch ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = _inputs(spec, t, x[None, :] if single else x)
    activation = _NUMPY_ACTIVATIONS[spec.activation]
    n_layers = len(spec.layer_widths) - 1
    for layer in range(n_layers):
        h = h @ params.segment(f"W{layer}") + params.segment(f"b{layer}")
        if layer < n_layers - 1:
            h = activation(h)
    return h[0] if single else h


def mlp_forward_var(spec: MlpSpec, params: ParamVector, flat: Var, t, x) -> Var:
    """Tape version of :func:`mlp_eval` for a batch ``x`` of shape ``(n, d)``.

    ``flat`` carries the parameter values (usually a leaf); ``params`` only
    supplies the layout. ``x`` may itself be a tape value.
    """
    x = tape.lift(x)
    if x.ndim != 2 or x.shape[1] != spec.state_dim:
        raise ShapeError(f"Network expects states of dimension {spec.state_dim}, got shape {x.shape}")
    h = x
    if spec.time_embedding_dim:
        h = tape.concat([x, time_embedding(t, spec.time_embedding_dim, x.shape[0])], axis=1)
    activation = tape.ACTIVATIONS[spec.activation]
    offsets = {name: (start, stop, shape) for name, start, stop, shape in params.offsets()}
    n_layers = len(spec.layer_widths) - 1
    for layer in range(n_layers):
        weight = tape.segment(flat, *offsets[f"W{layer}"])
        bias = tape.segment(flat, *offsets[f"b{layer}"])
        h = tape.affine(h, weight, bias)
        if layer < n_layers - 1:
            h = activation(h)
    return h
