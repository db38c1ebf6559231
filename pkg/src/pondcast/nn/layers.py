"""Layer functions over a :class:`ParamSet`.

Layers are plain functions; ``init_*`` helpers register the parameters a
layer reads under a dotted prefix.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .ops import conv1d, maxpool1d  # noqa: F401  (re-exported layer primitives)
from .params import ParamSet
from .tensor import Tensor, as_tensor

ACTIVATIONS = {
    "linear": lambda x: x,
    "relu": ops.relu,
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
}


def dense(x, w, b, activation: str = "linear") -> Tensor:
    """``activation(x @ w + b)`` for x of shape (..., n_in)."""
    x, w = as_tensor(x), as_tensor(w)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense shape mismatch: x{x.shape} w{w.shape}")
    if x.ndim == 1:
        y = ops.reshape(ops.matmul(ops.reshape(x, (1, -1)), w), (w.shape[1],))
    else:
        y = ops.matmul(x, w)
    return ACTIVATIONS[activation](ops.add(y, b))


def init_dense(params: ParamSet, prefix: str, n_in: int, n_out: int) -> None:
    params.glorot(f"{prefix}.w", n_in, n_out)
    params.zeros(f"{prefix}.b", (n_out,))


def apply_dense(params: ParamSet, prefix: str, x, activation: str = "linear") -> Tensor:
    return dense(x, params[f"{prefix}.w"], params[f"{prefix}.b"], activation)


def init_lstm(params: ParamSet, prefix: str, n_in: int, hidden: int) -> None:
    params.uniform(f"{prefix}.w_x", (n_in, 4 * hidden), 1.0 / np.sqrt(n_in))
    params.uniform(f"{prefix}.w_h", (hidden, 4 * hidden), 1.0 / np.sqrt(hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    params.add(f"{prefix}.b", b)


def lstm_step(x, h, c, params: ParamSet, prefix: str = "lstm"):
    """One LSTM step; returns ``(h_next, c_next)``."""
    return ops.lstm_cell(x, h, c, params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"])


def lstm_run(x, h0, c0, params: ParamSet, prefix: str = "lstm"):
    """LSTM over (batch, time, features); returns ``(states, c_last)``."""
    return ops.lstm_sequence(x, h0, c0, params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"])


def init_attention(params: ParamSet, prefix: str, d_model: int, heads: int) -> None:
    if heads < 1 or d_model % heads:
        raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
    for proj in ("q", "v", "o"):
        init_dense(params, f"{prefix}.{proj}", d_model, d_model)
    # A key bias only shifts every score of a query equally; softmax ignores it.
    params.glorot(f"{prefix}.k.w", d_model, d_model)


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above."""
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, steps, d = x.shape
    return ops.transpose(ops.reshape(x, (batch, steps, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q, k, v, params: ParamSet, prefix: str, heads: int,
                         mask: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    ``q`` is (batch, Tq, d), ``k``/``v`` are (batch, Tk, d).  ``mask`` is an
    additive (Tq, Tk) array; ``-inf`` entries get exactly zero weight.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    batch, tq, _ = q.shape
    qh = _split_heads(apply_dense(params, f"{prefix}.q", q), heads)
    kh = _split_heads(ops.matmul(k, params[f"{prefix}.k.w"]), heads)
    vh = _split_heads(apply_dense(params, f"{prefix}.v", v), heads)
    scores = ops.mul(ops.matmul(qh, ops.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(d // heads))
    if mask is not None:
        scores = ops.add(scores, mask)
    weights = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(weights, vh)
    merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (batch, tq, d))
    out = apply_dense(params, f"{prefix}.o", merged)
    return (out, weights) if return_weights else out


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table of shape (length, d_model)."""
    if length < 1 or d_model < 2 or d_model % 2:
        raise ValueError("positional encoding needs length >= 1 and an even d_model")
    pos = np.arange(length)[:, None]
    rate = 10000.0 ** (-np.arange(0, d_model, 2) / d_model)
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)
    return pe


def init_layer_norm(params: ParamSet, prefix: str, d: int) -> None:
    params.add(f"{prefix}.gain", np.ones(d))
    params.zeros(f"{prefix}.bias", (d,))


def layer_norm(params: ParamSet, prefix: str, x) -> Tensor:
    return ops.add(ops.mul(ops.layer_norm(x), params[f"{prefix}.gain"]), params[f"{prefix}.bias"])
