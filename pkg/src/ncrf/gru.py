"""Unidirectional gated recurrent layer over the CNN feature columns.

The update and reset gates are standard sigmoids. The candidate state
is 2*sigmoid(x) - 1 by default, matching the model this implements as
printed; ``candidate_tanh=True`` swaps in the textbook tanh (the two
differ only by the inner argument scale). Either way the hidden state
is a convex combination of the previous state and a value in (-1, 1),
so with a zero initial state every coordinate stays inside (-1, 1).
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ModelParams,
    Tape,
    Tensor,
    add,
    add_const,
    affine,
    col,
    matmul,
    mul,
    neg,
    scale,
    sigmoid,
    stack_cols,
    tanh,
)
from .errors import DimensionError, EmptySequenceError


def gru_init(feature_dim: int, hidden_dim: int, rng: np.random.Generator) -> ModelParams:
    """Scaled-uniform projections, zero biases."""
    params = ModelParams()
    wb = np.sqrt(3.0 / feature_dim)
    ub = np.sqrt(3.0 / hidden_dim)
    for gate in ("z", "r", "h"):
        params[f"gru.W_{gate}"] = Tensor(rng.uniform(-wb, wb, size=(hidden_dim, feature_dim)))
        params[f"gru.U_{gate}"] = Tensor(rng.uniform(-ub, ub, size=(hidden_dim, hidden_dim)))
        params[f"gru.b_{gate}"] = Tensor(np.zeros(hidden_dim))
    return params


def gru_forward(
    features: Tensor,
    params: ModelParams,
    h0: Tensor | None = None,
    candidate_tanh: bool = False,
    tape: Tape | None = None,
) -> Tensor:
    """Run the recurrence over [feature_dim, m] columns; returns [hidden, m]."""
    if features.ndim != 2:
        raise DimensionError(f"expected [feature_dim, m] input, got {features.shape}")
    m = features.shape[1]
    if m == 0:
        raise EmptySequenceError("GRU input has zero time steps")
    hidden_dim = params["gru.U_z"].shape[0]
    h = h0 if h0 is not None else Tensor(np.zeros(hidden_dim))
    if h.shape != (hidden_dim,):
        raise DimensionError(f"initial state shape {h.shape} != ({hidden_dim},)")

    # gate input projections for every step at once
    in_z = affine(features, params["gru.W_z"], params["gru.b_z"], tape)
    in_r = affine(features, params["gru.W_r"], params["gru.b_r"], tape)
    in_h = affine(features, params["gru.W_h"], params["gru.b_h"], tape)

    states = []
    for t in range(m):
        u = sigmoid(add(col(in_z, t, tape), matmul(params["gru.U_z"], h, tape), tape), tape)
        r = sigmoid(add(col(in_r, t, tape), matmul(params["gru.U_r"], h, tape), tape), tape)
        pre = add(col(in_h, t, tape), mul(r, matmul(params["gru.U_h"], h, tape), tape), tape)
        if candidate_tanh:
            cand = tanh(pre, tape)
        else:
            cand = add_const(scale(sigmoid(pre, tape), 2.0, tape), -1.0, tape)
        keep = add_const(neg(u, tape), 1.0, tape)
        h = add(mul(u, h, tape), mul(keep, cand, tape), tape)
        states.append(h)
    return stack_cols(states, tape)
