"""Per-position softmax output layer and its (optionally weighted) loss.

This is the independent-decision head: each epoch is classified from
its hidden state alone, with no transition structure.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ModelParams,
    Tape,
    Tensor,
    affine,
    exp,
    gather_pairs,
    log,
    logsumexp,
    mul,
    neg,
    reduce_sum,
    reshape,
    sub,
    transpose,
)
from .errors import ParameterError


def head_init(hidden_dim: int, num_labels: int = 4,
              rng: np.random.Generator | None = None) -> ModelParams:
    if rng is None:
        rng = np.random.default_rng(0)
    bound = np.sqrt(3.0 / hidden_dim)
    return ModelParams({
        "head.W_o": Tensor(rng.uniform(-bound, bound, size=(num_labels, hidden_dim))),
        "head.b": Tensor(np.zeros(num_labels)),
    })


def softmax_logits(hidden: Tensor, params: ModelParams, tape: Tape | None = None) -> Tensor:
    """Unnormalized class scores, [m, K]."""
    return transpose(affine(hidden, params["head.W_o"], params["head.b"], tape), tape)


def softmax_predict(hidden: Tensor, params: ModelParams, tape: Tape | None = None) -> Tensor:
    """Class probabilities P[t, k], rows summing to one."""
    logits = softmax_logits(hidden, params, tape)
    return softmax_rows(logits, tape)


def softmax_rows(logits: Tensor, tape: Tape | None = None) -> Tensor:
    m = logits.shape[0]
    lse = logsumexp(logits, axis=1, tape=tape)
    return exp(sub(logits, reshape(lse, (m, 1), tape), tape), tape)


def softmax_nll(probs: Tensor, y, class_weights=None, tape: Tape | None = None) -> Tensor:
    """-sum_t a_{y_t} log P[t, y_t]; weights default to all ones."""
    m, k = probs.shape
    labels = np.asarray(y, dtype=np.intp)
    if labels.shape != (m,):
        raise ParameterError(f"label sequence has length {labels.size}, expected {m}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k})")
    picked = log(gather_pairs(probs, np.arange(m), labels, tape), tape)
    if class_weights is not None:
        weights = np.asarray(class_weights, dtype=np.float64)
        if weights.shape != (k,) or np.any(weights <= 0):
            raise ParameterError(f"class weights must be {k} positive values")
        picked = mul(picked, Tensor(weights[labels]), tape)
    return neg(reduce_sum(picked, tape=tape), tape)


def argmax_decode(probs_or_logits: Tensor) -> list[int]:
    """Per-position argmax, first index on ties."""
    return [int(i) for i in np.argmax(probs_or_logits.data, axis=1)]
