"""Structured output layer: chain CRF potentials and exact inference.

Node scores come from a linear projection of the recurrent hidden
states; transitions are a learned [K, K] score matrix (plus an optional
second-order matrix over labels two steps apart). Everything is kept in
the log domain: the partition function uses the forward recursion, node
marginals use forward-backward, and decoding uses max-plus Viterbi.

The ``brute_force_*`` functions enumerate all K^m sequences and exist
purely as independent oracles for the dynamic programs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    ModelParams,
    Tape,
    Tensor,
    add,
    affine,
    gather_pairs,
    logsumexp,
    mul,
    neg,
    reduce_sum,
    reshape,
    row,
    scale,
    stack_cols,
    sub,
    transpose,
)
from .errors import (
    DimensionError,
    EmptySequenceError,
    GuardError,
    ParameterError,
)

BRUTE_FORCE_LIMIT = 1_000_000


@dataclass
class CrfPotentials:
    """Per-position node scores plus shared transition scores (log domain)."""

    scores: Tensor  # [m, K]
    transitions: Tensor  # [K, K], entry [i, j] scores the move i -> j
    edge_bias: Tensor  # scalar added to every first-order edge
    second_order: Tensor | None = None  # [K, K] over (y_{t-2}, y_t) pairs

    def __post_init__(self):
        if self.scores.ndim != 2:
            raise DimensionError(f"node scores must be [m, K], got {self.scores.shape}")
        m, k = self.scores.shape
        if m < 1:
            raise EmptySequenceError("potentials need at least one position")
        if self.transitions.shape != (k, k):
            raise DimensionError(
                f"transition matrix {self.transitions.shape} does not match {k} labels"
            )
        if self.edge_bias.size != 1:
            raise DimensionError("edge bias must be a scalar")
        if self.second_order is not None and self.second_order.shape != (k, k):
            raise DimensionError(
                f"second-order matrix {self.second_order.shape} does not match {k} labels"
            )

    @property
    def length(self) -> int:
        return self.scores.shape[0]

    @property
    def num_labels(self) -> int:
        return self.scores.shape[1]

    @property
    def order(self) -> int:
        return 2 if self.second_order is not None else 1


def crf_init(hidden_dim: int, num_labels: int = 4, order: int = 1,
             rng: np.random.Generator | None = None) -> ModelParams:
    """Fresh CRF parameters: scaled-uniform node projection, zero transitions."""
    if order not in (1, 2):
        raise ParameterError(f"CRF order must be 1 or 2, got {order}")
    if rng is None:
        rng = np.random.default_rng(0)
    bound = np.sqrt(3.0 / hidden_dim)
    params = ModelParams()
    params["crf.w_n"] = Tensor(rng.uniform(-bound, bound, size=(num_labels, hidden_dim)))
    params["crf.b_n"] = Tensor(np.zeros(num_labels))
    params["crf.T1"] = Tensor(np.zeros((num_labels, num_labels)))
    params["crf.b_e"] = Tensor(np.zeros(()))
    if order == 2:
        params["crf.T2"] = Tensor(np.zeros((num_labels, num_labels)))
    return params


def node_scores(hidden: Tensor, params: ModelParams, tape: Tape | None = None) -> Tensor:
    """S[t, k] = w_n[k] . h_t + b_n[k] for hidden states laid out [dim, m]."""
    return transpose(affine(hidden, params["crf.w_n"], params["crf.b_n"], tape), tape)


def potentials_from_hidden(hidden: Tensor, params: ModelParams,
                           tape: Tape | None = None) -> CrfPotentials:
    return CrfPotentials(
        scores=node_scores(hidden, params, tape),
        transitions=params["crf.T1"],
        edge_bias=params["crf.b_e"],
        second_order=params.get("crf.T2"),
    )


def _check_labels(y, m: int, k: int) -> np.ndarray:
    labels = np.asarray(y, dtype=np.intp)
    if labels.shape != (m,):
        raise ParameterError(f"label sequence has length {labels.size}, expected {m}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k})")
    return labels


def sequence_score(potentials: CrfPotentials, y, tape: Tape | None = None) -> Tensor:
    """Unnormalized log-score of one label sequence."""
    m, k = potentials.length, potentials.num_labels
    labels = _check_labels(y, m, k)
    total = reduce_sum(gather_pairs(potentials.scores, np.arange(m), labels, tape), tape=tape)
    if m >= 2:
        edges = reduce_sum(
            gather_pairs(potentials.transitions, labels[:-1], labels[1:], tape), tape=tape
        )
        total = add(total, add(edges, scale(potentials.edge_bias, float(m - 1), tape), tape), tape)
    if potentials.order == 2 and m >= 3:
        skips = reduce_sum(
            gather_pairs(potentials.second_order, labels[:-2], labels[2:], tape), tape=tape
        )
        total = add(total, skips, tape)
    return total


# ---------------------------------------------------------------------------
# exact inference (forward, forward-backward, Viterbi)
# ---------------------------------------------------------------------------


def _forward_1(p: CrfPotentials, tape: Tape | None) -> list[Tensor]:
    """First-order forward messages, one [K] tensor per position."""
    m, k = p.length, p.num_labels
    alphas = [row(p.scores, 0, tape)]
    for t in range(1, m):
        prev = reshape(alphas[-1], (k, 1), tape)
        msg = add(add(prev, p.transitions, tape), p.edge_bias, tape)
        alphas.append(add(logsumexp(msg, axis=0, tape=tape), row(p.scores, t, tape), tape))
    return alphas


def _backward_1(p: CrfPotentials, tape: Tape | None) -> list[Tensor]:
    m, k = p.length, p.num_labels
    betas = [Tensor(np.zeros(k))]
    for t in range(m - 2, -1, -1):
        nxt = add(row(p.scores, t + 1, tape), betas[0], tape)
        msg = add(add(p.transitions, reshape(nxt, (1, k), tape), tape), p.edge_bias, tape)
        betas.insert(0, logsumexp(msg, axis=1, tape=tape))
    return betas


def _forward_2(p: CrfPotentials, tape: Tape | None) -> list[Tensor]:
    """Second-order forward messages over label pairs (y_{t-1}, y_t)."""
    m, k = p.length, p.num_labels
    first = add(
        add(reshape(row(p.scores, 0, tape), (k, 1), tape),
            reshape(row(p.scores, 1, tape), (1, k), tape), tape),
        add(p.transitions, p.edge_bias, tape), tape,
    )
    pairs = [first]
    for t in range(2, m):
        lifted = add(
            reshape(pairs[-1], (k, k, 1), tape),
            reshape(p.second_order, (k, 1, k), tape), tape,
        )
        collapsed = logsumexp(lifted, axis=0, tape=tape)  # [j, k]
        step = add(add(p.transitions, p.edge_bias, tape),
                   reshape(row(p.scores, t, tape), (1, k), tape), tape)
        pairs.append(add(collapsed, step, tape))
    return pairs


def _backward_2(p: CrfPotentials, tape: Tape | None) -> list[Tensor]:
    m, k = p.length, p.num_labels
    betas = [Tensor(np.zeros((k, k)))]
    for t in range(m - 2, 0, -1):
        inner = add(
            add(p.transitions, reshape(row(p.scores, t + 1, tape), (1, k), tape), tape),
            add(betas[0], p.edge_bias, tape), tape,
        )  # [k, l]
        lifted = add(reshape(inner, (1, k, k), tape),
                     reshape(p.second_order, (k, 1, k), tape), tape)  # [j, k, l]
        betas.insert(0, logsumexp(lifted, axis=2, tape=tape))
    return betas


def log_partition(potentials: CrfPotentials, tape: Tape | None = None) -> Tensor:
    """log Z: log-sum over all K^m sequences of exp(sequence_score)."""
    if potentials.length == 1:
        return logsumexp(row(potentials.scores, 0, tape), tape=tape)
    if potentials.order == 1:
        return logsumexp(_forward_1(potentials, tape)[-1], tape=tape)
    return logsumexp(_forward_2(potentials, tape)[-1], tape=tape)


def _log_node_marginals(potentials: CrfPotentials, tape: Tape | None) -> tuple[Tensor, Tensor]:
    """Return (log M as [m, K], log Z); rows of exp(log M) sum to one."""
    m, k = potentials.length, potentials.num_labels
    if m == 1:
        s0 = row(potentials.scores, 0, tape)
        z = logsumexp(s0, tape=tape)
        return reshape(sub(s0, z, tape), (1, k), tape), z
    if potentials.order == 1:
        alphas = _forward_1(potentials, tape)
        betas = _backward_1(potentials, tape)
        z = logsumexp(alphas[-1], tape=tape)
        cols = [sub(add(alphas[t], betas[t], tape), z, tape) for t in range(m)]
        return transpose(stack_cols(cols, tape), tape), z
    pair_fwd = _forward_2(potentials, tape)
    pair_bwd = _backward_2(potentials, tape)
    z = logsumexp(pair_fwd[-1], tape=tape)
    cols = []
    joined = [add(pair_fwd[t - 1], pair_bwd[t - 1], tape) for t in range(1, m)]
    cols.append(sub(logsumexp(joined[0], axis=1, tape=tape), z, tape))
    for t in range(1, m):
        cols.append(sub(logsumexp(joined[t - 1], axis=0, tape=tape), z, tape))
    return transpose(stack_cols(cols, tape), tape), z


def marginals(potentials: CrfPotentials, tape: Tape | None = None) -> Tensor:
    """Per-position label probabilities M[t, k] from forward-backward."""
    from .autodiff import exp as _exp

    log_m, _ = _log_node_marginals(potentials, tape)
    return _exp(log_m, tape)


def crf_nll(potentials: CrfPotentials, y, tape: Tape | None = None) -> Tensor:
    """Negative log-likelihood log Z - score(y); non-negative."""
    return sub(log_partition(potentials, tape), sequence_score(potentials, y, tape), tape)


def cost_sensitive_loss(potentials: CrfPotentials, y, class_weights,
                        tape: Tape | None = None) -> Tensor:
    """Inverse-frequency weighted marginal loss, -sum_t a_{y_t} log M[t, y_t].

    Gradients flow through the full forward-backward recursion.
    """
    m, k = potentials.length, potentials.num_labels
    labels = _check_labels(y, m, k)
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,) or np.any(weights <= 0):
        raise ParameterError(f"class weights must be {k} positive values")
    log_m, _ = _log_node_marginals(potentials, tape)
    picked = gather_pairs(log_m, np.arange(m), labels, tape)
    weighted = mul(picked, Tensor(weights[labels]), tape)
    return neg(reduce_sum(weighted, tape=tape), tape)


def viterbi(potentials: CrfPotentials) -> tuple[list[int], float]:
    """Highest-scoring label sequence and its score.

    Ties resolve to the lowest label index, applied from the final
    position backwards, so the result is deterministic and matches the
    brute-force oracle's rule.
    """
    s = potentials.scores.data
    t1 = potentials.transitions.data
    be = float(potentials.edge_bias.data)
    m, k = s.shape
    if m == 1:
        best = int(np.argmax(s[0]))
        return [best], float(s[0, best])
    if potentials.order == 1:
        v = s[0]
        back: list[np.ndarray] = []
        for t in range(1, m):
            cand = v[:, None] + t1 + be  # [prev, cur]
            back.append(np.argmax(cand, axis=0))
            v = cand.max(axis=0) + s[t]
        last = int(np.argmax(v))
        path = [last]
        for bp in reversed(back):
            path.append(int(bp[path[-1]]))
        path.reverse()
        return path, float(v[last])

    t2 = potentials.second_order.data
    pair = s[0][:, None] + s[1][None, :] + t1 + be  # [y0, y1]
    back2: list[np.ndarray] = []
    for t in range(2, m):
        cand = pair[:, :, None] + t2[:, None, :]  # [i, j, k]
        back2.append(np.argmax(cand, axis=0))
        pair = cand.max(axis=0) + t1 + be + s[t][None, :]
    col_best = pair.max(axis=0)
    k_last = int(np.argmax(col_best))
    j_last = int(np.argmax(pair[:, k_last]))
    path = [j_last, k_last]
    for bp in reversed(back2):
        j, kk = path[0], path[1]
        path.insert(0, int(bp[j, kk]))
    return path, float(pair[j_last, k_last])


def l1_prox(params: ModelParams, threshold: float) -> ModelParams:
    """Soft-threshold every CRF parameter coordinate in place.

    Only entries whose name starts with ``crf.`` are touched, so the
    feature extractor's weights are never shrunk. Returns ``params``.
    """
    if threshold < 0:
        raise ParameterError(f"prox threshold must be >= 0, got {threshold}")
    if threshold == 0:
        return params
    for name, t in params.items():
        if name.startswith("crf."):
            d = t.data
            np.copyto(d, np.sign(d) * np.maximum(np.abs(d) - threshold, 0.0))
    return params


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _all_label_sequences(k: int, m: int) -> np.ndarray:
    grids = np.indices((k,) * m).reshape(m, -1).T
    grids.setflags(write=False)
    return grids


def _enumerate_scores(potentials: CrfPotentials) -> tuple[np.ndarray, np.ndarray]:
    m, k = potentials.length, potentials.num_labels
    if k**m > BRUTE_FORCE_LIMIT:
        raise GuardError(f"{k}^{m} sequences exceed the brute-force bound")
    seqs = _all_label_sequences(k, m)
    s = potentials.scores.data
    scores = s[np.arange(m), seqs].sum(axis=1)
    if m >= 2:
        scores = scores + potentials.transitions.data[seqs[:, :-1], seqs[:, 1:]].sum(axis=1)
        scores = scores + float(potentials.edge_bias.data) * (m - 1)
    if potentials.order == 2 and m >= 3:
        scores = scores + potentials.second_order.data[seqs[:, :-2], seqs[:, 2:]].sum(axis=1)
    return seqs, scores


def brute_force_log_partition(potentials: CrfPotentials) -> float:
    _, scores = _enumerate_scores(potentials)
    peak = scores.max()
    return float(peak + np.log(np.exp(scores - peak).sum()))


def brute_force_marginals(potentials: CrfPotentials) -> np.ndarray:
    seqs, scores = _enumerate_scores(potentials)
    m, k = potentials.length, potentials.num_labels
    peak = scores.max()
    w = np.exp(scores - peak)
    w /= w.sum()
    out = np.empty((m, k))
    for t in range(m):
        out[t] = np.bincount(seqs[:, t], weights=w, minlength=k)
    return out


def brute_force_best(potentials: CrfPotentials) -> tuple[list[int], float]:
    """Exhaustive argmax with the Viterbi tie rule (lowest labels, read
    from the final position backwards)."""
    seqs, scores = _enumerate_scores(potentials)
    top = scores.max()
    ties = np.flatnonzero(scores == top)
    winner = min(ties, key=lambda i: tuple(seqs[i, ::-1]))
    return [int(v) for v in seqs[winner]], float(top)
