"""Input-gradient saliency for one epoch of a record.

The per-sample weight is the absolute gradient of the target class's
pre-normalization score (CRF node score, or logit for the softmax kind)
with respect to the raw input signal, restricted to the samples owned
by the chosen epoch and normalized by the slice maximum. An all-zero
gradient slice stays all-zero.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tape, Tensor, gather_pairs, reduce_sum
from .crf import CrfPotentials, node_scores, viterbi
from .data import Record, SleepStage, STAGE_TOKENS
from .errors import ParameterError
from .heads import softmax_logits
from .model import check_record, hidden_states
from .training import Checkpoint


def _resolve_target(target, scores: Tensor, checkpoint: Checkpoint, epoch_index: int) -> int:
    if isinstance(target, str) and target != "predicted":
        tok = target.strip().upper()
        if tok not in STAGE_TOKENS:
            raise ParameterError(f"unknown target class {target!r}; use W/R/L/D or 'predicted'")
        return STAGE_TOKENS.index(tok)
    if target != "predicted":
        label = int(target)
        if not 0 <= label < scores.shape[1]:
            raise ParameterError(f"target class {label} out of range")
        return label
    if checkpoint.model_config.uses_crf:
        params = checkpoint.params
        pot = CrfPotentials(
            scores=Tensor(scores.data),
            transitions=params["crf.T1"],
            edge_bias=params["crf.b_e"],
            second_order=params.get("crf.T2"),
        )
        path, _ = viterbi(pot)
        return path[epoch_index]
    return int(np.argmax(scores.data[epoch_index]))


def saliency_map(
    checkpoint: Checkpoint,
    record: Record,
    epoch_index: int,
    target: str | int | SleepStage = "predicted",
) -> np.ndarray:
    """Per-sample weights in [0, 1] for the chosen epoch (dropout off)."""
    config = checkpoint.model_config
    check_record(config, record)
    if not 0 <= epoch_index < record.num_epochs:
        raise ParameterError(
            f"epoch {epoch_index} out of range for {record.num_epochs}-epoch record"
        )
    tape = Tape()
    signal = Tensor(record.signal.reshape(1, -1))
    hidden = hidden_states(config, checkpoint.params, signal, training=False, tape=tape)
    if config.uses_crf:
        scores = node_scores(hidden, checkpoint.params, tape)
    else:
        scores = softmax_logits(hidden, checkpoint.params, tape)
    label = _resolve_target(target, scores, checkpoint, epoch_index)
    score = reduce_sum(gather_pairs(scores, [epoch_index], [label], tape), tape=tape)
    tape.backward(score)
    grad = tape.grad(signal)[0]
    spe = record.samples_per_epoch
    weights = np.abs(grad[epoch_index * spe : (epoch_index + 1) * spe])
    peak = weights.max()
    if peak > 0:
        weights = weights / peak
    return weights


def export_saliency(
    weights: np.ndarray,
    signal_slice: np.ndarray,
    path_prefix: str | Path,
    strip_height: int = 16,
) -> tuple[Path, Path]:
    """Write ``<prefix>.csv`` (signal,weight rows) and ``<prefix>.pgm``.

    The graymap inverts the weights so a weight of 1 is black: darker
    pixels mean more influence on the score.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    signal_slice = np.asarray(signal_slice, dtype=np.float64).reshape(-1)
    if weights.size != signal_slice.size:
        raise ParameterError(
            f"{weights.size} weights do not match {signal_slice.size} signal samples"
        )
    prefix = Path(path_prefix)
    csv_path = prefix.with_suffix(prefix.suffix + ".csv")
    pgm_path = prefix.with_suffix(prefix.suffix + ".pgm")

    with open(csv_path, "w") as f:
        for v, w in zip(signal_slice, weights):
            f.write(f"{float(v)!r},{float(w)!r}\n")

    pixels = np.clip(np.rint(255.0 * (1.0 - weights)), 0, 255).astype(np.uint8)
    strip = np.tile(pixels, (strip_height, 1))
    with open(pgm_path, "wb") as f:
        f.write(f"P5\n{weights.size} {strip_height}\n255\n".encode("ascii"))
        f.write(strip.tobytes())
    return csv_path, pgm_path
