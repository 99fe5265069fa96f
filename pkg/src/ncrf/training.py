"""End-to-end training with Adam, early stopping on validation kappa,
an L1 proximal step on the CRF block, and checkpoint persistence.

Runs are bitwise deterministic for a fixed (data, config, seed): record
order, dropout masks, and initialization all derive from one splittable
seed, and gradient accumulation follows a fixed order regardless of the
worker-thread count (capped by the NCRF_THREADS environment variable).

Checkpoint container: magic ``NCRF``, little-endian u32 version, u32
array count, then per array (u32 name length, utf-8 name, u32 rank,
u64 dims, float64 payload), then a u32-length key=value metadata block.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ModelParams, Tape, Tensor
from .cnn import CnnConfig, ConvLayerSpec, desk_cnn_config
from .crf import l1_prox
from .data import Record, class_prior
from .errors import (
    CheckpointFormatError,
    KindMismatchError,
    NumericError,
    ParameterError,
)
from .model import ModelConfig, evaluate, init_params, record_loss
from .rng import SplitRng

CHECKPOINT_MAGIC = b"NCRF"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    model_kind: str = "crf"
    cost_sensitive: bool = False
    l1_lambda: float = 0.005
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 1
    seed: int = 0
    hidden_dim: int = 64
    cnn: CnnConfig | None = None  # None picks the desk stack
    candidate_tanh: bool = False
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.l1_lambda < 0:
            raise ParameterError("l1_lambda must be >= 0")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ParameterError("patience, max_epochs, and batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_kappa: float


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: ModelParams
    seed: int
    epoch: int
    val_kappa: float
    extras: dict[str, str] = field(default_factory=dict)

    def require_kind(self, expected: str) -> None:
        if self.model_config.model_kind != expected:
            raise KindMismatchError(
                f"checkpoint was trained as {self.model_config.model_kind!r}, "
                f"not {expected!r}"
            )


class Adam:
    """Per-array Adam with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name in params:
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


def _worker_count() -> int:
    raw = os.environ.get("NCRF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _record_gradients(
    model_config: ModelConfig,
    params: ModelParams,
    record: Record,
    weights,
    rng_node: SplitRng,
    epoch: int,
    rec_idx: int,
) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    rng = rng_node.child("dropout", epoch, rec_idx).generator()
    loss = record_loss(model_config, params, record, weights, training=True, rng=rng, tape=tape)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite training loss at epoch {epoch}, record {record.subject_id!r}"
        )
    tape.backward(loss)
    return value, {name: tape.grad(t) for name, t in params.items()}


def train(
    train_records: list[Record],
    validation_records: list[Record],
    config: TrainConfig,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Optimize the full network; returns the best-kappa checkpoint and
    the per-epoch (train loss, validation kappa) history."""
    if not train_records or not validation_records:
        raise ParameterError("training and validation splits must be non-empty")
    rates = {(r.sample_rate_hz, r.epoch_seconds) for r in train_records + validation_records}
    if len(rates) != 1:
        raise ParameterError(f"records disagree on rate/epoch geometry: {sorted(rates)}")
    (rate, epoch_seconds), = rates

    model_config = ModelConfig(
        model_kind=config.model_kind,
        cnn=config.cnn if config.cnn is not None else desk_cnn_config(),
        hidden_dim=config.hidden_dim,
        sample_rate_hz=rate,
        epoch_seconds=epoch_seconds,
        candidate_tanh=config.candidate_tanh,
    )
    root = SplitRng(config.seed)
    params = init_params(model_config, root)
    weights = class_prior([r.labels for r in train_records]) if config.cost_sensitive else None

    adam = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    prox_threshold = config.l1_lambda * config.learning_rate
    workers = _worker_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    history: list[EpochStats] = []
    best_params = params.clone()
    best_kappa = float("-inf")
    best_epoch = 0
    stall = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = root.child("shuffle", epoch).generator().permutation(len(train_records))
            losses = []
            for start in range(0, len(order), config.batch_size):
                batch = [int(i) for i in order[start : start + config.batch_size]]
                jobs = [
                    (model_config, params, train_records[i], weights, root, epoch, i)
                    for i in batch
                ]
                if pool is not None and len(jobs) > 1:
                    results = list(pool.map(lambda a: _record_gradients(*a), jobs))
                else:
                    results = [_record_gradients(*a) for a in jobs]
                grads = {name: np.zeros(t.shape) for name, t in params.items()}
                for value, g in results:  # fixed accumulation order: batch order
                    losses.append(value)
                    for name in grads:
                        grads[name] += g[name]
                inv = 1.0 / len(batch)
                for name in grads:
                    grads[name] *= inv
                _clip_global_norm(grads, config.clip_norm)
                adam.step(params, grads)
                if model_config.uses_crf and prox_threshold > 0:
                    l1_prox(params, prox_threshold)
            val_kappa = evaluate(model_config, params, validation_records).kappa
            history.append(EpochStats(epoch, float(np.mean(losses)), val_kappa))
            if val_kappa > best_kappa:
                best_kappa = val_kappa
                best_params = params.clone()
                best_epoch = epoch
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    extras = {
        "cost_sensitive": "1" if config.cost_sensitive else "0",
        "l1_lambda": repr(config.l1_lambda),
        "learning_rate": repr(config.learning_rate),
    }
    checkpoint = Checkpoint(
        model_config=model_config,
        params=best_params,
        seed=config.seed,
        epoch=best_epoch,
        val_kappa=best_kappa,
        extras=extras,
    )
    return checkpoint, history


def write_history(history: list[EpochStats], path: str | Path) -> None:
    lines = ["epoch,train_loss,val_kappa"]
    lines += [f"{h.epoch},{float(h.train_loss)!r},{float(h.val_kappa)!r}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _cnn_to_text(cnn: CnnConfig) -> dict[str, str]:
    layers = ";".join(
        f"{l.kernel_width}:{l.stride}:{l.out_channels}:{l.pool_window}:{l.dropout_rate!r}"
        for l in cnn.layers
    )
    residuals = ";".join(f"{s}-{t}" for s, t in cnn.residual_pairs)
    return {
        "cnn_layers": layers,
        "cnn_residuals": residuals,
        "cnn_input_channels": str(cnn.input_channels),
    }


def _cnn_from_text(meta: dict[str, str]) -> CnnConfig:
    layers = []
    for part in meta["cnn_layers"].split(";"):
        w, s, c, p, d = part.split(":")
        layers.append(ConvLayerSpec(int(w), int(s), int(c), int(p), float(d)))
    residuals = tuple(
        (int(a), int(b))
        for a, b in (pair.split("-") for pair in meta["cnn_residuals"].split(";") if pair)
    )
    return CnnConfig(tuple(layers), residuals, int(meta["cnn_input_channels"]))


_META_ORDER = (
    "format_version",
    "model_kind",
    "hidden_dim",
    "sample_rate_hz",
    "epoch_seconds",
    "candidate_tanh",
    "num_labels",
    "cnn_layers",
    "cnn_residuals",
    "cnn_input_channels",
    "seed",
    "epoch",
    "val_kappa",
)


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    cfg = checkpoint.model_config
    meta = {
        "format_version": str(CHECKPOINT_VERSION),
        "model_kind": cfg.model_kind,
        "hidden_dim": str(cfg.hidden_dim),
        "sample_rate_hz": str(cfg.sample_rate_hz),
        "epoch_seconds": str(cfg.epoch_seconds),
        "candidate_tanh": "1" if cfg.candidate_tanh else "0",
        "num_labels": str(cfg.num_labels),
        **_cnn_to_text(cfg.cnn),
        "seed": str(checkpoint.seed),
        "epoch": str(checkpoint.epoch),
        "val_kappa": repr(float(checkpoint.val_kappa)),
    }
    meta_lines = [f"{k}={meta[k]}" for k in _META_ORDER]
    meta_lines += [f"x.{k}={v}" for k, v in sorted(checkpoint.extras.items())]
    meta_bytes = ("\n".join(meta_lines) + "\n").encode("utf-8")

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(checkpoint.params))
    for name in sorted(checkpoint.params):
        arr = checkpoint.params[name].data
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse and validate a checkpoint file; never returns a partial model."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    n_arrays = r.u32("array count")
    params = ModelParams()
    for i in range(n_arrays):
        name_len = r.u32(f"array {i} name length")
        name = r.take(name_len, f"array {i} name").decode("utf-8")
        rank = r.u32(f"{name}: rank")
        if rank > 8:
            raise CheckpointFormatError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"{name}: dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * count, f"{name}: payload")
        params[name] = Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims).copy())
    meta_len = r.u32("metadata length")
    meta_text = r.take(meta_len, "metadata").decode("utf-8")
    if r.pos != len(r.data):
        raise CheckpointFormatError("trailing bytes after metadata")

    meta: dict[str, str] = {}
    for line in meta_text.splitlines():
        if line and "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    for key in _META_ORDER:
        if key not in meta:
            raise CheckpointFormatError(f"metadata missing {key!r}")

    model_config = ModelConfig(
        model_kind=meta["model_kind"],
        cnn=_cnn_from_text(meta),
        hidden_dim=int(meta["hidden_dim"]),
        sample_rate_hz=int(meta["sample_rate_hz"]),
        epoch_seconds=int(meta["epoch_seconds"]),
        candidate_tanh=meta["candidate_tanh"] == "1",
        num_labels=int(meta["num_labels"]),
    )
    _validate_shapes(model_config, params)
    extras = {k[2:]: v for k, v in meta.items() if k.startswith("x.")}
    return Checkpoint(
        model_config=model_config,
        params=params,
        seed=int(meta["seed"]),
        epoch=int(meta["epoch"]),
        val_kappa=float(meta["val_kappa"]),
        extras=extras,
    )


def _validate_shapes(config: ModelConfig, params: ModelParams) -> None:
    reference = init_params(config, 0)
    stored = set(params)
    expected = set(reference)
    if stored != expected:
        missing = sorted(expected - stored)
        surplus = sorted(stored - expected)
        detail = (f"missing {missing}" if missing else "") + (
            f" unexpected {surplus}" if surplus else ""
        )
        raise CheckpointFormatError(f"array table does not match model kind: {detail.strip()}")
    for name, ref in reference.items():
        if params[name].shape != ref.shape:
            raise CheckpointFormatError(
                f"{name}: stored shape {params[name].shape}, expected {ref.shape}"
            )
