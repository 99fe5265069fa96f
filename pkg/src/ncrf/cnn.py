"""Residual 1-D convolutional feature extractor.

Each layer is conv -> ReLU -> dropout -> optional max-pool. Residual
connections add a saved earlier activation to a later layer's output;
when shapes differ the source is aligned in time by strided column
selection and in channels by a learned projection applied as U^T X
(initialized to the truncated identity). The product of all strides and
pool windows must equal the samples-per-epoch, so a record of n samples
always comes out as exactly m = n / (rate * epoch_seconds) feature
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ModelParams,
    Tape,
    Tensor,
    add,
    conv1d,
    dropout,
    matmul,
    maxpool1d,
    relu,
    take_cols,
    transpose,
)
from .errors import ConfigurationError, DimensionError, ParameterError


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel_width: int
    stride: int
    out_channels: int
    pool_window: int = 1
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kernel_width < 1 or self.stride < 1 or self.out_channels < 1:
            raise ParameterError(f"invalid layer geometry: {self}")
        if self.pool_window < 1:
            raise ParameterError(f"pool window must be >= 1: {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1): {self}")

    @property
    def downsample(self) -> int:
        return self.stride * self.pool_window


@dataclass(frozen=True)
class CnnConfig:
    layers: tuple[ConvLayerSpec, ...]
    residual_pairs: tuple[tuple[int, int], ...] = ()
    input_channels: int = 1

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("CNN needs at least one layer")
        for src, tgt in self.residual_pairs:
            if not (0 <= src < tgt < len(self.layers)):
                raise ConfigurationError(f"residual pair ({src}, {tgt}) out of order or range")

    @property
    def downsample_factor(self) -> int:
        factor = 1
        for layer in self.layers:
            factor *= layer.downsample
        return factor

    def channels_of(self, idx: int) -> int:
        return self.layers[idx].out_channels if idx >= 0 else self.input_channels

    def time_ratio(self, src: int, tgt: int) -> int:
        """Length of layer src's output divided by layer tgt's."""
        ratio = 1
        for layer in self.layers[src + 1 : tgt + 1]:
            ratio *= layer.downsample
        return ratio

    def validate_rate(self, samples_per_epoch: int) -> None:
        if self.downsample_factor != samples_per_epoch:
            raise ConfigurationError(
                f"CNN downsampling {self.downsample_factor} does not equal "
                f"{samples_per_epoch} samples per epoch"
            )


def cnn_init(config: CnnConfig, rng: np.random.Generator) -> ModelParams:
    """Zero-mean uniform kernels at 1/sqrt(fan_in) scale, zero biases,
    truncated-identity residual projections."""
    params = ModelParams()
    c_in = config.input_channels
    for i, layer in enumerate(config.layers):
        fan_in = c_in * layer.kernel_width
        bound = np.sqrt(3.0 / fan_in)
        params[f"cnn.layer{i}.kernels"] = Tensor(
            rng.uniform(-bound, bound, size=(layer.out_channels, c_in, layer.kernel_width))
        )
        params[f"cnn.layer{i}.bias"] = Tensor(np.zeros(layer.out_channels))
        c_in = layer.out_channels
    for j, (src, tgt) in enumerate(config.residual_pairs):
        c_src, c_tgt = config.channels_of(src), config.channels_of(tgt)
        if c_src != c_tgt or config.time_ratio(src, tgt) != 1:
            params[f"cnn.res{j}.proj"] = Tensor(np.eye(c_src, c_tgt))
    return params


def cnn_forward(
    signal: Tensor,
    config: CnnConfig,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """Map a [C_in, n] signal to [C_last, m] features."""
    if signal.ndim != 2 or signal.shape[0] != config.input_channels:
        raise DimensionError(
            f"signal shape {signal.shape} does not match {config.input_channels} input channels"
        )
    if signal.shape[1] % config.downsample_factor != 0:
        raise ConfigurationError(
            f"signal length {signal.shape[1]} is not a multiple of the "
            f"downsampling factor {config.downsample_factor}"
        )
    sources = {src for src, _ in config.residual_pairs}
    targets = {tgt: (src, j) for j, (src, tgt) in enumerate(config.residual_pairs)}
    saved: dict[int, Tensor] = {}
    x = signal
    for i, layer in enumerate(config.layers):
        x = conv1d(
            x,
            params[f"cnn.layer{i}.kernels"],
            params[f"cnn.layer{i}.bias"],
            stride=layer.stride,
            padding="same",
            tape=tape,
        )
        x = relu(x, tape)
        if layer.dropout_rate > 0.0:
            x = dropout(x, layer.dropout_rate, training, rng, tape)
        if layer.pool_window > 1:
            x = maxpool1d(x, layer.pool_window, tape)
        if i in targets:
            src, j = targets[i]
            shortcut = saved[src]
            ratio = config.time_ratio(src, i)
            if ratio != 1:
                shortcut = take_cols(shortcut, np.arange(0, shortcut.shape[1], ratio), tape)
            proj = params.get(f"cnn.res{j}.proj")
            if proj is not None:
                shortcut = matmul(transpose(proj, tape), shortcut, tape)
            x = add(x, shortcut, tape)
        if i in sources:
            saved[i] = x
    return x


def input_span(config: CnnConfig, n: int, feature_index: int) -> tuple[int, int]:
    """Inclusive input-sample interval that can influence one output feature.

    Accounts for padding, pooling, and residual shortcuts; bounds are
    clamped to [0, n-1].
    """
    lengths = [n]
    pads = []
    for layer in config.layers:
        t_in = lengths[-1]
        t_conv = -(-t_in // layer.stride)
        total = max(0, (t_conv - 1) * layer.stride + layer.kernel_width - t_in)
        pads.append(total // 2)
        lengths.append(t_conv // layer.pool_window)
    targets = {tgt: src for src, tgt in config.residual_pairs}

    # pending[i] = interval of layer i's *output* indices still to trace back
    pending: dict[int, tuple[int, int]] = {len(config.layers) - 1: (feature_index, feature_index)}
    lo_in, hi_in = n, -1
    for i in range(len(config.layers) - 1, -1, -1):
        if i not in pending:
            continue
        a, b = pending.pop(i)
        if i in targets:
            src = targets[i]
            ratio = config.time_ratio(src, i)
            j = pending.get(src)
            sa, sb = a * ratio, b * ratio
            pending[src] = (min(sa, j[0]), max(sb, j[1])) if j else (sa, sb)
        layer = config.layers[i]
        a = a * layer.pool_window
        b = b * layer.pool_window + layer.pool_window - 1
        a = a * layer.stride - pads[i]
        b = b * layer.stride - pads[i] + layer.kernel_width - 1
        if i == 0:
            lo_in, hi_in = min(lo_in, a), max(hi_in, b)
        else:
            j = pending.get(i - 1)
            pending[i - 1] = (min(a, j[0]), max(b, j[1])) if j else (a, b)
    return max(0, lo_in), min(n - 1, hi_in)


def desk_cnn_config(channels: int = 32, dropout_rate: float = 0.1) -> CnnConfig:
    """Small stack for the 4 Hz / 4 s profile (downsampling 16)."""
    return CnnConfig(
        layers=(
            ConvLayerSpec(6, 2, channels, 1, dropout_rate),
            ConvLayerSpec(4, 2, channels, 2, dropout_rate),
            ConvLayerSpec(4, 2, channels, 1, dropout_rate),
        ),
        residual_pairs=((0, 2),),
    )


def paper_cnn_config(channels: int = 256, dropout_rate: float = 0.1) -> CnnConfig:
    """Five-layer stack for the 32 Hz / 30 s profile (downsampling 960)."""
    return CnnConfig(
        layers=(
            ConvLayerSpec(10, 2, channels, 1, dropout_rate),
            ConvLayerSpec(10, 2, channels, 5, dropout_rate),
            ConvLayerSpec(8, 2, channels, 2, dropout_rate),
            ConvLayerSpec(8, 2, channels, 2, dropout_rate),
            ConvLayerSpec(6, 3, channels, 1, dropout_rate),
        ),
        residual_pairs=((1, 3),),
    )
