"""Network layers, normalization modes, and the multi-head incremental model.

The normalization mode threaded through every forward pass decides whether
batch-norm layers normalize by batch statistics (and update their running
estimates) or by the stored running statistics:

* ``TRAIN``       - batch statistics, running stats updated, gradients flow.
* ``EVAL``        - running statistics, no side effects.
* ``ADAPT_STATS`` - batch statistics and a running-stats update, but the
  whole computation is detached so no gradient can ever reach the layer.
  This is the mode a distillation teacher runs in when its statistics are
  allowed to track the new task's data.
* ``FROZEN``      - like EVAL; marks statistics that must stay fixed for the
  rest of the run (the fixed-statistics ablation).

Running statistics follow the usual deep-learning convention: exponential
moving average with momentum 0.1, biased variance used to normalize the
batch, unbiased variance stored in the running estimate.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import (
    ContractError,
    DegenerateBatchError,
    FormatError,
    ParameterError,
    ShapeError,
    TruncatedFileError,
)

SNAPSHOT_MAGIC = b"CLTA"
SNAPSHOT_VERSION = 1


class NormMode(Enum):
    TRAIN = "train"
    EVAL = "eval"
    ADAPT_STATS = "adapt_stats"
    FROZEN = "frozen"


_BATCH_STAT_MODES = (NormMode.TRAIN, NormMode.ADAPT_STATS)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base class: parameters list, mode-aware forward, deep clone."""

    kind: str = "layer"

    def parameters(self) -> list[Tensor]:
        return []

    def norm_parameters(self) -> list[Tensor]:
        """Parameters belonging to a normalization layer (empty otherwise)."""
        return []

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        raise NotImplementedError

    def clone(self) -> "Layer":
        return copy.deepcopy(self)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int,
                 init: str = "kaiming", rng: np.random.Generator | None = None):
        if out_features < 1:
            raise ParameterError(f"dense layer needs >= 1 output, got {out_features}")
        self.in_features = in_features
        self.out_features = out_features
        if init == "zeros":
            weight = np.zeros((in_features, out_features))
        elif init == "kaiming-uniform" or init == "kaiming":
            if rng is None:
                raise ParameterError("kaiming init requires an rng")
            weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        else:
            raise ParameterError(f"unknown init scheme '{init}'")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            raise ParameterError("conv layer requires an rng for initialization")
        weight = kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        return ad.relu(x)


class Identity(Layer):
    """Placeholder for removed normalization (the no-norm ablation)."""

    kind = "identity"

    def __init__(self, num_features: int = 0):
        self.num_features = num_features

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        return x


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        if x.data.ndim != 4:
            raise ShapeError(f"global average pool expects 4-D input, got {x.shape}")
        return ad.tensor_mean(x, axis=(2, 3))


def _channel_shape(x: Tensor, num_features: int) -> tuple[int, ...]:
    if x.data.ndim < 2 or x.shape[1] != num_features:
        raise ShapeError(f"expected {num_features} channels on axis 1, got shape {x.shape}")
    return (1, num_features) + (1,) * (x.data.ndim - 2)


class BatchNorm(Layer):
    """Per-channel batch normalization with running-statistics state.

    ``adapt_with_running`` selects the alternative ADAPT_STATS reading where
    the forward normalizes by the freshly updated running statistics instead
    of the current batch statistics.
    """

    kind = "batchnorm"

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum <= 1.0:
            raise ParameterError(f"momentum must be in (0, 1], got {momentum}")
        if eps < 0.0:
            raise ParameterError(f"eps must be >= 0, got {eps}")
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.adapt_with_running = False

    def parameters(self):
        return [self.gamma, self.beta]

    def norm_parameters(self):
        return [self.gamma, self.beta]

    def _update_running(self, x: np.ndarray, axes: tuple[int, ...]) -> None:
        count = int(np.prod([x.shape[a] for a in axes]))
        batch_mean = x.mean(axis=axes)
        batch_var = x.var(axis=axes)  # biased
        unbiased = batch_var * count / (count - 1)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * unbiased

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        shape = _channel_shape(x, self.num_features)
        axes = (0,) + tuple(range(2, x.data.ndim))
        if mode in _BATCH_STAT_MODES and x.shape[0] < 2:
            raise DegenerateBatchError(
                f"batch normalization in {mode.value} mode needs batch size >= 2, got {x.shape[0]}"
            )

        if mode is NormMode.TRAIN:
            mu = ad.tensor_mean(x, axis=axes, keepdims=True)
            centered = x - mu
            var = ad.tensor_mean(centered * centered, axis=axes, keepdims=True)
            xhat = centered / ad.sqrt(ad.add_scalar(var, self.eps))
            out = xhat * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)
            self._update_running(x.data, axes)
            return out

        if mode is NormMode.ADAPT_STATS:
            with no_grad():
                self._update_running(x.data, axes)
                if self.adapt_with_running:
                    mu = self.running_mean.reshape(shape)
                    var = self.running_var.reshape(shape)
                else:
                    mu = x.data.mean(axis=axes, keepdims=True)
                    var = x.data.var(axis=axes, keepdims=True)
                values = (x.data - mu) / np.sqrt(var + self.eps)
                values = values * self.gamma.data.reshape(shape) + self.beta.data.reshape(shape)
            return Tensor(values)

        # EVAL and FROZEN: running statistics, no side effects
        mu = Tensor(self.running_mean.reshape(shape))
        var = Tensor(self.running_var.reshape(shape))
        xhat = (x - mu) / ad.sqrt(ad.add_scalar(var, self.eps))
        return xhat * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)


class LayerNorm(Layer):
    """Per-sample normalization over all non-batch axes; no running state."""

    kind = "layernorm"

    def __init__(self, num_features: int, eps: float = 1e-5):
        self.num_features = num_features
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)

    def parameters(self):
        return [self.gamma, self.beta]

    def norm_parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        shape = _channel_shape(x, self.num_features)
        axes = tuple(range(1, x.data.ndim))
        mu = ad.tensor_mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ad.tensor_mean(centered * centered, axis=axes, keepdims=True)
        xhat = centered / ad.sqrt(ad.add_scalar(var, self.eps))
        return xhat * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)


class GroupNorm(Layer):
    """Per-sample normalization over channel groups; no running state."""

    kind = "groupnorm"

    def __init__(self, num_features: int, groups: int, eps: float = 1e-5):
        if groups < 1 or num_features % groups != 0:
            raise ParameterError(
                f"group count {groups} must divide channel count {num_features}"
            )
        self.num_features = num_features
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)

    def parameters(self):
        return [self.gamma, self.beta]

    def norm_parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x: Tensor, mode: NormMode) -> Tensor:
        shape = _channel_shape(x, self.num_features)
        n = x.shape[0]
        spatial = x.shape[2:]
        grouped = ad.reshape(x, (n, self.groups, self.num_features // self.groups) + spatial)
        axes = tuple(range(2, grouped.data.ndim))
        mu = ad.tensor_mean(grouped, axis=axes, keepdims=True)
        centered = grouped - mu
        var = ad.tensor_mean(centered * centered, axis=axes, keepdims=True)
        xhat = ad.reshape(centered / ad.sqrt(ad.add_scalar(var, self.eps)), x.shape)
        return xhat * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)


NORM_LAYER_KINDS = ("batchnorm", "layernorm", "groupnorm")


# ----------------------------------------------------------------------
# incremental model
# ----------------------------------------------------------------------


class IncrementalModel:
    """Shared backbone plus one linear classification head per task.

    Head t maps the backbone features to that task's class count; the
    concatenation of all head outputs enumerates every class seen so far,
    in task order.
    """

    def __init__(self, backbone: list[Layer], feature_dim: int):
        self.backbone = backbone
        self.heads: list[Dense] = []
        self.feature_dim = feature_dim

    def forward(self, x: Tensor, mode: NormMode = NormMode.EVAL,
                capture_features: bool = False):
        h = x
        for layer in self.backbone:
            h = layer.forward(h, mode)
        if h.data.ndim != 2 or h.shape[1] != self.feature_dim:
            raise ShapeError(
                f"backbone produced shape {h.shape}, expected (batch, {self.feature_dim})"
            )
        logits = [head.forward(h, mode) for head in self.heads]
        if capture_features:
            return logits, h
        return logits

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.backbone:
            params.extend(layer.parameters())
        for head in self.heads:
            params.extend(head.parameters())
        return params

    def norm_parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.backbone:
            params.extend(layer.norm_parameters())
        return params

    def batchnorm_layers(self) -> list[BatchNorm]:
        return [l for l in self.backbone if isinstance(l, BatchNorm)]

    def total_classes(self) -> int:
        return sum(head.out_features for head in self.heads)

    def clone(self) -> "IncrementalModel":
        model = IncrementalModel([layer.clone() for layer in self.backbone], self.feature_dim)
        model.heads = [head.clone() for head in self.heads]
        return model


def add_task_head(model: IncrementalModel, num_classes: int,
                  init: str = "kaiming-uniform", seed=None) -> IncrementalModel:
    """Append a fresh classification head; everything else is untouched.

    ``seed`` feeds numpy's generator and may be an int or a tuple of ints.
    """
    if num_classes < 1:
        raise ParameterError(f"a task head needs >= 1 class, got {num_classes}")
    rng = np.random.default_rng(seed) if init != "zeros" else None
    model.heads.append(Dense(model.feature_dim, num_classes, init=init, rng=rng))
    return model


def snapshot_model(model: IncrementalModel) -> IncrementalModel:
    """Deep copy for use as a distillation teacher; never aliases the source."""
    return model.clone()


# ----------------------------------------------------------------------
# reference architectures
# ----------------------------------------------------------------------


def _norm_layer(norm: str, num_features: int, groups: int) -> Layer:
    if norm == "batch":
        return BatchNorm(num_features)
    if norm == "layer":
        return LayerNorm(num_features)
    if norm == "group":
        return GroupNorm(num_features, groups)
    if norm == "none":
        return Identity(num_features)
    raise ParameterError(f"unknown normalization variant '{norm}'")


def build_micro_mlp(input_dim: int, norm: str = "batch", seed: int = 0,
                    hidden: int = 64, groups: int = 4) -> IncrementalModel:
    """Two dense blocks of width ``hidden``, each followed by norm + relu."""
    rng = np.random.default_rng(seed)
    backbone = [
        Dense(input_dim, hidden, rng=rng),
        _norm_layer(norm, hidden, groups),
        ReLU(),
        Dense(hidden, hidden, rng=rng),
        _norm_layer(norm, hidden, groups),
        ReLU(),
    ]
    return IncrementalModel(backbone, hidden)


def build_micro_cnn(in_channels: int, norm: str = "batch", seed: int = 0,
                    groups: int = 4) -> IncrementalModel:
    """Three stride-2 conv blocks (8/16/32 channels) with global average pool."""
    rng = np.random.default_rng(seed)
    backbone: list[Layer] = []
    channels = [in_channels, 8, 16, 32]
    for cin, cout in zip(channels, channels[1:]):
        backbone.append(Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, rng=rng))
        backbone.append(_norm_layer(norm, cout, groups))
        backbone.append(ReLU())
    backbone.append(GlobalAvgPool())
    return IncrementalModel(backbone, channels[-1])


# ----------------------------------------------------------------------
# snapshot serialization
# ----------------------------------------------------------------------

_KIND_TAGS = {
    "dense": 1,
    "conv2d": 2,
    "batchnorm": 3,
    "layernorm": 4,
    "groupnorm": 5,
    "relu": 6,
    "identity": 7,
    "global_avg_pool": 8,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def _write_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"snapshot ended early: wanted {n} bytes, got {len(data)}")
    return data


def _read_array(buf: io.BytesIO) -> np.ndarray:
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = tuple(struct.unpack("<I", _read_exact(buf, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(buf, count * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def _write_layer(buf: io.BytesIO, layer: Layer) -> None:
    buf.write(struct.pack("<B", _KIND_TAGS[layer.kind]))
    if isinstance(layer, Dense):
        buf.write(struct.pack("<II", layer.in_features, layer.out_features))
        _write_array(buf, layer.weight.data)
        _write_array(buf, layer.bias.data)
    elif isinstance(layer, Conv2d):
        buf.write(struct.pack("<IIIII", layer.in_channels, layer.out_channels,
                              layer.kernel_size, layer.stride, layer.padding))
        _write_array(buf, layer.weight.data)
        _write_array(buf, layer.bias.data)
    elif isinstance(layer, BatchNorm):
        buf.write(struct.pack("<Idd", layer.num_features, layer.momentum, layer.eps))
        _write_array(buf, layer.gamma.data)
        _write_array(buf, layer.beta.data)
        _write_array(buf, layer.running_mean)
        _write_array(buf, layer.running_var)
    elif isinstance(layer, LayerNorm):
        buf.write(struct.pack("<Id", layer.num_features, layer.eps))
        _write_array(buf, layer.gamma.data)
        _write_array(buf, layer.beta.data)
    elif isinstance(layer, GroupNorm):
        buf.write(struct.pack("<IId", layer.num_features, layer.groups, layer.eps))
        _write_array(buf, layer.gamma.data)
        _write_array(buf, layer.beta.data)
    elif isinstance(layer, Identity):
        buf.write(struct.pack("<I", layer.num_features))
    # relu / global_avg_pool carry no state


def _read_layer(buf: io.BytesIO) -> Layer:
    (tag,) = struct.unpack("<B", _read_exact(buf, 1))
    kind = _TAG_KINDS.get(tag)
    if kind is None:
        raise FormatError(f"unknown layer tag {tag}")
    if kind == "dense":
        fin, fout = struct.unpack("<II", _read_exact(buf, 8))
        layer = Dense(fin, fout, init="zeros")
        layer.weight = Tensor(_read_array(buf), requires_grad=True)
        layer.bias = Tensor(_read_array(buf), requires_grad=True)
        return layer
    if kind == "conv2d":
        cin, cout, k, stride, padding = struct.unpack("<IIIII", _read_exact(buf, 20))
        layer = Conv2d(cin, cout, k, stride, padding, rng=np.random.default_rng(0))
        layer.weight = Tensor(_read_array(buf), requires_grad=True)
        layer.bias = Tensor(_read_array(buf), requires_grad=True)
        return layer
    if kind == "batchnorm":
        c, momentum, eps = struct.unpack("<Idd", _read_exact(buf, 20))
        layer = BatchNorm(c, momentum, eps)
        layer.gamma = Tensor(_read_array(buf), requires_grad=True)
        layer.beta = Tensor(_read_array(buf), requires_grad=True)
        layer.running_mean = _read_array(buf)
        layer.running_var = _read_array(buf)
        return layer
    if kind == "layernorm":
        c, eps = struct.unpack("<Id", _read_exact(buf, 12))
        layer = LayerNorm(c, eps)
        layer.gamma = Tensor(_read_array(buf), requires_grad=True)
        layer.beta = Tensor(_read_array(buf), requires_grad=True)
        return layer
    if kind == "groupnorm":
        c, groups, eps = struct.unpack("<IId", _read_exact(buf, 16))
        layer = GroupNorm(c, groups, eps)
        layer.gamma = Tensor(_read_array(buf), requires_grad=True)
        layer.beta = Tensor(_read_array(buf), requires_grad=True)
        return layer
    if kind == "identity":
        (c,) = struct.unpack("<I", _read_exact(buf, 4))
        return Identity(c)
    if kind == "relu":
        return ReLU()
    return GlobalAvgPool()


def serialize_model(model: IncrementalModel) -> bytes:
    """Versioned flat binary snapshot; round-trips bit-exactly."""
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<I", SNAPSHOT_VERSION))
    buf.write(struct.pack("<I", model.feature_dim))
    buf.write(struct.pack("<I", len(model.backbone)))
    for layer in model.backbone:
        _write_layer(buf, layer)
    buf.write(struct.pack("<I", len(model.heads)))
    for head in model.heads:
        _write_layer(buf, head)
    return buf.getvalue()


def deserialize_model(blob: bytes) -> IncrementalModel:
    buf = io.BytesIO(blob)
    magic = _read_exact(buf, 4)
    if magic != SNAPSHOT_MAGIC:
        raise FormatError(f"bad snapshot magic {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"unsupported snapshot version {version}")
    (feature_dim,) = struct.unpack("<I", _read_exact(buf, 4))
    (n_backbone,) = struct.unpack("<I", _read_exact(buf, 4))
    backbone = [_read_layer(buf) for _ in range(n_backbone)]
    model = IncrementalModel(backbone, feature_dim)
    (n_heads,) = struct.unpack("<I", _read_exact(buf, 4))
    for _ in range(n_heads):
        head = _read_layer(buf)
        if not isinstance(head, Dense):
            raise FormatError("snapshot head record is not a dense layer")
        model.heads.append(head)
    return model


def model_checksum(model: IncrementalModel) -> str:
    return hashlib.sha256(serialize_model(model)).hexdigest()


def parameter_checksums(model: IncrementalModel) -> dict[str, str]:
    """Per-array checksums, keyed by layer position and array name.

    Lets tests pin down exactly which state a strategy touched.
    """
    sums: dict[str, str] = {}

    def put(key: str, arr: np.ndarray) -> None:
        sums[key] = hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()

    for i, layer in enumerate(model.backbone):
        prefix = f"backbone.{i}.{layer.kind}"
        if isinstance(layer, (Dense, Conv2d)):
            put(f"{prefix}.weight", layer.weight.data)
            put(f"{prefix}.bias", layer.bias.data)
        elif isinstance(layer, (BatchNorm, LayerNorm, GroupNorm)):
            put(f"{prefix}.gamma", layer.gamma.data)
            put(f"{prefix}.beta", layer.beta.data)
            if isinstance(layer, BatchNorm):
                put(f"{prefix}.running_mean", layer.running_mean)
                put(f"{prefix}.running_var", layer.running_var)
    for i, head in enumerate(model.heads):
        put(f"head.{i}.weight", head.weight.data)
        put(f"head.{i}.bias", head.bias.data)
    return sums
