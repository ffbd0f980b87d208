"""Temporal encoder-decoder that maps a bag of instance features to per-instance scores.

Pipeline for a ``(T, d)`` bag (T = 32 by default)::

    enc1: conv(F1) -> leaky_relu -> channel_norm -> delay -> pool    T   -> T/2
    enc2: conv(F2) -> leaky_relu -> channel_norm -> delay -> pool    T/2 -> T/4
    dec1: upsample -> conv(F2) -> leaky_relu -> channel_norm         T/4 -> T/2
    dec2: upsample -> conv(F1) -> leaky_relu -> channel_norm         T/2 -> T
    head: dropout -> dense(F1 -> 1) -> sigmoid

The one-step delay before each pool makes every window cover (t-1, t). The
upsampled decoder then never reads an encoder step later than its own.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import core
from .core import ConvLayerParams, Tensor
from .errors import FormatError, ShapeError, ValidationError

CHECKPOINT_MAGIC = b"TEDMILCK"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    input_dim: int
    bag_size: int = 32
    kernel_length: int = 4
    encoder_filters: tuple = (512, 128)
    decoder_filters: Optional[tuple] = None
    leaky_slope: float = 0.01
    dropout_rate: float = 0.5
    epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.encoder_filters = tuple(int(f) for f in self.encoder_filters)
        if self.decoder_filters is None:
            self.decoder_filters = self.encoder_filters[::-1]
        self.decoder_filters = tuple(int(f) for f in self.decoder_filters)
        self.validate()

    def validate(self):
        if self.input_dim < 1:
            raise ValidationError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.encoder_filters) != 2 or len(self.decoder_filters) != 2:
            raise ValidationError("the network has exactly two encoder and two decoder stages")
        if min(self.encoder_filters + self.decoder_filters) < 1:
            raise ValidationError("all filter counts must be >= 1")
        if self.bag_size < 4 or self.bag_size % 4:
            raise ValidationError(
                f"bag_size must be a positive multiple of 4 (two pooling stages), got {self.bag_size}"
            )
        if not 1 <= self.kernel_length <= self.bag_size:
            raise ValidationError(
                f"kernel_length must lie in [1, bag_size={self.bag_size}], got {self.kernel_length}"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValidationError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.epsilon <= 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["decoder_filters"] = list(self.decoder_filters)
        return d


@dataclass
class DenseParams:
    weights: Tensor
    bias: Tensor


@dataclass
class ModelParams:
    config: NetworkConfig
    enc1: ConvLayerParams
    enc2: ConvLayerParams
    dec1: ConvLayerParams
    dec2: ConvLayerParams
    head: DenseParams
    accumulators: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.named_tensors():
            t.name = name
            self.accumulators.setdefault(name, np.zeros_like(t.value))
            if self.accumulators[name].shape != t.value.shape:
                raise ShapeError(f"accumulator for {name} has shape {self.accumulators[name].shape}")

    def named_tensors(self) -> list:
        out = []
        for stage in ("enc1", "enc2", "dec1", "dec2"):
            layer = getattr(self, stage)
            out += [(f"{stage}.kernels", layer.kernels), (f"{stage}.bias", layer.bias)]
        out += [("head.weights", self.head.weights), ("head.bias", self.head.bias)]
        return out

    def kernel_tensors(self) -> list:
        """Tensors subject to L2 weight decay (conv kernels and dense weights, no biases)."""
        return [t for name, t in self.named_tensors() if not name.endswith(".bias")]

    def zero_grad(self):
        for _, t in self.named_tensors():
            t.grad = None

    def copy(self) -> "ModelParams":
        arrays = {name: t.value.copy() for name, t in self.named_tensors()}
        accum = {k: v.copy() for k, v in self.accumulators.items()}
        return _assemble(NetworkConfig(**self.config.to_dict()), arrays, accum)


def _conv_layer(rng, f_out, k, f_in) -> ConvLayerParams:
    fan_in, fan_out = k * f_in, k * f_out
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(f_out, k, f_in))
    return ConvLayerParams(Tensor(w, requires_grad=True), Tensor(np.zeros(f_out), requires_grad=True))


def init_params(config: NetworkConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-uniform kernels and head weights, zero biases."""
    F1, F2 = config.encoder_filters
    D1, D2 = config.decoder_filters
    K = config.kernel_length
    enc1 = _conv_layer(rng, F1, K, config.input_dim)
    enc2 = _conv_layer(rng, F2, K, F1)
    dec1 = _conv_layer(rng, D1, K, F2)
    dec2 = _conv_layer(rng, D2, K, D1)
    limit = np.sqrt(6.0 / (D2 + 1))
    head = DenseParams(
        Tensor(rng.uniform(-limit, limit, size=D2), requires_grad=True),
        Tensor(np.zeros(1), requires_grad=True),
    )
    return ModelParams(config, enc1, enc2, dec1, dec2, head)


def _stage(x, layer, cfg, trace, name):
    h = core.conv1d_causal(x, layer)
    if trace is not None:
        trace[f"{name}.conv"] = h
    h = core.leaky_relu(h, cfg.leaky_slope)
    h = core.channel_norm(h, cfg.epsilon)
    if trace is not None:
        trace[f"{name}.norm"] = h
    return h


def forward(params: ModelParams, bag, training: bool = False, rng=None, trace: Optional[dict] = None) -> Tensor:
    """Scores in (0, 1) with shape ``(..., T, 1)`` for a ``(..., T, d)`` bag.

    If ``trace`` is a dict it receives the intermediate tensors keyed by
    stage name, including ``"logits"`` (the pre-sigmoid head output).
    """
    cfg = params.config
    x = core.as_tensor(bag)
    if x.value.ndim < 2 or x.channels != cfg.input_dim:
        raise ShapeError(f"bag of shape {x.shape} does not match input_dim={cfg.input_dim}")
    if x.times != cfg.bag_size:
        raise ShapeError(f"bag has {x.times} instances, network expects {cfg.bag_size}")

    h = _stage(x, params.enc1, cfg, trace, "enc1")
    h = core.max_pool_time(core.delay_time(h))
    h = _stage(h, params.enc2, cfg, trace, "enc2")
    h = core.max_pool_time(core.delay_time(h))
    if trace is not None:
        trace["bottleneck"] = h
    h = _stage(core.upsample_time(h), params.dec1, cfg, trace, "dec1")
    h = _stage(core.upsample_time(h), params.dec2, cfg, trace, "dec2")
    h = core.dropout(h, cfg.dropout_rate, rng, training)
    logits = core.time_distributed_dense(h, params.head.weights, params.head.bias)
    if trace is not None:
        trace["logits"] = logits
    return core.sigmoid(logits)


def predict(params: ModelParams, bags) -> np.ndarray:
    """Inference-mode scores as a plain array of shape ``(..., T)``."""
    return forward(params, bags, training=False).value[..., 0]


def score_video(params: ModelParams, features, bag_builder=None, **bag_kwargs) -> np.ndarray:
    """Build a bag from per-clip features and score it in inference mode."""
    if bag_builder is None:
        from .data import build_bag as bag_builder
    bag = bag_builder(np.asarray(features, dtype=float), n_segments=params.config.bag_size, **bag_kwargs)
    return predict(params, bag.instances)


# ---------------------------------------------------------------------------
# checkpoint files
#
# Layout (all integers little-endian):
#   0   8 bytes   magic "TEDMILCK"
#   8   u32       format version
#   12  u32       header length H
#   16  H bytes   UTF-8 JSON: {"config", "arrays": [[name, shape], ...], "extra"}
#   16+H          float64 little-endian payload, arrays in header order.
# Array order: enc1.kernels, enc1.bias, enc2.*, dec1.*, dec2.*, head.weights,
# head.bias, then the same names prefixed "accum/" for the optimizer state.


def save_checkpoint(path, params: ModelParams, extra: Optional[dict] = None):
    arrays = [(name, t.value) for name, t in params.named_tensors()]
    arrays += [(f"accum/{name}", params.accumulators[name]) for name, _ in params.named_tensors()]
    header = {
        "config": params.config.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + payload)
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(params, extra)`` from a checkpoint written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=8)
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}", offset=16) from None

    offset = 16 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise FormatError(f"{path}: payload truncated, expected {end} bytes, got {len(raw)}", offset=offset)
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes", offset=offset)

    config = NetworkConfig(**header["config"])
    accum = {k[len("accum/"):]: v for k, v in arrays.items() if k.startswith("accum/")}
    values = {k: v for k, v in arrays.items() if not k.startswith("accum/")}
    return _assemble(config, values, accum), header["extra"]


def _assemble(config, values: dict, accum: dict) -> ModelParams:
    def t(name):
        return Tensor(values[name], requires_grad=True)

    layers = {s: ConvLayerParams(t(f"{s}.kernels"), t(f"{s}.bias")) for s in ("enc1", "enc2", "dec1", "dec2")}
    head = DenseParams(t("head.weights"), t("head.bias"))
    params = ModelParams(config, head=head, accumulators=dict(accum), **layers)
    F1, F2 = config.encoder_filters
    expected = {
        "enc1.kernels": (F1, config.kernel_length, config.input_dim),
        "enc2.kernels": (F2, config.kernel_length, F1),
        "dec1.kernels": (config.decoder_filters[0], config.kernel_length, F2),
        "dec2.kernels": (config.decoder_filters[1], config.kernel_length, config.decoder_filters[0]),
        "head.weights": (config.decoder_filters[1],),
    }
    for name, shape in expected.items():
        if values[name].shape != shape:
            raise FormatError(f"array {name} has shape {values[name].shape}, config implies {shape}")
    return params
