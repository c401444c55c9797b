"""Scaled MBConv classifier (EfficientNet-style block structure) for 3D volumes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from ..errors import NonFiniteActivation, NonFiniteGradient, ShapeMismatch
from .layers import BatchNorm, Conv3d, Dense, GlobalAvgPool, MBConv, Sequential, SiLU

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    expand: int
    channels: int
    stride: int
    repeats: int = 1
    se_ratio: float = 0.25


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 2
    stem_channels: int = 8
    blocks: tuple = ()
    head_channels: int = 32
    input_shape: tuple = (32, 32, 32)
    zero_head: bool = False

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 or 2")
        for b in blocks:
            if b.stride not in (1, 2):
                raise ValueError(f"block stride must be 1 or 2, got {b.stride}")
            if not 0 < b.se_ratio <= 1:
                raise ValueError(f"se_ratio must lie in (0, 1], got {b.se_ratio}")
            if min(b.expand, b.channels, b.repeats) < 1:
                raise ValueError("block widths must be >= 1")
        if min(self.stem_channels, self.head_channels) < 1:
            raise ValueError("widths must be >= 1")

    @property
    def total_stride(self) -> int:
        s = 2
        for b in self.blocks:
            s *= b.stride
        return s

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "blocks": tuple(BlockSpec(**b) for b in d["blocks"]),
                      "input_shape": tuple(d["input_shape"])})

    def with_channels(self, in_channels: int) -> "NetworkConfig":
        return NetworkConfig(**{**self.__dict__, "in_channels": in_channels})


PRESETS = {
    "tiny": dict(stem_channels=8, head_channels=32, input_shape=(32, 32, 32), blocks=(
        BlockSpec(1, 8, 2), BlockSpec(4, 16, 2), BlockSpec(4, 16, 1))),
    "small": dict(stem_channels=16, head_channels=64, input_shape=(64, 64, 64), blocks=(
        BlockSpec(1, 16, 1), BlockSpec(6, 24, 2, 2), BlockSpec(6, 40, 2, 2), BlockSpec(6, 80, 2, 2))),
    # B3 widths/depths with 3x3x3 kernels throughout
    "b3-like": dict(stem_channels=40, head_channels=1536, input_shape=(96, 96, 96), blocks=(
        BlockSpec(1, 24, 1, 2), BlockSpec(6, 32, 2, 3), BlockSpec(6, 48, 2, 3), BlockSpec(6, 96, 2, 5),
        BlockSpec(6, 136, 1, 5), BlockSpec(6, 232, 2, 6), BlockSpec(6, 384, 1, 2))),
}


def preset(name: str, in_channels: int = 2, **overrides) -> NetworkConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return NetworkConfig(in_channels=in_channels, **{**PRESETS[name], **overrides})


@dataclass
class NetworkParams:
    """All tensors of one network (trainable weights and BN running stats)."""

    config: NetworkConfig
    tensors: dict
    trainable: tuple
    version: int = CHECKPOINT_VERSION

    @property
    def parameter_count(self) -> int:
        return int(sum(self.tensors[n].size for n in self.trainable))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.trainable, self.version)

    def check_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteGradient(f"tensor {k} is not finite")

    def __getitem__(self, name):
        return self.tensors[name]


@dataclass
class ForwardResult:
    probabilities: np.ndarray
    logits: np.ndarray


def bce_with_logits(logits, labels) -> float:
    """Mean binary cross-entropy computed from logits without overflow."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


class MBConvNet:
    """Stem conv -> MBConv blocks -> 1x1 head -> global average pool -> dense logit.

    Inputs are ``(B, C, X, Y, Z)`` arrays; computation runs in the input's
    floating dtype.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        layers = [Conv3d("stem.conv", config.in_channels, config.stem_channels, 3, 2, input_grad=False),
                  BatchNorm("stem.bn", config.stem_channels), SiLU()]
        cin = config.stem_channels
        for i, b in enumerate(config.blocks):
            for r in range(b.repeats):
                stride = b.stride if r == 0 else 1
                layers.append(MBConv(f"block{i}.{r}", cin, b.channels, b.expand, stride, b.se_ratio))
                cin = b.channels
        layers += [Conv3d("head.conv", cin, config.head_channels, 1), BatchNorm("head.bn", config.head_channels),
                   SiLU(), GlobalAvgPool(), Dense("fc", config.head_channels, 1, zero_init=config.zero_head)]
        self.body = Sequential(layers)

    def init_params(self, seed: int = 0) -> NetworkParams:
        rng = np.random.default_rng(seed)
        tensors = {k: np.asarray(v, dtype=np.float64) for k, v in self.body.init(rng).items()}
        trainable = tuple(self.body.param_shapes())
        return NetworkParams(self.config, tensors, trainable)

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim != 5:
            raise ShapeMismatch(f"expected (B, C, X, Y, Z) input, got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"network expects {self.config.in_channels} channels, got {x.shape[1]}")
        s = self.config.total_stride
        if any(n % s for n in x.shape[2:]):
            raise ShapeMismatch(f"spatial dims {x.shape[2:]} must be divisible by the total stride {s}")
        if x.dtype not in (np.float32, np.float64):
            x = x.astype(np.float64)
        return x

    def forward(self, params: NetworkParams, x, mode: str = "eval", update_stats: bool = True) -> ForwardResult:
        if params.config != self.config:
            raise ShapeMismatch("parameters were built for a different configuration")
        x = self._check_input(x)
        h = np.ascontiguousarray(np.moveaxis(x, 1, -1))
        logits = self.body.forward(params.tensors, h, train=(mode == "train"), update_stats=update_stats)[:, 0]
        if not np.all(np.isfinite(logits)):
            raise NonFiniteActivation("non-finite logits")
        logits = logits.astype(np.float64)
        return ForwardResult(expit(logits), logits)

    def loss_and_grads(self, params: NetworkParams, x, labels, mode: str = "train",
                       update_stats: bool = True) -> tuple[float, dict, ForwardResult]:
        """Forward + backward for the mean binary cross-entropy loss."""
        y = np.asarray(labels, dtype=np.float64).ravel()
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        res = self.forward(params, x, mode, update_stats)
        loss = bce_with_logits(res.logits, y)
        dt = np.float32 if np.asarray(x).dtype == np.float32 else np.float64
        dlogits = ((res.probabilities - y) / len(y)).astype(dt)[:, None]
        grads: dict = {}
        self.body.backward(params.tensors, grads, dlogits)
        for name in params.trainable:
            g = grads.setdefault(name, np.zeros_like(params.tensors[name]))
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"gradient of {name} is not finite")
        return loss, grads, res

    def predict(self, params: NetworkParams, x, batch_size: int = 16) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(params, x[i:i + batch_size]).probabilities for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)
