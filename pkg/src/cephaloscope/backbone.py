"""MBConv + squeeze-excitation regressor with compound scaling.

The stage table follows the EfficientNet-B0 layout (operator, kernel, stride,
channels, layers); :func:`efficient_nano` shrinks it to a desk-sized network
that still exercises every operator kind.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor

CHECKPOINT_MAGIC = "cephaloscope-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A backbone configuration violates its constraints."""


class Operator(str, enum.Enum):
    PLAIN_CONV = "PlainConv"
    MBCONV = "MBConv"


class Head(str, enum.Enum):
    AGE_ONLY = "AgeOnly"
    AGE_AND_GENDER = "AgeAndGender"


@dataclass(frozen=True)
class StageSpec:
    operator: Operator
    expansion_factor: int
    kernel_size: int
    stride: int
    out_channels: int
    num_layers: int

    def __post_init__(self):
        object.__setattr__(self, "operator", Operator(self.operator))
        if self.kernel_size not in (1, 3, 5):
            raise ConfigError(f"kernel_size must be 1, 3 or 5, got {self.kernel_size}")
        if self.expansion_factor not in (1, 6):
            raise ConfigError(f"expansion_factor must be 1 or 6, got {self.expansion_factor}")
        for name in ("stride", "out_channels", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")


# B0 layout. Strides are the ones that produce the printed resolution column
# (224, 112, 112, 56, 28, 14, 14, 7, 7) as each stage's input size.
EFFICIENTNET_B0_STAGES = (
    StageSpec(Operator.PLAIN_CONV, 1, 3, 2, 32, 1),
    StageSpec(Operator.MBCONV, 1, 3, 1, 16, 1),
    StageSpec(Operator.MBCONV, 6, 3, 2, 24, 2),
    StageSpec(Operator.MBCONV, 6, 5, 2, 24, 2),
    StageSpec(Operator.MBCONV, 6, 3, 2, 80, 3),
    StageSpec(Operator.MBCONV, 6, 5, 1, 112, 3),
    StageSpec(Operator.MBCONV, 6, 5, 2, 192, 4),
    StageSpec(Operator.MBCONV, 6, 3, 1, 320, 1),
    StageSpec(Operator.PLAIN_CONV, 1, 1, 1, 1280, 1),
)

CONSTRAINT_RANGE = (1.9, 2.1)


@dataclass(frozen=True)
class BackboneConfig:
    stages: tuple[StageSpec, ...]
    phi: float = 0.0
    alpha_d: float = 1.2
    beta_w: float = 1.1
    gamma_r: float = 1.15
    base_resolution: int = 224
    head: Head = Head.AGE_ONLY
    input_channels: int = 2
    se_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "head", Head(self.head))
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if self.phi < 0:
            raise ConfigError("phi must be non-negative")
        if min(self.alpha_d, self.beta_w, self.gamma_r) < 1:
            raise ConfigError("alpha_d, beta_w and gamma_r must all be >= 1")
        if self.base_resolution < 1 or self.input_channels < 1:
            raise ConfigError("base_resolution and input_channels must be positive")

    @property
    def resource_product(self) -> float:
        return self.alpha_d * self.beta_w**2 * self.gamma_r**2

    def check_constraint(self) -> None:
        lo, hi = CONSTRAINT_RANGE
        if not lo <= self.resource_product <= hi:
            raise ConfigError(
                f"alpha*beta^2*gamma^2 = {self.resource_product:.4f} outside [{lo}, {hi}]"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head.value
        d["stages"] = [{**asdict(s), "operator": s.operator.value} for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)


def round_channels(c: float) -> int:
    """Nearest multiple of 4 (halves round up), never below 4."""
    return max(4, int(math.floor(c / 4 + 0.5)) * 4)


def scale_config(base: BackboneConfig, phi: float) -> BackboneConfig:
    """Apply compound scaling: depth alpha^phi, width beta^phi, resolution gamma^phi."""
    base.check_constraint()
    if phi < 0:
        raise ConfigError("phi must be non-negative")
    d = base.alpha_d**phi
    w = base.beta_w**phi
    r = base.gamma_r**phi
    stages = tuple(
        replace(s, num_layers=math.ceil(s.num_layers * d - 1e-9), out_channels=round_channels(s.out_channels * w))
        for s in base.stages
    )
    return replace(base, stages=stages, phi=phi, base_resolution=int(round(base.base_resolution * r)))


def efficient_nano(head: Head | str = Head.AGE_ONLY, input_channels: int = 2) -> BackboneConfig:
    """B0 pattern with channels / 8 (min 4, multiple of 4) and at most 2 layers per stage."""
    stages = tuple(
        replace(s, out_channels=round_channels(s.out_channels / 8), num_layers=min(s.num_layers, 2))
        for s in EFFICIENTNET_B0_STAGES
    )
    return BackboneConfig(stages=stages, base_resolution=64, head=Head(head), input_channels=input_channels)


def efficientnet_b0(head: Head | str = Head.AGE_ONLY, input_channels: int = 2) -> BackboneConfig:
    return BackboneConfig(stages=EFFICIENTNET_B0_STAGES, head=Head(head), input_channels=input_channels)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered parameter registry; the declaration order is the checkpoint order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(data.astype(E.get_dtype()), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def conv(self, name: str, shape: tuple[int, ...]) -> Tensor:
        # He-normal: fan_in = product of all kernel axes but the first
        fan_in = int(np.prod(shape[1:]))
        return self._add(name, self.rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))

    def fc(self, name: str, shape: tuple[int, int], std: float = 0.01) -> Tensor:
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, n: int) -> Tensor:
        return self._add(name, np.zeros(n))

    def ones(self, name: str, n: int) -> Tensor:
        return self._add(name, np.ones(n))


class Affine:
    """Per-channel learnable gain/shift standing in for batch normalization."""

    def __init__(self, store: ParamStore, prefix: str, channels: int):
        self.gain = store.ones(f"{prefix}.gain", channels)
        self.shift = store.zeros(f"{prefix}.shift", channels)

    def __call__(self, x: Tensor) -> Tensor:
        return E.channel_affine(x, self.gain, self.shift)


class ConvUnit:
    """conv -> affine -> optional ReLU."""

    def __init__(self, store, prefix, cin, cout, kernel, stride=1, act=True):
        self.weight = store.conv(f"{prefix}.weight", (cout, cin, kernel, kernel))
        self.bias = store.zeros(f"{prefix}.bias", cout)
        self.affine = Affine(store, f"{prefix}.affine", cout)
        self.stride = stride
        self.padding = kernel // 2
        self.act = act
        self.in_channels = cin

    def __call__(self, x: Tensor) -> Tensor:
        y = self.affine(E.conv2d(x, self.weight, self.bias, self.stride, self.padding))
        return E.relu(y) if self.act else y


class SqueezeExcite:
    def __init__(self, store, prefix, channels, reduced):
        self.w1 = store.fc(f"{prefix}.reduce.weight", (reduced, channels))
        self.b1 = store.zeros(f"{prefix}.reduce.bias", reduced)
        self.w2 = store.fc(f"{prefix}.expand.weight", (channels, reduced))
        self.b2 = store.zeros(f"{prefix}.expand.bias", channels)

    def gate(self, x: Tensor) -> Tensor:
        s = E.global_avg_pool(x)
        s = E.relu(E.fully_connected(s, self.w1, self.b1))
        return E.sigmoid(E.fully_connected(s, self.w2, self.b2))

    def __call__(self, x: Tensor) -> Tensor:
        return E.channel_gate(x, self.gate(x))


def se_forward(se: SqueezeExcite, x: Tensor) -> Tensor:
    return se(x)


class MBConv:
    def __init__(self, store, prefix, cin, cout, expansion, kernel, stride, se_ratio):
        self.in_channels = cin
        self.out_channels = cout
        self.stride = stride
        mid = cin * expansion
        self.expand = ConvUnit(store, f"{prefix}.expand", cin, mid, 1) if expansion != 1 else None
        self.dw_weight = store.conv(f"{prefix}.depthwise.weight", (mid, 1, kernel, kernel))
        self.dw_affine = Affine(store, f"{prefix}.depthwise.affine", mid)
        self.padding = kernel // 2
        self.se = SqueezeExcite(store, f"{prefix}.se", mid, max(1, cin // se_ratio))
        self.project = ConvUnit(store, f"{prefix}.project", mid, cout, 1, act=False)

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"MBConv expects {self.in_channels} input channels, got shape {x.shape}")
        h = self.expand(x) if self.expand is not None else x
        h = E.relu(self.dw_affine(E.depthwise_conv2d(h, self.dw_weight, self.stride, self.padding)))
        h = self.se(h)
        h = self.project(h)
        return E.add(h, x) if self.has_skip else h


def mbconv_forward(block: MBConv, x: Tensor) -> Tensor:
    return block(x)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Prediction:
    age: Tensor
    gender_logit: Tensor | None = None
    features: Tensor | None = None


class Network:
    """Stage stack -> global average pool -> FC head.

    ``forward`` also exposes the final stage output (``features``), which is
    what Grad-CAM differentiates against.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        store = ParamStore(np.random.default_rng(seed))
        self.layers: list = []
        cin = config.input_channels
        for si, st in enumerate(config.stages):
            for li in range(st.num_layers):
                stride = st.stride if li == 0 else 1
                prefix = f"stage{si + 1}.{li}"
                if st.operator is Operator.PLAIN_CONV:
                    layer = ConvUnit(store, prefix, cin, st.out_channels, st.kernel_size, stride)
                else:
                    layer = MBConv(
                        store, prefix, cin, st.out_channels, st.expansion_factor,
                        st.kernel_size, stride, config.se_ratio,
                    )
                self.layers.append(layer)
                cin = st.out_channels
        self.feature_channels = cin
        n_out = 2 if config.head is Head.AGE_AND_GENDER else 1
        self.head_weight = store.fc("head.weight", (n_out, cin))
        self.head_bias = store.zeros("head.bias", n_out)
        self.params = store.params

    @property
    def resolution(self) -> int:
        return self.config.base_resolution

    @property
    def has_gender(self) -> bool:
        return self.config.head is Head.AGE_AND_GENDER

    @property
    def target_layer(self):
        """The final convolutional stage, or None when the last stage is not convolutional."""
        if not self.layers:
            return None
        return self.layers[-1]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def forward(self, batch: Tensor) -> Prediction:
        c, r = self.config.input_channels, self.resolution
        if batch.data.ndim != 4 or batch.shape[1:] != (c, r, r):
            raise ShapeError(f"network expects [B, {c}, {r}, {r}] input, got {batch.shape}")
        h = batch
        for layer in self.layers:
            h = layer(h)
        features = h
        out = E.fully_connected(E.global_avg_pool(features), self.head_weight, self.head_bias)
        age = E.column(out, 0)
        gender = E.column(out, 1) if self.has_gender else None
        return Prediction(age=age, gender_logit=gender, features=features)

    __call__ = forward

    def stage_resolutions(self) -> list[int]:
        """Spatial extent entering each stage for a configured-resolution input."""
        res = [self.resolution]
        size = self.resolution
        for st in self.config.stages:
            for li in range(st.num_layers):
                stride = st.stride if li == 0 else 1
                pad = st.kernel_size // 2
                size = (size + 2 * pad - st.kernel_size) // stride + 1
            res.append(size)
        return res[:-1]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if list(arrays) != list(self.params):
            raise ConfigError("parameter names/order do not match this network")
        for k, arr in arrays.items():
            p = self.params[k]
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(E.get_dtype())
            p.grad = None

    def copy(self) -> "Network":
        net = Network(self.config, seed=0)
        net.load_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        return net


def forward(net: Network, batch: Tensor) -> Prediction:
    return net.forward(batch)


def parameter_count(config: BackboneConfig) -> int:
    return Network(config).parameter_count()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, config: BackboneConfig, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned text container: magic+version line, one JSON header line, then tensor dumps."""
    header = {
        "config": config.to_dict(),
        "tensors": list(tensors),
        "meta": meta or {},
    }
    buf = io.StringIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    buf.write(json.dumps(header, sort_keys=True) + "\n")
    for arr in tensors.values():
        E.write_tensor(buf, arr)
    Path(path).write_text(buf.getvalue())


def read_checkpoint(path) -> tuple[BackboneConfig, dict[str, np.ndarray], dict]:
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        if int(first[1]) != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {first[1]}")
        header = json.loads(fh.readline())
        lines = (line for line in fh)
        tensors = {name: E.read_tensor(lines) for name in header["tensors"]}
    return BackboneConfig.from_dict(header["config"]), tensors, header["meta"]


def save_network(net: Network, path, meta: dict | None = None) -> None:
    write_checkpoint(path, net.config, net.state_arrays(), meta)


def load_network(path) -> tuple[Network, dict]:
    config, tensors, meta = read_checkpoint(path)
    net = Network(config)
    params = {k: tensors[k] for k in net.params}
    net.load_arrays(params)
    return net, meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
