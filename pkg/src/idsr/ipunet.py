"""Identity-preserving U-Net generator.

Encoder blocks halve the resolution (stride-2 conv, batch norm, leaky
ReLU); decoder blocks double it (transposed conv, batch norm, dropout,
ReLU) and concatenate the mirrored encoder activation. The last decoder
block emits pixels through a sigmoid.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import checkpoint as ckpt
from .tensorcore import (
    Parameter,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    dropout,
    leaky_relu,
    relu,
    sigmoid,
)

DEFAULT_SCHEDULE = (32, 64, 128, 256, 256, 256, 256)
MAGIC = b"IPUN"
_DROPOUT_STREAM = 0xD0
KERNEL, STRIDE, PAD = 4, 2, 1


@dataclass(frozen=True)
class IPUNetConfig:
    in_channels: int = 3
    channel_schedule: tuple = DEFAULT_SCHEDULE
    dropout_p: float = 0.5
    leaky_slope: float = 0.2
    final_activation: str = "sigmoid"
    seed: int = 0
    skip_connections: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if not self.channel_schedule:
            raise ValueError("channel_schedule must not be empty")
        if any(c < 1 for c in self.channel_schedule):
            raise ValueError(f"channel_schedule entries must be >= 1, got {self.channel_schedule}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.final_activation != "sigmoid":
            raise ValueError(f"unsupported final activation {self.final_activation!r}")

    @property
    def depth(self) -> int:
        return len(self.channel_schedule)

    @property
    def input_size(self) -> int:
        return 2**self.depth

    def to_meta(self) -> dict:
        meta = {}
        for f in fields(self):
            v = getattr(self, f.name)
            meta[f"config.{f.name}"] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return meta

    @classmethod
    def from_meta(cls, meta: dict) -> "IPUNetConfig":
        def get(name):
            key = f"config.{name}"
            if key not in meta:
                raise ckpt.CheckpointFormatError(f"checkpoint manifest lacks {key}")
            return meta[key]

        return cls(
            in_channels=int(get("in_channels")),
            channel_schedule=tuple(int(c) for c in get("channel_schedule").split(",")),
            dropout_p=float(get("dropout_p")),
            leaky_slope=float(get("leaky_slope")),
            final_activation=get("final_activation"),
            seed=int(get("seed")),
            skip_connections=get("skip_connections") == "True",
        )


@dataclass
class BatchNorm:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, c):
        return cls(
            Parameter(np.ones(c, np.float32)),
            Parameter(np.zeros(c, np.float32)),
            np.zeros(c, np.float32),
            np.ones(c, np.float32),
        )

    def __call__(self, x, training):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


@dataclass
class Block:
    weight: Parameter
    bias: Parameter
    bn: BatchNorm | None = None
    extras: dict = field(default_factory=dict)


def _conv_param(rng, shape):
    return Parameter(rng.normal(0.0, 0.02, size=shape).astype(np.float32))


class IPUNet:
    def __init__(self, config: IPUNetConfig):
        self.config = config
        self.training = True
        self.dropout_calls = 0
        rng = np.random.default_rng(config.seed)
        s = config.channel_schedule
        d = config.depth
        self.down: list[Block] = []
        cin = config.in_channels
        for i, cout in enumerate(s):
            use_bn = 0 < i < d - 1
            self.down.append(
                Block(
                    _conv_param(rng, (cout, cin, KERNEL, KERNEL)),
                    Parameter(np.zeros(cout, np.float32)),
                    BatchNorm.create(cout) if use_bn else None,
                )
            )
            cin = cout
        self.up: list[Block] = []
        for i in range(d):
            cin = self.up_in_channels(config, i)
            final = i == d - 1
            cout = config.in_channels if final else s[d - 2 - i]
            # transposed-conv weight layout is (Cin, Cout, k, k)
            self.up.append(
                Block(
                    _conv_param(rng, (cin, cout, KERNEL, KERNEL)),
                    Parameter(np.zeros(cout, np.float32)),
                    None if final else BatchNorm.create(cout),
                )
            )

    @staticmethod
    def up_in_channels(config: IPUNetConfig, i: int) -> int:
        """Input width of decoder block ``i`` (0-based)."""
        s, d = config.channel_schedule, config.depth
        if i == 0:
            return s[d - 1]
        prev = s[d - 1 - i]
        return 2 * prev if config.skip_connections else prev

    # -- state -----------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def _named_blocks(self):
        for i, b in enumerate(self.down, 1):
            yield f"down{i}", b
        for i, b in enumerate(self.up, 1):
            yield f"up{i}", b

    def parameters(self) -> list[Parameter]:
        out = []
        for _, b in self._named_blocks():
            out += [b.weight, b.bias]
            if b.bn is not None:
                out += [b.bn.gamma, b.bn.beta]
        return out

    def named_parameters(self):
        for name, b in self._named_blocks():
            yield f"{name}.weight", b.weight
            yield f"{name}.bias", b.bias
            if b.bn is not None:
                yield f"{name}.bn.gamma", b.bn.gamma
                yield f"{name}.bn.beta", b.bn.beta

    def state_arrays(self):
        """All persistent arrays (parameters and running statistics) by name."""
        for name, p in self.named_parameters():
            yield name, p.data
        for name, b in self._named_blocks():
            if b.bn is not None:
                yield f"{name}.bn.running_mean", b.bn.running_mean
                yield f"{name}.bn.running_var", b.bn.running_var

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ---------------------------------------------------------

    def _check_input(self, x: Tensor):
        n_in = self.config.input_size
        if x.ndim != 4:
            raise ValueError(f"IPUNet expects NCHW input, got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(f"IPUNet built for {self.config.in_channels} channels, got {x.shape[1]}")
        if x.shape[2:] != (n_in, n_in):
            raise ValueError(f"IPUNet expects {n_in}x{n_in} input, got {x.shape[2]}x{x.shape[3]}")
        if self.training and x.shape[0] < 2:
            raise ValueError("training-mode forward needs a batch of at least 2 (batch norm)")

    def encode(self, x) -> list[Tensor]:
        """Run the encoder, returning every block's activation (last = bottleneck)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        acts = []
        for b in self.down:
            x = conv2d(x, b.weight, b.bias, STRIDE, PAD)
            if b.bn is not None:
                x = b.bn(x, self.training)
            x = leaky_relu(x, self.config.leaky_slope)
            acts.append(x)
        return acts

    def decode(self, acts: list[Tensor]) -> Tensor:
        d = self.config.depth
        x = acts[-1]
        for i, b in enumerate(self.up):
            if i > 0 and self.config.skip_connections:
                x = concat_channels(x, acts[d - 1 - i])
            x = conv_transpose2d(x, b.weight, b.bias, STRIDE, PAD)
            if i == d - 1:
                return sigmoid(x)
            x = b.bn(x, self.training)
            if self.training and self.config.dropout_p > 0:
                x = dropout(x, self.config.dropout_p, True, seed=(self.config.seed, _DROPOUT_STREAM, self.dropout_calls))
                self.dropout_calls += 1
            x = relu(x)
        raise AssertionError("unreachable")

    def forward(self, x) -> Tensor:
        return self.decode(self.encode(x))

    __call__ = forward


def build(config: IPUNetConfig | None = None, **overrides) -> IPUNet:
    if config is None:
        config = IPUNetConfig(**overrides)
    elif overrides:
        raise TypeError("pass either a config or keyword overrides, not both")
    return IPUNet(config)


def analytic_parameter_count(config: IPUNetConfig) -> int:
    """Closed-form parameter count (conv weights + biases + BN affine)."""
    s, d, c = config.channel_schedule, config.depth, config.in_channels
    k2 = KERNEL * KERNEL
    total = 0
    cin = c
    for i, cout in enumerate(s):
        total += cin * cout * k2 + cout
        if 0 < i < d - 1:
            total += 2 * cout
        cin = cout
    for i in range(d):
        cin = IPUNet.up_in_channels(config, i)
        cout = c if i == d - 1 else s[d - 2 - i]
        total += cin * cout * k2 + cout
        if i < d - 1:
            total += 2 * cout
    return total


def save_checkpoint(net: IPUNet, path, extra_meta: dict | None = None, extra_tensors=None, magic=MAGIC) -> None:
    meta = net.config.to_meta()
    meta["mode"] = "train" if net.training else "eval"
    meta["dropout_calls"] = str(net.dropout_calls)
    if extra_meta:
        meta.update(extra_meta)
    tensors = [(f"net.{name}", arr) for name, arr in net.state_arrays()]
    if extra_tensors:
        tensors += list(extra_tensors)
    ckpt.write_checkpoint(path, magic, meta, tensors)


def load_checkpoint_full(path, magic=MAGIC):
    """Load a generator checkpoint; returns ``(net, meta, extra_tensors)``."""
    meta, tensors = ckpt.read_checkpoint(path, magic)
    config = IPUNetConfig.from_meta(meta)
    net = IPUNet(config)
    expected = dict(net.state_arrays())
    stored = {k[4:]: v for k, v in tensors.items() if k.startswith("net.")}
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise ckpt.CheckpointManifestError(
            f"{path}: tensor set does not match config (missing={missing}, unexpected={unexpected})"
        )
    for name, target in expected.items():
        src = stored[name]
        if src.shape != target.shape:
            raise ckpt.CheckpointShapeError(f"{path}: tensor {name} has shape {src.shape}, config needs {target.shape}")
        target[...] = src
    net.training = meta.get("mode", "train") == "train"
    net.dropout_calls = int(meta.get("dropout_calls", 0))
    extras = {k: v for k, v in tensors.items() if not k.startswith("net.")}
    return net, meta, extras


def load_checkpoint(path) -> IPUNet:
    return load_checkpoint_full(path)[0]
