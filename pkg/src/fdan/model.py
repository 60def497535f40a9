"""Feature decomposition network: FDB, ESA, HFDG and the full FDAN.

Layer graph at a glance (``C`` channels, ``B`` blocks per group, ``G`` groups)::

    head 3x3 (3 -> C, relu)                                   = F0
    G x HFDG:  B x FDB (halving widths) -> concat -> ESA
    concat(F1..FG) -> 1x1 (G*C -> C, relu)   [skipped when aggregate=False]
    3x3 (C -> C, relu) + F0
    3x3 (C -> 3 s^2) -> pixel shuffle(s)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .init import kaiming_init
from .ops import ConvSpec
from .rng import Rng
from .tensor import Tensor

SCALES = (2, 4, 8, 16)


@dataclass(frozen=True)
class FdanConfig:
    channels: int = 48
    blocks: int = 3
    groups: int = 6
    scale: int = 4
    aggregate: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.channels < 4 or self.blocks < 1 or self.groups < 1:
            raise ConfigError(f"channels/blocks/groups must be positive (channels >= 4): {self}")
        if self.channels % (2**self.blocks):
            raise ConfigError(f"channels={self.channels} not divisible by 2^blocks={2**self.blocks}")
        if self.channels % 4:
            raise ConfigError(f"channels={self.channels} must be divisible by 4 for the attention branch")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FdanConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def architecture(self) -> dict:
        """Fields that determine the layer graph (everything but the seed)."""
        d = self.to_dict()
        d.pop("seed")
        return d


class ParamStore:
    """Named learnable tensors in construction order; ``tensor.grad`` is the gradient slot."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._items[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def num_params(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def astype(self, dtype) -> None:
        """Convert every tensor in place (tensor objects keep their identity)."""
        for t in self._items.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._items.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._items.items():
            if name not in state:
                raise ConfigError(f"missing parameter {name!r}")
            arr = state[name]
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=t.data.dtype)
        extra = set(state) - set(self._items)
        if extra:
            raise ConfigError(f"unexpected parameters: {sorted(extra)}")


class Conv:
    def __init__(self, name: str, spec: ConvSpec, store: ParamStore, rng: Rng):
        self.name = name
        self.spec = spec
        weight, bias = kaiming_init(spec, rng)
        self.weight = store.add(f"{name}.weight", weight)
        self.bias = store.add(f"{name}.bias", bias) if bias is not None else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.spec, self.weight, self.bias, name=self.name)


class _Builder:
    """Hands every conv a private random stream keyed by its position."""

    def __init__(self, store: ParamStore, rng: Rng):
        self.store = store
        self.rng = rng
        self.count = 0

    def conv(self, name, cin, cout, k, *, stride=1, padding=None, activation="none") -> Conv:
        pad = k // 2 if padding is None else padding
        spec = ConvSpec(cin, cout, k, stride, pad, True, activation)
        layer = Conv(name, spec, self.store, self.rng.child(self.count))
        self.count += 1
        return layer


class FDB:
    """Split channels; detail = first half minus a 1x1 base estimate of the second half."""

    def __init__(self, name: str, channels: int, b: _Builder):
        if channels % 2:
            raise ShapeError(f"FDB needs an even channel count, got {channels}")
        self.name = name
        self.half = channels // 2
        self.conv1x1 = b.conv(f"{name}.conv1x1", self.half, self.half, 1, activation="relu")
        self.conv3x3 = b.conv(f"{name}.conv3x3", self.half, self.half, 3, activation="relu")

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != 2 * self.half:
            raise ShapeError(f"{self.name}: expected {2 * self.half} channels, got {x.shape[1]}")
        alpha, beta = ops.channel_split(x, self.half)
        initial_base = self.conv1x1(beta)
        detail = ops.sub(alpha, initial_base, name=f"{self.name}.detail")
        base = self.conv3x3(initial_base)
        return base, detail


class ESA:
    # conv2 (3x3, stride 2, no pad) must leave at least a 7x7 map for the pooling window.
    MIN_SIZE = 15

    def __init__(self, name: str, channels: int, b: _Builder):
        f = channels // 4
        self.name = name
        self.conv1 = b.conv(f"{name}.conv1", channels, f, 1)
        self.conv_f = b.conv(f"{name}.conv_f", f, f, 1)
        self.conv_max = b.conv(f"{name}.conv_max", f, f, 3, activation="relu")
        self.conv2 = b.conv(f"{name}.conv2", f, f, 3, stride=2, padding=0)
        self.conv3 = b.conv(f"{name}.conv3", f, f, 3, activation="relu")
        self.conv3_ = b.conv(f"{name}.conv3_", f, f, 3)
        self.conv4 = b.conv(f"{name}.conv4", f, channels, 1, activation="sigmoid")

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h < self.MIN_SIZE or w < self.MIN_SIZE:
            raise ShapeError(f"{self.name}: input {h}x{w} too small, spatial attention needs at least {self.MIN_SIZE}x{self.MIN_SIZE}")
        y1 = self.conv1(x)
        branch = self.conv2(y1)
        branch = ops.max_pool(branch, 7, 3, name=f"{self.name}.max_pool")
        branch = self.conv_max(branch)
        branch = self.conv3(branch)
        branch = self.conv3_(branch)
        branch = ops.bilinear_resize(branch, h, w, name=f"{self.name}.upsample")
        mix = ops.add(branch, self.conv_f(y1), name=f"{self.name}.add")
        gate = self.conv4(mix)
        return ops.mul(x, gate, name=f"{self.name}.gate")


class HFDG:
    def __init__(self, name: str, channels: int, blocks: int, b: _Builder):
        self.name = name
        self.fdbs = [FDB(f"{name}.fdb{i}", channels >> i, b) for i in range(blocks)]
        self.esa = ESA(f"{name}.esa", channels, b)

    def __call__(self, x: Tensor) -> Tensor:
        base = x
        details = []
        for fdb in self.fdbs:
            base, detail = fdb(base)
            details.append(detail)
        return self.esa(ops.channel_concat(details + [base], name=f"{self.name}.concat"))


def hfdg_concat_widths(channels: int, blocks: int) -> list[int]:
    """Channel widths of [detail_1, ..., detail_B, base_B]."""
    if channels % (2**blocks):
        raise ConfigError(f"channels={channels} not divisible by 2^blocks={2**blocks}")
    return [channels >> b for b in range(1, blocks + 1)] + [channels >> blocks]


class FDAN:
    def __init__(self, config: FdanConfig):
        config.validate()
        self.config = config
        self.params = ParamStore()
        b = _Builder(self.params, Rng(config.seed))
        c, s = config.channels, config.scale
        self.head = b.conv("head", 3, c, 3, activation="relu")
        self.groups = [HFDG(f"group{g}", c, config.blocks, b) for g in range(config.groups)]
        self.fuse = b.conv("aggregate.conv1x1", config.groups * c, c, 1, activation="relu") if config.aggregate else None
        self.refine = b.conv("aggregate.conv3x3", c, c, 3, activation="relu")
        self.reconstruct = b.conv("reconstruct", c, 3 * s * s, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return fdan_forward(x, self)

    def convs(self) -> list[Conv]:
        layers = [self.head]
        for g in self.groups:
            for fdb in g.fdbs:
                layers += [fdb.conv1x1, fdb.conv3x3]
            e = g.esa
            layers += [e.conv1, e.conv_f, e.conv_max, e.conv2, e.conv3, e.conv3_, e.conv4]
        if self.fuse is not None:
            layers.append(self.fuse)
        return layers + [self.refine, self.reconstruct]


def build_fdan(config: FdanConfig) -> tuple[FDAN, ParamStore]:
    model = FDAN(config)
    return model, model.params


def fdan_forward(x: Tensor, model: FDAN) -> Tensor:
    if len(x.shape) != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an (N, 3, H, W) image batch, got {x.shape}")
    if min(x.shape[2:]) < ESA.MIN_SIZE:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} too small, need at least {ESA.MIN_SIZE}x{ESA.MIN_SIZE}")
    f0 = model.head(x)
    feats = []
    f = f0
    for group in model.groups:
        f = group(f)
        feats.append(f)
    if model.fuse is not None:
        f = model.fuse(ops.channel_concat(feats, name="aggregate.concat"))
    f = model.refine(f)
    f = ops.add(f, f0, name="skip")
    return ops.pixel_shuffle(model.reconstruct(f), model.config.scale, name="pixel_shuffle")
