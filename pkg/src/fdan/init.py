"""Weight initialization."""

from __future__ import annotations

import math

import numpy as np

from .ops import ConvSpec
from .rng import Rng
from .tensor import Tensor


def kaiming_std(spec: ConvSpec) -> float:
    """Fan-in, ReLU-gain standard deviation: sqrt(2 / (Cin * k^2))."""
    return math.sqrt(2.0 / (spec.in_channels * spec.kernel * spec.kernel))


def kaiming_init(spec: ConvSpec, rng: Rng) -> tuple[Tensor, Tensor | None]:
    weight = Tensor(rng.normal(spec.weight_shape, kaiming_std(spec)), requires_grad=True)
    bias = Tensor(np.zeros(spec.out_channels, dtype=np.float32), requires_grad=True) if spec.has_bias else None
    return weight, bias
