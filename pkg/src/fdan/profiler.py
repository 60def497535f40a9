"""Static complexity analysis: parameters, MACs, FLOPs and activations.

The model is run on a meta tensor, so nothing is computed; every op reports
its cost to :func:`fdan.ops.record_costs`. Conventions:

* conv: ``macs = Hout*Wout*Cout*Cin*k^2`` (per image), ``flops = 2*macs``,
  activations = output element count;
* add / sub / mul / relu / sigmoid / pooling / resize: one FLOP per output
  element, no MACs, no activations;
* split / concat / pixel shuffle move data only and cost nothing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .model import FDAN, fdan_forward
from .ops import OpCost, record_costs
from .tensor import Tensor

# LR frame size (H, W) for a 3840x2160 output at each scale.
NATIVE_HR = (2160, 3840)


def thousands(n: int) -> str:
    """Count in K with two decimals, truncated (142,248 -> "142.24")."""
    return f"{n // 10 / 100:.2f}"


def native_resolution(scale: int) -> tuple[int, int]:
    return NATIVE_HR[0] // scale, NATIVE_HR[1] // scale


@dataclass
class CostReport:
    rows: list[OpCost]
    input_resolution: tuple[int, int]
    scale: int
    params: int = field(init=False)
    macs: int = field(init=False)
    flops: int = field(init=False)
    activations: int = field(init=False)

    def __post_init__(self):
        self.params = sum(r.params for r in self.rows)
        self.macs = sum(r.macs for r in self.rows)
        self.flops = sum(r.flops for r in self.rows)
        self.activations = sum(r.activations for r in self.rows)

    def row(self, name: str) -> OpCost:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "params", "macs", "flops", "activations", "output_shape"])
        for r in self.rows:
            w.writerow([r.name, r.kind, r.params, r.macs, r.flops, r.activations, "x".join(map(str, r.output_shape))])
        w.writerow(["total", "", self.params, self.macs, self.flops, self.activations, ""])
        return buf.getvalue()

    def summary(self) -> str:
        h, w = self.input_resolution
        return (
            f"x{self.scale} @ {w}x{h}: params {self.params:,} ({thousands(self.params)}K), "
            f"FLOPs {self.flops / 1e9:.2f}G, MACs {self.macs / 1e9:.2f}G, "
            f"activations {self.activations / 1e9:.2f}G"
        )


def profile(model: FDAN, input_hw: tuple[int, int] | None = None) -> CostReport:
    hw = native_resolution(model.config.scale) if input_hw is None else tuple(input_hw)
    with record_costs() as rows:
        fdan_forward(Tensor.meta((1, 3, *hw)), model)
    return CostReport(rows, hw, model.config.scale)


def count_params(model: FDAN) -> int:
    return sum(conv.spec.num_params for conv in model.convs())


def count_flops(model: FDAN, input_hw: tuple[int, int] | None = None) -> tuple[int, int]:
    """(flops, macs) for one image."""
    report = profile(model, input_hw)
    return report.flops, report.macs


def count_activations(model: FDAN, input_hw: tuple[int, int] | None = None) -> int:
    return profile(model, input_hw).activations


def head_flops(model: FDAN, input_hw: tuple[int, int] | None = None) -> int:
    """FLOPs of the reconstruction conv alone."""
    return profile(model, input_hw).row("reconstruct").flops
