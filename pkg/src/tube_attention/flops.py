"""Interaction and multiply-accumulate accounting for dense vs. tube attention.

Costs are counted in multiply-accumulates (MACs) and itemized as:

    embed       3 * K * C * C'   (theta, phi, g projections)
    similarity  K * K * C'       (one C'-dot product per query/key pair)
    weighting   K * K * C'       (similarity times value, per pair)
    normalize   K * C'           (scaling by 1/K)
    output      K * C' * C       (W_z embedding)

with K the number of participating positions (all N*T*H*W for the dense
module).  Only ratios are meaningful across conventions.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .attention import AttentionParams, tsa_forward
from .errors import ConfigError
from .geometry import TubeIndex

_INT64_MAX = 2**63 - 1


def _checked(value: int) -> int:
    if value > _INT64_MAX:
        raise OverflowError(f"count {value} exceeds int64 range")
    return value


def pairs_nonlocal(n: int, t: int, h: int, w: int) -> int:
    if min(n, t, h, w) < 1:
        raise ConfigError(f"dims must be >= 1, got {(n, t, h, w)}")
    p = int(n) * int(t) * int(h) * int(w)
    return _checked(p * p)


def pairs_tsa(tube: TubeIndex) -> int:
    return _checked(tube.total * tube.total)


def modeled_items(k: int, channels: int, reduced: int) -> dict:
    c, cr = int(channels), int(reduced)
    return {
        "embed": 3 * k * c * cr,
        "similarity": k * k * cr,
        "weighting": k * k * cr,
        "normalize": k * cr,
        "output": k * cr * c,
    }


def modeled_flops(k: int, channels: int, reduced: int) -> int:
    if k == 0:
        return 0
    return _checked(sum(modeled_items(k, channels, reduced).values()))


class MacCounter:
    """Accumulates MACs reported by the attention kernel, per item."""

    def __init__(self):
        self.items = defaultdict(int)

    def add(self, item: str, macs: int) -> None:
        self.items[item] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.items.values())


@dataclass
class CostReport:
    dims: list
    channels: int
    reduced: int
    positions_tsa: int
    pair_count_nl: int
    pair_count_tsa: int
    flops_nl: int
    flops_tsa: int
    items_nl: dict = field(default_factory=dict)
    items_tsa: dict = field(default_factory=dict)
    measured_flops_tsa: int = 0
    pair_reduction: float = 0.0
    reduction: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def cost_report(tube: TubeIndex, channels: int, reduced: int, measured: int | None = None) -> CostReport:
    n, t, h, w = tube.dims
    p = n * t * h * w
    k = tube.total
    flops_nl = modeled_flops(p, channels, reduced)
    flops_tsa = modeled_flops(k, channels, reduced)
    pnl = pairs_nonlocal(n, t, h, w)
    ptsa = pairs_tsa(tube)
    return CostReport(
        dims=[n, t, h, w],
        channels=channels,
        reduced=reduced,
        positions_tsa=k,
        pair_count_nl=pnl,
        pair_count_tsa=ptsa,
        flops_nl=flops_nl,
        flops_tsa=flops_tsa,
        items_nl=modeled_items(p, channels, reduced),
        items_tsa=modeled_items(k, channels, reduced) if k else {},
        measured_flops_tsa=flops_tsa if measured is None else measured,
        pair_reduction=float(1 - Fraction(ptsa, pnl)),
        reduction=float(1 - Fraction(flops_tsa, flops_nl)),
    )


def measure_kernel_flops(x, tube: TubeIndex, p: AttentionParams, block: int | None = None) -> CostReport:
    """Run the tube kernel under a MAC counter and report it beside the model."""
    counter = MacCounter()
    kwargs = {} if block is None else {"block": block}
    tsa_forward(x, tube, p, counter=counter, **kwargs)
    return cost_report(tube, p.channels, p.reduced, measured=counter.total)


def format_table(rows: list) -> str:
    """Aligned text table of ``(name, CostReport)`` rows plus an average line."""
    header = ("Category", "NL flops", "TSA flops", "Comp. Dec.", "Pair Dec.")
    lines = []
    for name, r in rows:
        lines.append((name, f"{r.flops_nl:,}", f"{r.flops_tsa:,}", f"{-100 * r.reduction:.2f}%", f"{-100 * r.pair_reduction:.2f}%"))
    if len(rows) > 1:
        nl = np.mean([r.flops_nl for _, r in rows])
        tsa = np.mean([r.flops_tsa for _, r in rows])
        red = np.mean([r.reduction for _, r in rows])
        pred = np.mean([r.pair_reduction for _, r in rows])
        lines.append(("Average", f"{nl:,.0f}", f"{tsa:,.0f}", f"{-100 * red:.2f}%", f"{-100 * pred:.2f}%"))
    widths = [max(len(str(row[k])) for row in [header, *lines]) for k in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" if k == 0 else f"{{:>{w}}}" for k, w in enumerate(widths))
    out = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    out.extend(fmt.format(*row) for row in lines)
    return "\n".join(out)
