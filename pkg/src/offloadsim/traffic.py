"""Closed-form per-iteration traffic ledgers for the three schedule families.

These are the oracle the simulator is checked against: every entry is an
exact integer byte count computed from the same per-layer byte portions the
schedule builder uses for its transfer tasks.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

from .machine import LinkKind
from .model import ConfigError, ModelSpec, derive_layer_sizes


class DataKind(str, enum.Enum):
    PARAM = "param"
    CKPT = "ckpt"
    GRAD_ACCUM = "grad_accum"
    INTERLAYER_GRAD = "interlayer_grad"
    OPT_STATE = "opt_state"


LINKS = tuple(LinkKind)
DATA_KINDS = tuple(DataKind)


@dataclass(frozen=True)
class StorageSplit:
    """Fraction of each data kind resident in CPU memory; the rest lives on SSD.

    Gradients are always fully CPU-resident and have no fraction here.
    """

    x_ckpt: float = 1.0
    x_param: float = 1.0
    x_opt: float = 1.0

    def __post_init__(self):
        for name in ("x_ckpt", "x_param", "x_opt"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")

    @classmethod
    def parse(cls, text: str) -> "StorageSplit":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"split needs three comma-separated fractions, got {text!r}")
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ConfigError(f"split fractions must be numbers, got {text!r}") from None
        return cls(*values)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x_ckpt, self.x_param, self.x_opt)


def resident(total: int, frac: float) -> int:
    """Bytes of ``total`` kept in the CPU-resident (or delayed) share; floor rounding."""
    if frac >= 1.0:
        return total
    if frac <= 0.0:
        return 0
    return math.floor(total * frac)


def remainder(total: int, frac: float) -> int:
    return total - resident(total, frac)


@dataclass
class TrafficLedger:
    bytes: dict = field(default_factory=lambda: {(d, l): 0 for d in DATA_KINDS for l in LINKS})

    def add(self, kind: DataKind, link: LinkKind, nbytes: int) -> None:
        if nbytes < 0:
            raise ValueError("ledger entries must be non-negative")
        self.bytes[(DataKind(kind), LinkKind(link))] += nbytes

    def get(self, kind: DataKind | str, link: LinkKind | str) -> int:
        return self.bytes[(DataKind(kind), LinkKind(link))]

    def kind_total(self, kind: DataKind | str) -> int:
        return sum(self.get(kind, l) for l in LINKS)

    def link_total(self, link: LinkKind | str) -> int:
        return sum(self.get(d, link) for d in DATA_KINDS)

    def __eq__(self, other):
        return isinstance(other, TrafficLedger) and self.bytes == other.bytes

    def to_dict(self) -> dict:
        return {d.value: {l.value: self.get(d, l) for l in LINKS} for d in DATA_KINDS}

    @classmethod
    def from_dict(cls, data: dict) -> "TrafficLedger":
        ledger = cls()
        for d, row in data.items():
            for l, v in row.items():
                ledger.add(d, l, int(v))
        return ledger

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["data_kind", *[l.value for l in LINKS]])
        for d in DATA_KINDS:
            writer.writerow([d.value, *[self.get(d, l) for l in LINKS]])
        return out.getvalue()


@dataclass(frozen=True)
class LayerBytes:
    """Per-layer byte portions shared by the ledgers, the plans and the planner.

    ``ckpt`` is one micro-batch's inter-layer activation summed over the
    data-parallel replicas. SSD portions are what is left after the
    CPU-resident share is taken out, and the ``*_delay`` fields are the
    alpha share of an SSD portion (or of the step elements) that is handled
    in the next iteration's forward pass.
    """

    param: int
    grad: int
    opt: int
    elements: int
    ckpt: int
    ssd_param: int
    ssd_opt: int
    ssd_ckpt_layer: int      # SSD share of one layer's checkpoints over all micro-batches
    ssd_ckpt_mb: int         # SSD share of a single micro-batch checkpoint
    ssd_param_delay: int
    ssd_opt_delay: int
    elements_delay: int
    grad_delay: int


def layer_bytes(model: ModelSpec, M: int, split: StorageSplit, alpha: float = 0.0,
                ckpt_override: int | None = None) -> LayerBytes:
    sizes = derive_layer_sizes(model)
    ckpt = sizes.ckpt_bytes_per_mb * model.data_parallel_degree
    if ckpt_override is not None:
        ckpt = ckpt_override
    ssd_param = remainder(sizes.param_bytes_low, split.x_param)
    ssd_opt = remainder(sizes.opt_state_bytes, split.x_opt)
    return LayerBytes(
        param=sizes.param_bytes_low,
        grad=sizes.grad_bytes_full,
        opt=sizes.opt_state_bytes,
        elements=sizes.param_elements,
        ckpt=ckpt,
        ssd_param=ssd_param,
        ssd_opt=ssd_opt,
        ssd_ckpt_layer=remainder(M * ckpt, split.x_ckpt),
        ssd_ckpt_mb=remainder(ckpt, split.x_ckpt),
        ssd_param_delay=resident(ssd_param, alpha),
        ssd_opt_delay=resident(ssd_opt, alpha),
        elements_delay=resident(sizes.param_elements, alpha),
        grad_delay=math.ceil(sizes.grad_bytes_full * alpha) if alpha > 0 else 0,
    )


def _check_m(M: int, what: str = "M") -> None:
    if not isinstance(M, int) or M < 1:
        raise ValueError(f"{what} must be an integer >= 1, got {M!r}")


def horizontal_ledger(model: ModelSpec, M: int, split: StorageSplit) -> TrafficLedger:
    _check_m(M)
    lb = layer_bytes(model, M, split)
    N = model.num_layers
    L = TrafficLedger()
    L.add(DataKind.PARAM, LinkKind.H2D, 2 * M * N * lb.param)
    L.add(DataKind.PARAM, LinkKind.SSD_READ, 2 * M * N * lb.ssd_param)
    L.add(DataKind.PARAM, LinkKind.SSD_WRITE, N * lb.ssd_param)
    L.add(DataKind.CKPT, LinkKind.D2H, M * N * lb.ckpt)
    L.add(DataKind.CKPT, LinkKind.H2D, M * N * lb.ckpt)
    L.add(DataKind.CKPT, LinkKind.SSD_WRITE, M * N * lb.ssd_ckpt_mb)
    L.add(DataKind.CKPT, LinkKind.SSD_READ, M * N * lb.ssd_ckpt_mb)
    L.add(DataKind.GRAD_ACCUM, LinkKind.H2D, (M - 1) * N * lb.grad)
    L.add(DataKind.GRAD_ACCUM, LinkKind.D2H, M * N * lb.grad)
    L.add(DataKind.OPT_STATE, LinkKind.SSD_READ, N * lb.ssd_opt)
    L.add(DataKind.OPT_STATE, LinkKind.SSD_WRITE, N * lb.ssd_opt)
    return L


def vertical_ledger(model: ModelSpec, M: int, split: StorageSplit, alpha: float = 0.0) -> TrafficLedger:
    """Steady-state iteration of the vertical schedule.

    The iteration's forward pass carries the delayed alpha share of the
    previous iteration's optimizer step, so the totals below hold for any
    iteration after the first.
    """
    _check_m(M)
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha!r}")
    lb = layer_bytes(model, M, split, alpha)
    N = model.num_layers
    turning = (N - 1) * (M - 1)
    L = TrafficLedger()
    L.add(DataKind.PARAM, LinkKind.H2D, 2 * N * lb.param)
    # forward reads only the non-delayed share; the delayed share comes out of the CPU step
    L.add(DataKind.PARAM, LinkKind.SSD_READ, N * (lb.ssd_param - lb.ssd_param_delay) + N * lb.ssd_param)
    L.add(DataKind.PARAM, LinkKind.SSD_WRITE, N * lb.ssd_param)
    L.add(DataKind.CKPT, LinkKind.D2H, M * N * lb.ckpt)
    L.add(DataKind.CKPT, LinkKind.H2D, turning * lb.ckpt + M * N * lb.ckpt)
    L.add(DataKind.CKPT, LinkKind.SSD_WRITE, N * lb.ssd_ckpt_layer)
    L.add(DataKind.CKPT, LinkKind.SSD_READ, N * lb.ssd_ckpt_layer)
    L.add(DataKind.GRAD_ACCUM, LinkKind.D2H, N * lb.grad)
    L.add(DataKind.INTERLAYER_GRAD, LinkKind.D2H, turning * lb.ckpt)
    L.add(DataKind.INTERLAYER_GRAD, LinkKind.H2D, turning * lb.ckpt)
    L.add(DataKind.OPT_STATE, LinkKind.SSD_READ, N * lb.ssd_opt)
    L.add(DataKind.OPT_STATE, LinkKind.SSD_WRITE, N * lb.ssd_opt)
    return L


def single_fb_ckpt_bytes(model: ModelSpec, batch: int) -> int:
    """Bytes of one checkpoint tensor for a single pass at ``batch`` samples."""
    sizes = derive_layer_sizes(model)
    per_sample = sizes.ckpt_bytes_per_mb // model.microbatch_size
    return batch * per_sample * model.data_parallel_degree


def single_fb_ledger(model: ModelSpec, batch: int, extra_ckpt: bool, split: StorageSplit) -> TrafficLedger:
    _check_m(batch, "batch")
    ckpt = single_fb_ckpt_bytes(model, batch)
    per_layer = 2 if extra_ckpt else 1
    lb = layer_bytes(model, 1, split, ckpt_override=ckpt)
    N = model.num_layers
    L = TrafficLedger()
    L.add(DataKind.PARAM, LinkKind.H2D, 2 * N * lb.param)
    L.add(DataKind.PARAM, LinkKind.SSD_READ, 2 * N * lb.ssd_param)
    L.add(DataKind.PARAM, LinkKind.SSD_WRITE, N * lb.ssd_param)
    L.add(DataKind.CKPT, LinkKind.D2H, per_layer * N * ckpt)
    L.add(DataKind.CKPT, LinkKind.H2D, per_layer * N * ckpt)
    L.add(DataKind.CKPT, LinkKind.SSD_WRITE, per_layer * N * lb.ssd_ckpt_mb)
    L.add(DataKind.CKPT, LinkKind.SSD_READ, per_layer * N * lb.ssd_ckpt_mb)
    L.add(DataKind.GRAD_ACCUM, LinkKind.D2H, N * lb.grad)
    L.add(DataKind.OPT_STATE, LinkKind.SSD_READ, N * lb.ssd_opt)
    L.add(DataKind.OPT_STATE, LinkKind.SSD_WRITE, N * lb.ssd_opt)
    return L
