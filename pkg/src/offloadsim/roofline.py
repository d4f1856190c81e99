"""The two throughput ceilings of SSD-offloaded training.

The I/O ceiling is a line through the origin: an iteration can never be
shorter than the optimizer-state round trip to SSD, so throughput grows at
most linearly with the batch.  The compute ceiling is flat: the GPU needs a
fixed time per sample regardless of batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .machine import MachineSpec
from .model import ModelSpec, model_totals

EPS = 1e-9


@dataclass(frozen=True)
class RooflinePoint:
    batch: int
    throughput: float
    io_bound_limit: float
    compute_bound_limit: float

    def contained(self, eps: float = EPS) -> bool:
        return (self.throughput <= self.io_bound_limit * (1 + eps)
                and self.throughput <= self.compute_bound_limit * (1 + eps))


def opt_round_trip_time(model: ModelSpec, machine: MachineSpec, x_opt: float = 0.0) -> float:
    """Seconds to read and write back the SSD-resident optimizer states once."""
    ssd_bytes = (1.0 - x_opt) * model_totals(model).total_opt_state_bytes
    read = ssd_bytes / machine.ssd_read_bw
    write = ssd_bytes / machine.ssd_write_bw
    return max(read, write) if machine.ssd_duplex else read + write


def io_roofline(model: ModelSpec, machine: MachineSpec, batch: int, x_opt: float = 0.0) -> float:
    """Samples/s ceiling set by optimizer-state SSD traffic for a ``batch``-sample iteration."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch!r}")
    t = opt_round_trip_time(model, machine, x_opt)
    return math.inf if t == 0 else batch / t


def compute_roofline(model: ModelSpec, machine: MachineSpec) -> float:
    """Samples/s ceiling set by GPU compute.

    The fixed per-iteration overhead is amortized over an unbounded number of
    micro-batches, so only the per-layer times enter.
    """
    per_mb = model.num_layers * (machine.fwd_compute_time_per_layer_per_mb
                                 + machine.bwd_compute_time_per_layer_per_mb)
    samples = model.microbatch_size * machine.num_gpus
    return math.inf if per_mb == 0 else samples / per_mb


def roofline_point(model: ModelSpec, machine: MachineSpec, batch: int, throughput: float,
                   x_opt: float = 0.0) -> RooflinePoint:
    return RooflinePoint(batch, throughput, io_roofline(model, machine, batch, x_opt),
                         compute_roofline(model, machine))
