"""Calibrated hardware parameters and the link/compute timing helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .model import ConfigError


class LinkKind(str, enum.Enum):
    H2D = "H2D"
    D2H = "D2H"
    SSD_READ = "SSD_read"
    SSD_WRITE = "SSD_write"


@dataclass(frozen=True)
class MachineSpec:
    """Benchmarked system parameters.

    PCIe bandwidths are per GPU; with ``num_gpus`` > 1 each GPU has its own
    link, so the aggregate host<->GPU bandwidth scales with the GPU count.
    The SSD and host DRAM are shared by all GPUs.
    """

    gpu_mem_bytes: int
    cpu_usable_dram_bytes: int
    pcie_h2d_bw: float
    pcie_d2h_bw: float
    ssd_read_bw: float
    ssd_write_bw: float
    fwd_compute_time_per_layer_per_mb: float
    bwd_compute_time_per_layer_per_mb: float  # includes recomputation
    cpu_step_throughput: float                # optimizer elements per second
    fixed_overhead_time: float = 0.0          # embedding, head, loss; once per iteration
    num_gpus: int = 1
    ssd_duplex: bool = False                  # False: reads and writes share one queue
    act_bytes_per_sample: int = 0             # per-layer GPU working set per sample

    def __post_init__(self):
        for name in ("pcie_h2d_bw", "pcie_d2h_bw", "ssd_read_bw", "ssd_write_bw",
                     "cpu_step_throughput"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)!r}")
        for name in ("gpu_mem_bytes", "cpu_usable_dram_bytes"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)!r}")
        for name in ("fwd_compute_time_per_layer_per_mb", "bwd_compute_time_per_layer_per_mb",
                     "fixed_overhead_time"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if not isinstance(self.num_gpus, int) or self.num_gpus < 1:
            raise ConfigError(f"num_gpus must be an integer >= 1, got {self.num_gpus!r}")
        if self.act_bytes_per_sample < 0:
            raise ConfigError("act_bytes_per_sample must be >= 0")

    def with_(self, **changes) -> "MachineSpec":
        return type(self)(**{**self.__dict__, **changes})

    def bandwidth(self, link: LinkKind | str) -> float:
        try:
            link = LinkKind(link)
        except ValueError:
            raise ConfigError(f"unknown link kind {link!r}") from None
        if link is LinkKind.H2D:
            return self.pcie_h2d_bw * self.num_gpus
        if link is LinkKind.D2H:
            return self.pcie_d2h_bw * self.num_gpus
        if link is LinkKind.SSD_READ:
            return self.ssd_read_bw
        return self.ssd_write_bw


def transfer_time(nbytes: int | float, link: LinkKind | str, machine: MachineSpec) -> float:
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    bw = machine.bandwidth(link)
    return nbytes / bw if nbytes else 0.0


def optimizer_step_time(elements: int | float, machine: MachineSpec) -> float:
    if elements < 0:
        raise ValueError("element count must be non-negative")
    return elements / machine.cpu_step_throughput if elements else 0.0
