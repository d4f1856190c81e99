"""Simulator and planner for SSD-offloaded LLM training schedules."""

from .machine import LinkKind, MachineSpec
from .model import ConfigError, ModelSpec, preset
from .schedule import (
    PlanRejected,
    SchedulePlan,
    build_horizontal,
    build_single_fb,
    build_vertical,
    overlap_window,
)
from .simulator import BoundClass, SimReport, classify_bound, simulate
from .traffic import DataKind, StorageSplit, TrafficLedger

__all__ = [
    "BoundClass", "ConfigError", "DataKind", "LinkKind", "MachineSpec", "ModelSpec",
    "PlanRejected", "SchedulePlan", "SimReport", "StorageSplit", "TrafficLedger",
    "build_horizontal", "build_single_fb", "build_vertical", "classify_bound",
    "overlap_window", "preset", "simulate",
]
