"""INI run configuration: [model], [machine], [schedule] and [output] sections."""

from __future__ import annotations

import configparser
import re
from dataclasses import MISSING, dataclass, fields
from pathlib import Path

from .machine import MachineSpec
from .model import PRESETS, ConfigError, ModelSpec
from .traffic import StorageSplit

_UNITS = {
    "": 1, "b": 1,
    "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12,
    "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40,
}
_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-zA-Z]*)(?:/s)?\s*$")

SIZE_FIELDS = {"gpu_mem_bytes", "cpu_usable_dram_bytes", "act_bytes_per_sample"}
RATE_FIELDS = {"pcie_h2d_bw", "pcie_d2h_bw", "ssd_read_bw", "ssd_write_bw"}
# short aliases accepted in config files
MACHINE_ALIASES = {"gpu_mem": "gpu_mem_bytes", "cpu_usable_dram": "cpu_usable_dram_bytes"}


def parse_size(text: str, name: str = "value") -> float:
    """``"40GiB"`` -> 42949672960; decimal and binary suffixes, optional ``/s``."""
    m = _SIZE.match(str(text))
    if not m or m.group(2).lower() not in _UNITS:
        raise ConfigError(f"{name}: expected a number with an optional size unit, got {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower()]


@dataclass
class ScheduleConfig:
    variant: str = "vertical"
    microbatches: int | None = None
    alpha: float | None = None
    split: StorageSplit | None = None
    extra_ckpt: bool = False


@dataclass
class RunConfig:
    model: ModelSpec
    machine: MachineSpec
    schedule: ScheduleConfig
    output_format: str = "json"
    output_path: str | None = None


def _int(section, key, value):
    try:
        f = float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}") from None
    if f != int(f):
        raise ConfigError(f"[{section}] {key}: expected an integer, got {value!r}")
    return int(f)


def _float(section, key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {value!r}") from None


def _bool(section, key, value):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected true or false, got {value!r}")


def _machine(sec) -> MachineSpec:
    known = {f.name: f for f in fields(MachineSpec)}
    kw = {}
    for key, value in sec.items():
        name = MACHINE_ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"[machine] {key}: unknown field")
        if name in SIZE_FIELDS:
            kw[name] = int(parse_size(value, f"[machine] {key}"))
        elif name in RATE_FIELDS:
            kw[name] = parse_size(value, f"[machine] {key}")
        elif name == "num_gpus":
            kw[name] = _int("machine", key, value)
        elif name == "ssd_duplex":
            kw[name] = _bool("machine", key, value)
        else:
            kw[name] = _float("machine", key, value)
    missing = [f.name for f in known.values() if f.default is MISSING and f.name not in kw]
    if missing:
        raise ConfigError(f"[machine] missing required field(s): {', '.join(missing)}")
    return MachineSpec(**kw)


def _model(sec, num_gpus: int) -> ModelSpec:
    known = {f.name for f in fields(ModelSpec)}
    kw = {}
    for key, value in sec.items():
        if key == "preset":
            name = value.strip()
            if name not in PRESETS:
                raise ConfigError(f"[model] preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
            for k, v in PRESETS[name].items():
                kw.setdefault(k, v)
            continue
        if key not in known:
            raise ConfigError(f"[model] {key}: unknown field")
        kw[key] = _int("model", key, value)
    kw.setdefault("seq_len", 2048)
    kw.setdefault("microbatch_size", 1)
    dp = kw.setdefault("data_parallel_degree", num_gpus)
    if dp != num_gpus:
        raise ConfigError(f"[model] data_parallel_degree: must equal [machine] num_gpus ({num_gpus}), got {dp}")
    for need in ("num_layers", "hidden_dim", "num_heads"):
        if need not in kw:
            raise ConfigError(f"[model] missing required field {need} (or give a preset)")
    return ModelSpec(**kw)


def _schedule(sec) -> ScheduleConfig:
    sc = ScheduleConfig()
    for key, value in sec.items():
        if key == "schedule":
            sc.variant = value.strip()
            if sc.variant not in ("horizontal", "vertical", "single-fb"):
                raise ConfigError(f"[schedule] schedule: expected horizontal, vertical or single-fb, got {value!r}")
        elif key == "microbatches":
            sc.microbatches = _int("schedule", key, value)
            if sc.microbatches < 1:
                raise ConfigError("[schedule] microbatches: must be >= 1")
        elif key == "alpha":
            sc.alpha = _float("schedule", key, value)
            if not 0.0 <= sc.alpha <= 1.0:
                raise ConfigError(f"[schedule] alpha: must lie in [0, 1], got {value!r}")
        elif key == "split":
            sc.split = StorageSplit.parse(value)
        elif key in ("x_ckpt", "x_param", "x_opt"):
            v = _float("schedule", key, value)
            base = sc.split or StorageSplit()
            sc.split = StorageSplit(**{**base.__dict__, key: v})
        elif key == "extra_ckpt":
            sc.extra_ckpt = _bool("schedule", key, value)
        else:
            raise ConfigError(f"[schedule] {key}: unknown field")
    return sc


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config does not parse: {e}") from None
    for need in ("model", "machine"):
        if not cp.has_section(need):
            raise ConfigError(f"missing [{need}] section")
    machine = _machine(cp["machine"])
    model = _model(cp["model"], machine.num_gpus)
    schedule = _schedule(cp["schedule"]) if cp.has_section("schedule") else ScheduleConfig()
    fmt, path = "json", None
    if cp.has_section("output"):
        for key, value in cp["output"].items():
            if key == "format":
                fmt = value.strip()
                if fmt not in ("json", "csv"):
                    raise ConfigError(f"[output] format: expected json or csv, got {value!r}")
            elif key == "path":
                path = value.strip()
            else:
                raise ConfigError(f"[output] {key}: unknown field")
    return RunConfig(model, machine, schedule, fmt, path)


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text())
