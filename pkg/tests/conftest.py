import sys

import pytest
from hypothesis import settings

from offloadsim.machine import MachineSpec
from offloadsim.model import ModelSpec

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

GB = 10**9


def small_machine(**kw):
    base = dict(
        gpu_mem_bytes=80 * 2**30, cpu_usable_dram_bytes=400 * GB,
        pcie_h2d_bw=20 * GB, pcie_d2h_bw=20 * GB, ssd_read_bw=3 * GB, ssd_write_bw=3 * GB,
        fwd_compute_time_per_layer_per_mb=0.01, bwd_compute_time_per_layer_per_mb=0.03,
        cpu_step_throughput=2e9,
    )
    base.update(kw)
    return MachineSpec(**base)


def small_model(**kw):
    base = dict(num_layers=4, hidden_dim=1024, num_heads=8, seq_len=512, microbatch_size=1)
    base.update(kw)
    return ModelSpec(**base)


@pytest.fixture
def machine():
    return small_machine()


@pytest.fixture
def model():
    return small_model()


def random_planner_instance(rng):
    """(model, machine, n, alpha) with DRAM somewhere between all-SSD and all-CPU needs."""
    from offloadsim.planner import layer_model

    model = small_model(num_layers=rng.randint(2, 8), hidden_dim=rng.choice([512, 1024, 2048]),
                        seq_len=rng.choice([256, 512, 1024]), microbatch_size=rng.randint(1, 4))
    machine = small_machine(
        pcie_h2d_bw=rng.uniform(8, 32) * GB, pcie_d2h_bw=rng.uniform(8, 32) * GB,
        ssd_read_bw=rng.uniform(1, 8) * GB, ssd_write_bw=rng.uniform(1, 8) * GB,
        fwd_compute_time_per_layer_per_mb=rng.uniform(0.002, 0.05),
        bwd_compute_time_per_layer_per_mb=rng.uniform(0.006, 0.15),
        cpu_step_throughput=rng.uniform(0.5, 8) * GB, ssd_duplex=rng.random() < 0.3)
    n = rng.randint(1, 16)
    alpha = rng.choice([0.0, 0.0, 0.01, 0.02, 0.05])
    mem = layer_model(model, machine, n, alpha).cpu_mem
    corners = [float(mem.at(a, b, c)) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    lo, hi = min(corners), max(corners)
    dram = int(lo + rng.uniform(0.05, 1.2) * (hi - lo)) + 8192
    return model, machine.with_(cpu_usable_dram_bytes=dram), n, alpha


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
