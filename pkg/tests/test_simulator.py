from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from offloadsim.config import parse_config
from offloadsim.machine import LinkKind, optimizer_step_time, transfer_time
from offloadsim.model import model_totals
from offloadsim.schedule import (
    Buffer,
    ScheduleKind,
    SchedulePlan,
    Task,
    TaskKind,
    build_horizontal,
    build_single_fb,
    build_vertical,
)
from offloadsim.simulator import (
    BoundClass,
    MemoryCapacityError,
    PlanDeadlock,
    simulate,
    task_duration,
    time_credit,
)
from offloadsim.traffic import (
    DataKind,
    StorageSplit,
    horizontal_ledger,
    single_fb_ledger,
    vertical_ledger,
)

from conftest import small_machine, small_model

ROOT = Path(__file__).resolve().parents[1]
GPT65B = ROOT / "configs" / "gpt65b-a100.example"
ALL_CPU = StorageSplit(1, 1, 1)

fractions = st.sampled_from([0.0, 0.2, 0.5, 0.8, 1.0])


def bare_plan(tasks, buffers=()):
    return SchedulePlan(
        kind=ScheduleKind("vertical"), model=small_model(), num_microbatches=1, split=ALL_CPU,
        tasks=list(tasks), buffers=list(buffers), num_stages=1, samples=1,
        gpu_static_bytes=0, cpu_static_bytes=0, cpu_budget_bytes=0,
    )


def xfer(i, nbytes, link=LinkKind.SSD_READ, deps=()):
    return Task(i, TaskKind.XFER, 0, data_kind=DataKind.OPT_STATE, link=link, nbytes=nbytes,
                deps=list(deps))


def compute(i, work=1.0, deps=()):
    return Task(i, TaskKind.FWD, 0, layer=0, microbatch=0, work=work, deps=list(deps))


def test_single_transfer_iteration_time():
    report = simulate(bare_plan([xfer(0, 3 * 10**9)]), small_machine())
    assert report.iteration_time == pytest.approx(1.0)
    assert report.bound_class == BoundClass.IO


def test_compute_only_plan_is_compute_bound():
    machine = small_machine(fwd_compute_time_per_layer_per_mb=0.5)
    report = simulate(bare_plan([compute(0)]), machine)
    assert report.iteration_time == pytest.approx(0.5)
    assert report.bound_class == BoundClass.COMPUTE


def test_transfers_on_one_link_serialise():
    report = simulate(bare_plan([xfer(0, 3 * 10**9), xfer(1, 3 * 10**9)]), small_machine())
    assert report.iteration_time == pytest.approx(2.0)


def test_ssd_duplex_lets_reads_and_writes_overlap():
    tasks = [xfer(0, 3 * 10**9), xfer(1, 3 * 10**9, LinkKind.SSD_WRITE)]
    assert simulate(bare_plan(tasks), small_machine()).iteration_time == pytest.approx(2.0)
    duplex = small_machine(ssd_duplex=True)
    assert simulate(bare_plan(tasks), duplex).iteration_time == pytest.approx(1.0)


def test_memory_overflow_names_task_and_time():
    machine = small_machine(gpu_mem_bytes=1000)
    tasks = [compute(0), compute(1, deps=[0])]
    buffers = [Buffer("gpu", 2000, 1, "start", [(1, 0)], "too big")]
    with pytest.raises(MemoryCapacityError, match=r"GPU memory exceeded at t=0\.01s by task 1"):
        simulate(bare_plan(tasks, buffers), machine)


def test_deadlock_is_reported_as_plan_bug():
    tasks = [compute(0, deps=[1]), compute(1, deps=[0])]
    with pytest.raises(PlanDeadlock, match="plan bug"):
        simulate(bare_plan(tasks), small_machine())


@given(M=st.integers(1, 5), N=st.integers(1, 4), xc=fractions, xp=fractions, xo=fractions)
def test_vertical_ledger_matches_closed_form(M, N, xc, xp, xo):
    model = small_model(num_layers=N)
    split = StorageSplit(xc, xp, xo)
    report = simulate(build_vertical(model, M, split), small_machine())
    assert report.ledger == vertical_ledger(model, M, split)


@given(M=st.integers(2, 5), xp=fractions, xo=fractions, alpha=st.sampled_from([0.01, 0.02]))
def test_delayed_vertical_ledger_matches_closed_form(M, xp, xo, alpha):
    model = small_model(num_layers=4)
    split = StorageSplit(1.0, xp, xo)
    report = simulate(build_vertical(model, M, split, alpha=alpha), small_machine())
    assert report.ledger == vertical_ledger(model, M, split, alpha)


@given(M=st.integers(1, 4), N=st.integers(1, 4), xc=fractions, xp=fractions, xo=fractions)
def test_horizontal_ledger_matches_closed_form(M, N, xc, xp, xo):
    model = small_model(num_layers=N)
    split = StorageSplit(xc, xp, xo)
    report = simulate(build_horizontal(model, M, split), small_machine())
    assert report.ledger == horizontal_ledger(model, M, split)


@pytest.mark.parametrize("extra", [False, True])
def test_single_fb_ledger_matches_closed_form(extra):
    model = small_model()
    split = StorageSplit(0.5, 0.5, 0.5)
    report = simulate(build_single_fb(model, 3, extra, split), small_machine())
    assert report.ledger == single_fb_ledger(model, 3, extra, split)


@given(M=st.integers(1, 8), xc=fractions, xp=fractions, xo=fractions)
def test_memory_peaks_within_budget(M, xc, xp, xo):
    model, machine = small_model(), small_machine()
    plan = build_vertical(model, M, StorageSplit(xc, xp, xo), machine=machine)
    report = simulate(plan, machine)
    assert report.cpu_mem_peak <= plan.cpu_budget_bytes
    assert report.gpu_mem_peak <= machine.gpu_mem_bytes


@pytest.mark.parametrize("M", [2, 4, 8])
def test_delayed_plan_cpu_peak_within_budget(M):
    model, machine = small_model(num_layers=8), small_machine()
    plan = build_vertical(model, M, StorageSplit(1, 0, 0), alpha=0.02, machine=machine)
    report = simulate(plan, machine)
    assert report.cpu_mem_peak <= plan.cpu_budget_bytes


def test_simulation_is_deterministic():
    model, machine = small_model(), small_machine()
    plan = build_vertical(model, 3, StorageSplit(0.3, 0.4, 0.2))
    assert simulate(plan, machine).to_json() == simulate(plan, machine).to_json()


def test_gpu_busy_time_never_exceeds_iteration():
    model, machine = small_model(), small_machine()
    for M in (1, 4):
        report = simulate(build_vertical(model, M, StorageSplit(0, 0, 0)), machine)
        assert report.busy_time["GPU_compute"] <= report.iteration_time * (1 + 1e-9)
        assert all(0.0 <= u <= 1.0 for u in report.resource_utilization.values())


def test_vertical_throughput_non_decreasing_and_flips_once():
    model, machine = small_model(num_layers=8), small_machine()
    thr, bound = [], []
    for M in range(1, 17):
        report = simulate(build_vertical(model, M, StorageSplit(1, 1, 0)), machine)
        thr.append(report.throughput)
        bound.append(report.bound_class)
    assert all(b >= a * (1 - 1e-9) for a, b in zip(thr, thr[1:]))
    flips = sum(1 for a, b in zip(bound, bound[1:]) if a != b)
    assert bound[0] == BoundClass.IO and bound[-1] == BoundClass.COMPUTE and flips == 1


def test_transfer_event_duration_matches_closed_form():
    cfg = parse_config(GPT65B)
    plan = build_vertical(cfg.model, 1, StorageSplit(0, 0, 0))
    ckpt = next(t for t in plan.tasks if t.data_kind == DataKind.CKPT and t.link == LinkKind.D2H)
    assert task_duration(ckpt, cfg.machine) == transfer_time(ckpt.nbytes, LinkKind.D2H, cfg.machine)


def test_step_events_sum_to_whole_model_step():
    cfg = parse_config(GPT65B)
    elements = model_totals(cfg.model).total_param_elements
    for alpha in (0.0, 0.05):
        plan = build_vertical(cfg.model, 4, StorageSplit(1, 0, 0), alpha=alpha)
        steps = sum(task_duration(t, cfg.machine) for t in plan.tasks if t.kind == TaskKind.STEP)
        assert steps == pytest.approx(optimizer_step_time(elements, cfg.machine), rel=1e-12)


def test_time_credit_example():
    cfg = parse_config(GPT65B)
    per_mb = cfg.model.num_layers * (cfg.machine.fwd_compute_time_per_layer_per_mb
                                     + cfg.machine.bwd_compute_time_per_layer_per_mb)
    assert per_mb == pytest.approx(16.4)
    assert time_credit(cfg.machine, cfg.model.num_layers, 1.1) == pytest.approx(15.3)


@pytest.mark.parametrize("M", [8, 16])
def test_extra_microbatch_costs_at_most_its_compute(M):
    cfg = parse_config(GPT65B)
    split = StorageSplit(0, 0.5, 0)
    t = [simulate(build_vertical(cfg.model, m, split, machine=cfg.machine), cfg.machine).iteration_time
         for m in (M, M + 1)]
    assert 0 <= t[1] - t[0] <= 16.4 + 1e-9
