"""Deterministic discrete-event execution of a schedule plan.

The plan template is unrolled a few iterations back to back.  Each resource
(GPU, CPU optimizer, the two PCIe directions and the SSD) runs one task at a
time; among ready tasks the one earliest in (global stage, iteration, plan
order) goes first.  The middle iteration is reported.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field

from .machine import LinkKind, MachineSpec
from .schedule import COMPUTE_KINDS, SchedulePlan, TaskKind
from .traffic import TrafficLedger

ITERATIONS = 3
REPORTED = 1


class SimulationError(RuntimeError):
    pass


class MemoryCapacityError(SimulationError):
    pass


class PlanDeadlock(SimulationError):
    pass


class BoundClass(str, enum.Enum):
    IO = "IO_bound"
    COMPUTE = "Compute_bound"


RESOURCES = ("GPU_compute", "CPU_compute", "PCIe_H2D", "PCIe_D2H", "SSD_read", "SSD_write")
_LINK_RESOURCE = {LinkKind.H2D: 2, LinkKind.D2H: 3, LinkKind.SSD_READ: 4, LinkKind.SSD_WRITE: 5}


@dataclass
class SimReport:
    iteration_time: float
    throughput: float
    ledger: TrafficLedger
    gpu_mem_peak: int
    cpu_mem_peak: int
    resource_utilization: dict
    bound_class: BoundClass
    schedule: str = ""
    num_microbatches: int = 0
    alpha: float = 0.0
    split: tuple = ()
    busy_time: dict = field(default_factory=dict)
    ssd_duplex: bool = False
    peak_breakdown: dict = field(default_factory=dict)   # pool -> buffer purpose -> bytes at the peak

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule,
            "num_microbatches": self.num_microbatches,
            "alpha": _fmt(self.alpha),
            "split": [_fmt(x) for x in self.split],
            "iteration_time": _fmt(self.iteration_time),
            "throughput": _fmt(self.throughput),
            "bound_class": self.bound_class.value,
            "gpu_mem_peak": self.gpu_mem_peak,
            "cpu_mem_peak": self.cpu_mem_peak,
            "resource_utilization": {k: _fmt(v) for k, v in self.resource_utilization.items()},
            "ledger": self.ledger.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _fmt(x: float) -> float:
    """Round to 6 significant digits so reports are byte-stable."""
    return float(f"{x:.6g}")


def task_duration(task, machine: MachineSpec) -> float:
    if task.kind == TaskKind.XFER:
        return task.nbytes / machine.bandwidth(task.link)
    if task.kind == TaskKind.FWD:
        return task.work * machine.fwd_compute_time_per_layer_per_mb
    if task.kind == TaskKind.BWD:
        return task.work * machine.bwd_compute_time_per_layer_per_mb
    if task.kind == TaskKind.OVERHEAD:
        return task.work * machine.fixed_overhead_time
    if task.kind == TaskKind.STEP:
        return task.work / machine.cpu_step_throughput
    return 0.0


def _resource(task, machine: MachineSpec):
    if task.kind in COMPUTE_KINDS:
        return 0
    if task.kind == TaskKind.STEP:
        return 1
    if task.kind == TaskKind.XFER:
        r = _LINK_RESOURCE[task.link]
        if r == 5 and not machine.ssd_duplex:
            return 4
        return r
    return None


def link_utilizations(report: SimReport) -> dict:
    u = report.resource_utilization
    if report.ssd_duplex:
        ssd = max(u["SSD_read"], u["SSD_write"])
    else:
        ssd = u["SSD_read"] + u["SSD_write"]
    return {"PCIe_H2D": u["PCIe_H2D"], "PCIe_D2H": u["PCIe_D2H"], "SSD": ssd}


def classify_bound(report: SimReport) -> BoundClass:
    gpu = report.resource_utilization["GPU_compute"]
    if all(gpu >= v for v in link_utilizations(report).values()):
        return BoundClass.COMPUTE
    return BoundClass.IO


def simulate(plan: SchedulePlan, machine: MachineSpec, iterations: int = ITERATIONS) -> SimReport:
    if iterations < 2:
        raise ValueError("need at least two iterations to measure a steady state")
    tasks = plan.tasks
    T = len(tasks)
    K = iterations
    L = plan.num_stages
    dur = [task_duration(t, machine) for t in tasks]
    res = [_resource(t, machine) for t in tasks]
    stage = [t.stage for t in tasks]
    is_compute = [t.kind in COMPUTE_KINDS for t in tasks]

    succ = [[] for _ in range(T)]
    for t in tasks:
        for d in t.deps:
            succ[d].append((t.id, 0))
        for d, back in t.carry:
            succ[d].append((t.id, back))
    indeg = [0] * (K * T)
    for r in range(K):
        for t in tasks:
            n = len(t.deps) + sum(1 for _, back in t.carry if r - back >= 0)
            indeg[r * T + t.id] = n

    # buffers: who opens them and who holds them
    open_start = [[] for _ in range(T)]
    open_finish = [[] for _ in range(T)]
    held_by = [[] for _ in range(T)]
    for bi, b in enumerate(plan.buffers):
        (open_start if b.at == "start" else open_finish)[b.opener].append(bi)
        for h, ahead in b.holders:
            held_by[h].append((bi, ahead))
    remaining = {}
    opened = set()
    usage = {"gpu": 0, "cpu": 0, "grad_delay": 0, "reclaim": 0}
    static = {"gpu": plan.gpu_static_bytes, "cpu": plan.cpu_static_bytes}
    capacity = {"gpu": machine.gpu_mem_bytes, "cpu": machine.cpu_usable_dram_bytes}
    peak = dict(static)
    by_what = {}
    peak_mix = {}

    aheads = [[a for _, a in b.holders] for b in plan.buffers]

    def holders_left(r, bi):
        return sum(1 for a in aheads[bi] if r + a < K)

    def open_buffers(g, now, which):
        r, j = divmod(g, T)
        for bi in which[j]:
            key = (r, bi)
            if key in remaining and remaining[key] <= 0:
                continue  # every holder already finished
            remaining.setdefault(key, holders_left(r, bi))
            opened.add(key)
            b = plan.buffers[bi]
            usage[b.pool] += b.nbytes
            if b.pool in capacity:
                what = (b.pool, b.what)
                by_what[what] = by_what.get(what, 0) + b.nbytes
                total = static[b.pool] + usage[b.pool]
                if total > peak[b.pool]:
                    peak[b.pool] = total
                    peak_mix[b.pool] = {w: v for w, v in by_what.items() if w[0] == b.pool and v}
                if total > capacity[b.pool]:
                    t = tasks[j]
                    raise MemoryCapacityError(
                        f"{b.pool.upper()} memory exceeded at t={now:.6g}s by task {t.id} "
                        f"({t.kind.value}, layer {t.layer}, micro-batch {t.microbatch}, "
                        f"iteration {r}): {total} B > {capacity[b.pool]} B ({b.what})")
            elif usage["grad_delay"] > usage["reclaim"]:
                raise MemoryCapacityError(
                    f"delayed gradients exceed reclaimed CPU memory at t={now:.6g}s "
                    f"(task {j}, iteration {r}): {usage['grad_delay']} B > {usage['reclaim']} B")

    def release(g):
        r, j = divmod(g, T)
        for bi, ahead in held_by[j]:
            ro = r - ahead
            if ro < 0:
                continue
            key = (ro, bi)
            if key not in remaining:
                remaining[key] = holders_left(ro, bi)
            remaining[key] -= 1
            if remaining[key] == 0 and key in opened:
                b = plan.buffers[bi]
                usage[b.pool] -= b.nbytes
                if b.pool in capacity:
                    by_what[(b.pool, b.what)] -= b.nbytes

    start = [0.0] * (K * T)
    finish = [0.0] * (K * T)
    finished_set = set()
    queues = [[] for _ in range(6)]
    busy = [False] * 6
    events = []
    seq = 0
    done = 0
    instant = []

    def make_ready(g):
        r, j = divmod(g, T)
        if res[j] is None:
            instant.append(g)
        else:
            heapq.heappush(queues[res[j]], (((r * L + stage[j]) * K + r) * T + j, g))

    def complete(g, now):
        nonlocal done
        finish[g] = now
        finished_set.add(g)
        done += 1
        open_buffers(g, now, open_finish)
        release(g)
        r, j = divmod(g, T)
        for s, back in succ[j]:
            rr = r + back
            if rr < K:
                h = rr * T + s
                indeg[h] -= 1
                if indeg[h] == 0:
                    make_ready(h)

    now = 0.0
    for g in range(K * T):
        if indeg[g] == 0:
            make_ready(g)
    while True:
        while instant:
            g = instant.pop()
            start[g] = now
            open_buffers(g, now, open_start)
            complete(g, now)
        for q in range(6):
            if not busy[q] and queues[q]:
                _, g = heapq.heappop(queues[q])
                j = g % T
                start[g] = now
                busy[q] = True
                open_buffers(g, now, open_start)
                seq += 1
                heapq.heappush(events, (now + dur[j], seq, g))
        if not events:
            if instant:
                continue
            break
        now = events[0][0]
        while events and events[0][0] == now:
            _, _, g = heapq.heappop(events)
            busy[res[g % T]] = False
            complete(g, now)

    if done != K * T:
        stuck = [g for g in range(K * T) if g not in finished_set]
        r, j = divmod(stuck[0], T)
        t = tasks[j]
        raise PlanDeadlock(f"plan bug: {len(stuck)} tasks never became runnable, first is task "
                           f"{t.id} ({t.kind.value}, stage {t.stage}, layer {t.layer}, "
                           f"micro-batch {t.microbatch}) of iteration {r}")

    ends = []
    for r in range(K):
        base = r * T
        ends.append(max((finish[base + j] for j in range(T) if is_compute[j]), default=0.0))
    # with no compute at all the iteration is measured by its last task
    if not any(is_compute):
        ends = [max(finish[r * T:(r + 1) * T], default=0.0) for r in range(K)]
    if REPORTED >= 1:
        iteration_time = ends[REPORTED] - ends[REPORTED - 1]
    else:
        iteration_time = ends[0]

    ledger = TrafficLedger()
    busy_time = [0.0] * 6
    base = REPORTED * T
    for j, t in enumerate(tasks):
        if t.kind == TaskKind.XFER:
            ledger.add(t.data_kind, t.link, t.nbytes)
            busy_time[_LINK_RESOURCE[t.link]] += dur[j]
        elif res[j] is not None:
            busy_time[res[j]] += finish[base + j] - start[base + j]
    util = {}
    for name, b in zip(RESOURCES, busy_time):
        util[name] = min(b / iteration_time, 1.0) if iteration_time > 0 else 0.0
    report = SimReport(
        iteration_time=iteration_time,
        throughput=plan.samples / iteration_time if iteration_time > 0 else float("inf"),
        ledger=ledger,
        gpu_mem_peak=peak["gpu"],
        cpu_mem_peak=peak["cpu"],
        resource_utilization=util,
        bound_class=BoundClass.COMPUTE,
        schedule=plan.kind.variant,
        num_microbatches=plan.num_microbatches,
        alpha=plan.kind.alpha,
        split=plan.split.as_tuple(),
        busy_time=dict(zip(RESOURCES, busy_time)),
        ssd_duplex=machine.ssd_duplex,
        peak_breakdown={pool: {w[1]: v for w, v in mix.items()} for pool, mix in peak_mix.items()},
    )
    report.bound_class = classify_bound(report)
    return report


def time_credit(machine: MachineSpec, num_layers: int, ckpt_io_per_mb: float) -> float:
    """Compute time one extra micro-batch adds minus its marginal checkpoint I/O."""
    compute = num_layers * (machine.fwd_compute_time_per_layer_per_mb
                            + machine.bwd_compute_time_per_layer_per_mb)
    return compute - ckpt_io_per_mb
