"""Task-graph generation for the single-pass, horizontal and vertical schedules.

A ``SchedulePlan`` describes ONE training iteration as a list of tasks.
Dependencies come in two flavours: ``deps`` point at tasks of the same
iteration, ``carry`` entries ``(task_id, back)`` point at a task ``back``
iterations earlier.  The simulator unrolls the template several times and
drops carried dependencies that fall before the first iteration.

Each task sits in a pipeline stage.  A stage ends when its last GPU compute
task finishes; prefetch-style transfers wait on the barrier that opens their
stage, which is how the stage offsets of the pipelined schedule are
enforced.  Buffers record memory that a task charges (at its start or
finish) and that is released once all holder tasks have finished.
"""

from __future__ import annotations

import enum
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .machine import LinkKind, MachineSpec
from .model import ConfigError, ModelSpec, derive_layer_sizes
from .traffic import (
    DataKind,
    LayerBytes,
    StorageSplit,
    layer_bytes,
    resident,
    single_fb_ckpt_bytes,
)

__all__ = [
    "TaskKind", "Task", "Buffer", "ScheduleKind", "SchedulePlan", "StorageSplit",
    "PlanRejected", "build_horizontal", "build_vertical", "build_single_fb",
    "overlap_window", "snake_order", "cpu_mem_terms", "plan_to_json", "plan_from_json",
]


class PlanRejected(ValueError):
    """The requested schedule cannot run under the given memory constraints."""


class TaskKind(str, enum.Enum):
    FWD = "FwdCompute"
    BWD = "RecomputeAndBwd"
    STEP = "CpuStep"
    XFER = "Xfer"
    BARRIER = "Barrier"
    OVERHEAD = "Overhead"   # embedding, LM head and loss; once per iteration


COMPUTE_KINDS = (TaskKind.FWD, TaskKind.BWD, TaskKind.OVERHEAD)


@dataclass
class Task:
    id: int
    kind: TaskKind
    stage: int
    layer: int = -1
    microbatch: int | None = None          # None means all micro-batches
    data_kind: DataKind | None = None
    link: LinkKind | None = None
    nbytes: int = 0
    work: float = 0.0                       # compute: multiple of the per-layer time; step: elements
    deps: list = field(default_factory=list)
    carry: list = field(default_factory=list)


@dataclass
class Buffer:
    pool: str                # gpu | cpu | grad_delay | reclaim
    nbytes: int
    opener: int
    at: str                  # "start" or "finish" of the opener
    holders: list            # (task_id, ahead): released when all have finished
    what: str = ""


@dataclass(frozen=True)
class ScheduleKind:
    variant: str                 # single-fb | horizontal | vertical
    alpha: float = 0.0
    extra_ckpt: bool = False

    def __post_init__(self):
        if self.variant not in ("single-fb", "horizontal", "vertical"):
            raise ConfigError(f"unknown schedule {self.variant!r}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha!r}")


@dataclass
class SchedulePlan:
    kind: ScheduleKind
    model: ModelSpec
    num_microbatches: int
    split: StorageSplit
    tasks: list
    buffers: list
    num_stages: int              # stages per iteration
    samples: int                 # samples per iteration on all GPUs
    gpu_static_bytes: int
    cpu_static_bytes: int
    cpu_budget_bytes: int        # static share plus reserved pipeline buffers

    def count(self, kind=None, data_kind=None, link=None) -> int:
        return sum(1 for t in self.tasks
                   if (kind is None or t.kind == kind)
                   and (data_kind is None or t.data_kind == data_kind)
                   and (link is None or t.link == link))

    def xfer_bytes(self, data_kind=None, link=None) -> int:
        return sum(t.nbytes for t in self.tasks if t.kind == TaskKind.XFER
                   and (data_kind is None or t.data_kind == data_kind)
                   and (link is None or t.link == link))

    def microbatch_order(self, stage: int) -> list:
        kinds = (TaskKind.FWD, TaskKind.BWD)
        return [t.microbatch for t in self.tasks if t.stage == stage and t.kind in kinds]

    def validate(self) -> None:
        """Check ids, acyclicity of same-iteration edges and transfer sanity."""
        n = len(self.tasks)
        indeg = [0] * n
        succ = defaultdict(list)
        for t in self.tasks:
            if t.kind == TaskKind.XFER and (t.nbytes <= 0 or t.link is None):
                raise ValueError(f"transfer task {t.id} has no bytes or link")
            for d in t.deps:
                if not 0 <= d < n:
                    raise ValueError(f"task {t.id} depends on unknown task {d}")
                indeg[t.id] += 1
                succ[d].append(t.id)
            for d, back in t.carry:
                if back < 1 or not 0 <= d < n:
                    raise ValueError(f"task {t.id} has a bad carried dependency {(d, back)}")
        stack = [i for i in range(n) if indeg[i] == 0]
        seen = 0
        while stack:
            i = stack.pop()
            seen += 1
            for j in succ[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    stack.append(j)
        if seen != n:
            raise ValueError("task graph has a cycle")


def snake_order(stage: int, M: int) -> list:
    """Micro-batch visit order: ascending on even stages, descending on odd ones."""
    return list(range(M)) if stage % 2 == 0 else list(range(M - 1, -1, -1))


@dataclass(frozen=True)
class Ahead:
    """Holder reference to a task ``n`` iterations after the buffer's opener."""

    ref: object
    n: int = 1


def _chunks(total: int, parts: int) -> list:
    q, r = divmod(total, parts)
    return [q + (1 if k < r else 0) for k in range(parts)]


# --------------------------------------------------------------------------
# CPU memory accounting shared with the planner


def cpu_mem_terms(model: ModelSpec, M: int, variant: str = "vertical", ckpts_per_mb: int = 1) -> tuple:
    """CPU bytes as ``const + a_ckpt*x_ckpt + a_param*x_param + a_opt*x_opt``.

    Resident shares plus the pipeline's working buffers: two param staging
    slots, two checkpoint staging slots, a two-layer optimizer rotation
    buffer, gradient slots and the inter-layer gradient buffers.
    """
    lb = layer_bytes(model, M, StorageSplit(0.0, 0.0, 0.0))
    N = model.num_layers
    P, O, G, C = lb.param, lb.opt, lb.grad, lb.ckpt
    if variant == "vertical":
        const = 2 * P + 2 * M * C + 2 * (O + P) + 2 * G + 2 * max(M - 1, 0) * C
        a_ckpt = N * M * C - 2 * M * C
    else:
        # per-layer, per-micro-batch checkpoint staging; the full accumulation buffer lives in CPU
        const = 2 * P + 2 * C + 2 * (O + P) + N * G
        a_ckpt = N * M * ckpts_per_mb * C - 2 * C
    a_param = N * P - 4 * P
    a_opt = N * O - 2 * O
    return const, a_ckpt, a_param, a_opt


def cpu_budget(model: ModelSpec, M: int, split: StorageSplit, variant: str = "vertical") -> float:
    const, a_c, a_p, a_o = cpu_mem_terms(model, M, variant)
    return const + a_c * split.x_ckpt + a_p * split.x_param + a_o * split.x_opt


def cpu_static(model: ModelSpec, M: int, split: StorageSplit, ckpt: int, ckpts_per_mb: int,
               variant: str) -> int:
    lb = layer_bytes(model, M, split)
    N = model.num_layers
    static = (N * (lb.param - lb.ssd_param) + N * (lb.opt - lb.ssd_opt)
              + N * ckpts_per_mb * resident(M * ckpt, split.x_ckpt))
    if variant != "vertical":
        static += N * lb.grad
    return static


def reclaim_capacity(lb: LayerBytes, M: int, alpha: float) -> int:
    """CPU bytes per layer freed by the backward pass and reusable for delayed gradients."""
    cpu_param = lb.param - lb.ssd_param
    cpu_ckpt = M * lb.ckpt - lb.ssd_ckpt_layer
    return resident(cpu_param, alpha) + cpu_ckpt


# --------------------------------------------------------------------------
# builder


class _Builder:
    def __init__(self, num_stages: int, M: int, gpus: int):
        self.L = num_stages
        self.M = M
        self.gpus = gpus
        self.tasks = []
        self.buffers = []
        self.names = {}
        self.rings = defaultdict(list)
        self.barriers = {}
        self.stage_last_compute = {}
        self.last_compute = None
        self.first_compute = None

    # tasks -------------------------------------------------------------
    def add(self, kind, stage, layer=-1, mb=None, deps=(), carry=(), name=None, **kw):
        if kind == TaskKind.XFER and kw.get("nbytes", 0) <= 0:
            if name is not None:
                self.names[name] = None
            return None
        tid = len(self.tasks)
        t = Task(tid, kind, stage, layer, mb, deps=list(deps), carry=list(carry), **kw)
        self.tasks.append(t)
        if name is not None:
            self.names[name] = tid
        if kind in COMPUTE_KINDS:
            if self.last_compute is not None:
                t.deps.append(self.last_compute)
            else:
                self.first_compute = tid
            self.last_compute = tid
            self.stage_last_compute[stage] = tid
        return tid

    def xfer(self, data_kind, link, nbytes, stage, **kw):
        return self.add(TaskKind.XFER, stage, data_kind=data_kind, link=link, nbytes=int(nbytes), **kw)

    def gate(self, stage):
        if stage not in self.barriers:
            self.barriers[stage] = self.add(TaskKind.BARRIER, stage)
        return self.barriers[stage]

    # memory ------------------------------------------------------------
    def buffer(self, pool, nbytes, opener, holders=(), at="start", what=""):
        if opener is None or nbytes <= 0:
            return
        hs = [(h.ref, h.n) if isinstance(h, Ahead) else (h, 0) for h in holders]
        hs = [h for h in hs if h[0] is not None]
        if not hs:
            hs = [(opener, 0)]
        self.buffers.append(Buffer(pool, int(nbytes), opener, at, hs, what))

    def gpu(self, nbytes):
        """Per-GPU share of an aggregate activation-sized tensor."""
        return nbytes // self.gpus

    def ring_use(self, ring, openers, holders):
        openers = [o for o in openers if o is not None]
        if openers:
            self.rings[ring].append((openers, [h for h in holders if h is not None] or openers[:1]))

    # finalisation ------------------------------------------------------
    def _resolve(self, ref):
        if ref is None or isinstance(ref, int):
            return ref
        return self.names.get(ref)

    def finish(self):
        L = self.L
        # stage barriers open when the previous stage's compute is done
        for stage, bid in self.barriers.items():
            g, back = stage - 1, 0
            while g < 0:
                g += L
                back += 1
            last = self.stage_last_compute.get(g)
            if last is None:
                continue
            if back == 0:
                self.tasks[bid].deps.append(last)
            else:
                self.tasks[bid].carry.append((last, back))
        # GPU program order across iterations
        if self.first_compute is not None:
            self.tasks[self.first_compute].carry.append((self.last_compute, 1))
        # two-slot buffer rings: use k waits for the holders of use k-2
        for uses in self.rings.values():
            n = len(uses)
            for k, (openers, _) in enumerate(uses):
                src = k - 2
                back = 0
                while src < 0:
                    src += n
                    back += 1
                for h in uses[src][1]:
                    for o in openers:
                        if back == 0:
                            self.tasks[o].deps.append(h)
                        else:
                            self.tasks[o].carry.append((h, back))
        for t in self.tasks:
            t.deps = sorted({d for d in (self._resolve(x) for x in t.deps) if d is not None})
            carry = set()
            for ref, back in t.carry:
                d = self._resolve(ref)
                if d is not None:
                    carry.add((d, back))
            t.carry = sorted(carry)
        for b in self.buffers:
            b.holders = [(self._resolve(h), a) for h, a in b.holders]
            b.holders = [(h, a) for h, a in b.holders if h is not None]
            if not b.holders:
                b.holders = [(b.opener, 0)]
        # plan order: by stage, emission order within a stage
        order = sorted(range(len(self.tasks)), key=lambda i: (self.tasks[i].stage, i))
        remap = {old: new for new, old in enumerate(order)}
        tasks = []
        for old in order:
            t = self.tasks[old]
            t.id = remap[old]
            t.deps = sorted(remap[d] for d in t.deps)
            t.carry = sorted((remap[d], b) for d, b in t.carry)
            tasks.append(t)
        for b in self.buffers:
            b.opener = remap[b.opener]
            b.holders = [(remap[h], a) for h, a in b.holders]
        return tasks, self.buffers


def _gpu_working_set(model: ModelSpec, machine: MachineSpec | None, samples: int) -> int:
    if machine is None:
        return 0
    return machine.act_bytes_per_sample * samples


# --------------------------------------------------------------------------
# vertical


def build_vertical(model: ModelSpec, M: int, split: StorageSplit, alpha: float = 0.0,
                   machine: MachineSpec | None = None) -> SchedulePlan:
    if not isinstance(M, int) or M < 1:
        raise ValueError(f"M must be an integer >= 1, got {M!r}")
    kind = ScheduleKind("vertical", alpha=alpha)
    lb = layer_bytes(model, M, split, alpha)
    N = model.num_layers
    gpus = model.data_parallel_degree
    if alpha > 0:
        capacity = reclaim_capacity(lb, M, alpha)
        if lb.grad_delay > capacity:
            ratio = lb.grad - resident(lb.param - lb.ssd_param, 1.0)
            limit = (M * lb.ckpt - lb.ssd_ckpt_layer) / ratio if ratio > 0 else 1.0
            raise PlanRejected(
                f"delayed gradients need {lb.grad_delay} B per layer but only {capacity} B of "
                f"parameter/checkpoint memory is reclaimed; reduce alpha to <= {limit:.4f}")
    L = 2 * N
    b = _Builder(L, M, gpus)
    C, Cg = lb.ckpt, b.gpu(lb.ckpt)
    work_set = _gpu_working_set(model, machine, model.microbatch_size)
    chunk_sizes = _chunks(lb.param, M)
    delayed = alpha > 0
    fwd_param_ssd = lb.ssd_param - lb.ssd_param_delay
    bwd_opt_ssd = lb.ssd_opt - lb.ssd_opt_delay
    bwd_param_ssd = lb.ssd_param - lb.ssd_param_delay

    # ---------------- forward
    for i in range(N):
        s = i
        a_step = None
        if delayed:
            a_read = b.xfer(DataKind.OPT_STATE, LinkKind.SSD_READ, lb.ssd_opt_delay, i - 3,
                            layer=i, deps=[b.gate(i - 3)])
            a_step = b.add(TaskKind.STEP, i - 2, layer=i, work=float(lb.elements_delay),
                           deps=[a_read], carry=[(("g_off", i), 1)], name=("a_step", i))
            a_wopt = b.xfer(DataKind.OPT_STATE, LinkKind.SSD_WRITE, lb.ssd_opt_delay, i - 1,
                            layer=i, deps=[a_step])
            a_wpar = b.xfer(DataKind.PARAM, LinkKind.SSD_WRITE, lb.ssd_param_delay, i - 1,
                            layer=i, deps=[a_step], name=("a_wpar", i))
            rot_open = a_read if a_read is not None else a_step
            rot_holders = [a_wopt, a_wpar] + [("p_h2d", i, k) for k in range(M)]
            b.buffer("cpu", lb.ssd_opt_delay + lb.ssd_param_delay, rot_open, rot_holders,
                     what="rotation (delayed)")
            b.ring_use("rot_fwd", [rot_open], rot_holders)
        p_read = b.xfer(DataKind.PARAM, LinkKind.SSD_READ, fwd_param_ssd, i - 2, layer=i,
                        deps=[b.gate(i - 2)], carry=[(("b_wpar", i), 1)])
        chunks = []
        for k, nb in enumerate(chunk_sizes):
            c = b.xfer(DataKind.PARAM, LinkKind.H2D, nb, i - 1, layer=i, mb=k,
                       deps=[b.gate(i - 1), p_read, a_step], carry=[(("b_step", i), 1)],
                       name=("p_h2d", i, k))
            chunks.append(c)
        b.buffer("cpu", fwd_param_ssd, p_read, chunks, what="param staging")
        b.ring_use("param", [p_read], chunks)
        order = snake_order(s, M)
        last_m = order[-1]
        for k, m in enumerate(order):
            reload = None
            if i > 0 and k > 0:
                look = b.gate(s) if k == 1 else ("fc", i, order[k - 2])
                reload = b.xfer(DataKind.CKPT, LinkKind.H2D, C, s, layer=i, mb=m,
                                deps=[("w", i, m), look], name=("reload", i, m))
                b.buffer("gpu", Cg, reload, [("fc", i, m)], what="ckpt reload")
            # later computes follow the first one on the GPU, so only it waits on the chunks
            fc = b.add(TaskKind.FWD, s, layer=i, mb=m, work=1.0,
                       deps=(chunks if k == 0 else []) + [reload], name=("fc", i, m))
            b.buffer("gpu", work_set, fc, [fc], what="working set")
            if i == 0:
                w_in = b.xfer(DataKind.CKPT, LinkKind.D2H, C, s, layer=0, mb=m,
                              deps=[fc, ("a_step", 0)], name=("w", 0, m))
                b.buffer("gpu", Cg, fc, [fc, w_in], what="layer-0 input")
            if i < N - 1:
                w_out = b.xfer(DataKind.CKPT, LinkKind.D2H, C, s, layer=i + 1, mb=m,
                               deps=[fc, ("a_step", i + 1)], name=("w", i + 1, m))
                holders = [w_out] + ([("fc", i + 1, m)] if m == last_m else [])
                b.buffer("gpu", Cg, fc, holders, what="fwd output")
            else:
                b.buffer("gpu", Cg, fc, ["head"], what="last-layer output")
        for c, nb in zip(chunks, chunk_sizes):
            b.buffer("gpu", nb, c, [("fc", i, last_m)], what="param chunk")
        if i == N - 1:
            b.add(TaskKind.OVERHEAD, s, work=1.0, name="head")

    # checkpoint staging and flushes (checkpoint j is the input of layer j)
    for j in range(N):
        written = 0 if j == 0 else j - 1
        writes = [("w", j, m) for m in range(M)]
        flush = b.xfer(DataKind.CKPT, LinkKind.SSD_WRITE, lb.ssd_ckpt_layer, written + 1, layer=j,
                       deps=[b.gate(written + 1)] + writes, name=("flush", j))
        if flush is not None:
            reloads = [("reload", j, m) for m in range(M)]
            b.buffer("cpu", lb.ssd_ckpt_layer, b.names[("w", j, snake_order(written, M)[0])],
                     [flush] + reloads, what="ckpt staging")
            b.ring_use("ckpt", [b.names[w] for w in writes], [flush] + reloads)

    # ---------------- backward + optimizer step
    for i in range(N - 1, -1, -1):
        s = L - 1 - i
        p_read = b.xfer(DataKind.PARAM, LinkKind.SSD_READ, lb.ssd_param, s - 2, layer=i,
                        deps=[b.gate(s - 2), ("a_wpar", i)])
        chunks = [b.xfer(DataKind.PARAM, LinkKind.H2D, nb, s - 1, layer=i, mb=k,
                         deps=[b.gate(s - 1), p_read, ("a_step", i)])
                  for k, nb in enumerate(chunk_sizes)]
        b.buffer("cpu", lb.ssd_param, p_read, chunks, what="param staging")
        b.ring_use("param", [p_read], chunks)
        ck_read = b.xfer(DataKind.CKPT, LinkKind.SSD_READ, lb.ssd_ckpt_layer, s - 1, layer=i,
                         deps=[b.gate(s - 1), ("flush", i)])
        order = snake_order(s, M)
        loads = []
        for k, m in enumerate(order):
            look = b.gate(s - 1) if k == 0 else (b.gate(s) if k == 1 else ("bc", i, order[k - 2]))
            ld = b.xfer(DataKind.CKPT, LinkKind.H2D, C, s - 1 if k == 0 else s, layer=i, mb=m,
                        deps=[ck_read, ("w", i, m), look])
            loads.append(ld)
            b.buffer("gpu", Cg, ld, [("bc", i, m)], what="ckpt load")
            gl = None
            if i < N - 1 and k > 0:
                gl = b.xfer(DataKind.INTERLAYER_GRAD, LinkKind.H2D, C, s, layer=i, mb=m,
                            deps=[("gw", i + 1, m), look], name=("gl", i, m))
                b.buffer("gpu", Cg, gl, [("bc", i, m)], what="grad load")
            bc = b.add(TaskKind.BWD, s, layer=i, mb=m, work=1.0,
                       deps=(chunks if k == 0 else []) + [ld, gl], name=("bc", i, m))
            b.buffer("gpu", work_set, bc, [bc], what="working set")
            if i > 0:
                if k == M - 1:
                    b.buffer("gpu", Cg, bc, [("bc", i - 1, m)], what="grad kept on GPU")
                else:
                    gw = b.xfer(DataKind.INTERLAYER_GRAD, LinkKind.D2H, C, s, layer=i, mb=m,
                                deps=[bc], name=("gw", i, m))
                    b.buffer("gpu", Cg, bc, [gw], what="grad out")
                    b.buffer("cpu", C, gw, [("gl", i - 1, m)], what="inter-layer grad")
        if ck_read is not None:
            b.buffer("cpu", lb.ssd_ckpt_layer, ck_read, loads, what="ckpt staging")
            b.ring_use("ckpt", [ck_read], loads)
        last_bc = b.names[("bc", i, order[-1])]
        for c, nb in zip(chunks, chunk_sizes):
            b.buffer("gpu", nb, c, [last_bc], what="param chunk")
        g_off = b.xfer(DataKind.GRAD_ACCUM, LinkKind.D2H, lb.grad, s + 1, layer=i,
                       deps=[b.gate(s + 1), last_bc], name=("g_off", i))
        o_read = b.xfer(DataKind.OPT_STATE, LinkKind.SSD_READ, bwd_opt_ssd, s + 1, layer=i,
                        deps=[b.gate(s + 1)])
        b_step = b.add(TaskKind.STEP, s + 2, layer=i, work=float(lb.elements - lb.elements_delay),
                       deps=[g_off, o_read], name=("b_step", i))
        b_wopt = b.xfer(DataKind.OPT_STATE, LinkKind.SSD_WRITE, bwd_opt_ssd, s + 3, layer=i,
                        deps=[b_step])
        b_wpar = b.xfer(DataKind.PARAM, LinkKind.SSD_WRITE, bwd_param_ssd, s + 3, layer=i,
                        deps=[b_step], name=("b_wpar", i))
        b.buffer("cpu", lb.grad, g_off, [b_step], what="grad slot")
        b.ring_use("grad", [g_off], [b_step])
        rot_open = o_read if o_read is not None else b_step
        b.buffer("cpu", bwd_opt_ssd + bwd_param_ssd, rot_open, [b_wopt, b_wpar], what="rotation")
        b.ring_use("rot_bwd", [rot_open], [b_wopt, b_wpar])
        if delayed:
            b.buffer("grad_delay", lb.grad_delay, g_off, [Ahead(("a_step", i))], at="finish",
                     what="delayed gradient")
            b.buffer("reclaim", reclaim_capacity(lb, M, alpha), last_bc, [Ahead(("a_step", i))],
                     at="finish", what="reclaimed memory")

    tasks, buffers = b.finish()
    const, a_c, a_p, a_o = cpu_mem_terms(model, M, "vertical")
    budget = const + a_c * split.x_ckpt + a_p * split.x_param + a_o * split.x_opt
    plan = SchedulePlan(
        kind=kind, model=model, num_microbatches=M, split=split, tasks=tasks, buffers=buffers,
        num_stages=L, samples=M * model.microbatch_size * gpus,
        gpu_static_bytes=2 * lb.grad,
        cpu_static_bytes=cpu_static(model, M, split, C, 1, "vertical"),
        cpu_budget_bytes=math.ceil(budget),
    )
    return plan


# --------------------------------------------------------------------------
# horizontal and single forward-backward


def _build_sequential(model: ModelSpec, M: int, split: StorageSplit, kind: ScheduleKind,
                      ckpt: int, ckpts_per_layer: int, work: float,
                      machine: MachineSpec | None, samples_per_mb: int) -> SchedulePlan:
    N = model.num_layers
    gpus = model.data_parallel_degree
    lb = layer_bytes(model, M, split, ckpt_override=ckpt)
    L = 2 * N * M
    b = _Builder(L, M, gpus)
    C, Cg = lb.ckpt, b.gpu(lb.ckpt)
    work_set = _gpu_working_set(model, machine, samples_per_mb)
    if kind.extra_ckpt:
        work_set = (2 * work_set) // 3

    def fs(m, i):
        return m * 2 * N + i

    def bs(m, i):
        return m * 2 * N + 2 * N - 1 - i

    def param_load(m, i, stage, fwd):
        carry = []
        if fwd and m == 0:
            carry = [(("b_wpar", i), 1)]
        rd = b.xfer(DataKind.PARAM, LinkKind.SSD_READ, lb.ssd_param, stage - 2, layer=i, mb=m,
                    deps=[b.gate(stage - 2)], carry=carry)
        h2d = b.xfer(DataKind.PARAM, LinkKind.H2D, lb.param, stage - 1, layer=i, mb=m,
                     deps=[b.gate(stage - 1), rd],
                     carry=[(("b_step", i), 1)] if fwd and m == 0 else [])
        b.buffer("cpu", lb.ssd_param, rd, [h2d], what="param staging")
        b.ring_use("param", [rd], [h2d])
        return h2d

    for m in range(M):
        for i in range(N):
            s = fs(m, i)
            h2d = param_load(m, i, s, True)
            fc = b.add(TaskKind.FWD, s, layer=i, mb=m, work=work, deps=[h2d], name=("fc", m, i))
            b.buffer("gpu", lb.param, h2d, [fc], what="params")
            b.buffer("gpu", work_set, fc, [fc], what="working set")
            writes = []
            # checkpoint slots: (ckpt layer j, copy q)
            slots = []
            if i == 0:
                slots.append((0, 0))
            if ckpts_per_layer == 2:
                slots.append((i, 1))  # mid-block checkpoint
            if i < N - 1:
                slots.append((i + 1, 0))
            for j, q in slots:
                w = b.xfer(DataKind.CKPT, LinkKind.D2H, C, s, layer=j, mb=m, deps=[fc],
                           name=("w", m, j, q))
                writes.append(w)
                fl = b.xfer(DataKind.CKPT, LinkKind.SSD_WRITE, lb.ssd_ckpt_mb, s + 1, layer=j, mb=m,
                            deps=[b.gate(s + 1), w], name=("flush", m, j, q))
                b.buffer("cpu", lb.ssd_ckpt_mb, w, [fl], what="ckpt staging")
                b.ring_use("ckpt", [w], [fl])
            out_holders = [("fc", m, i + 1)] if i < N - 1 else [("bc", m, N - 1)]
            b.buffer("gpu", Cg * ckpts_per_layer, fc, writes + out_holders, what="activations")
        if m == M - 1:
            b.add(TaskKind.OVERHEAD, fs(m, N - 1), work=1.0, name="head")
        for i in range(N - 1, -1, -1):
            s = bs(m, i)
            h2d = param_load(m, i, s, False)
            loads = []
            for q in range(ckpts_per_layer):
                rd = b.xfer(DataKind.CKPT, LinkKind.SSD_READ, lb.ssd_ckpt_mb, s - 1, layer=i, mb=m,
                            deps=[b.gate(s - 1), ("flush", m, i, q)])
                ld = b.xfer(DataKind.CKPT, LinkKind.H2D, C, s - 1, layer=i, mb=m,
                            deps=[b.gate(s - 1), rd, ("w", m, i, q)])
                b.buffer("cpu", lb.ssd_ckpt_mb, rd, [ld], what="ckpt staging")
                b.ring_use("ckpt", [rd], [ld])
                b.buffer("gpu", Cg, ld, [("bc", m, i)], what="ckpt load")
                loads.append(ld)
            fetch = None
            if m > 0:
                fetch = b.xfer(DataKind.GRAD_ACCUM, LinkKind.H2D, lb.grad, s - 1, layer=i, mb=m,
                               deps=[b.gate(s - 1), ("g_off", m - 1, i)])
            bc = b.add(TaskKind.BWD, s, layer=i, mb=m, work=work, deps=[h2d, fetch] + loads,
                       name=("bc", m, i))
            b.buffer("gpu", lb.param, h2d, [bc], what="params")
            b.buffer("gpu", work_set, bc, [bc], what="working set")
            g_off = b.xfer(DataKind.GRAD_ACCUM, LinkKind.D2H, lb.grad, s, layer=i, mb=m,
                           deps=[bc], name=("g_off", m, i))
            b.buffer("gpu", lb.grad, fetch if fetch is not None else bc, [g_off], what="grad buffer")
            if i > 0:
                b.buffer("gpu", Cg, bc, [("bc", m, i - 1)], what="inter-layer grad")
            if m == M - 1:
                o_read = b.xfer(DataKind.OPT_STATE, LinkKind.SSD_READ, lb.ssd_opt, s + 1, layer=i,
                                deps=[b.gate(s + 1)])
                st = b.add(TaskKind.STEP, s + 2, layer=i, work=float(lb.elements),
                           deps=[g_off, o_read], name=("b_step", i))
                w_opt = b.xfer(DataKind.OPT_STATE, LinkKind.SSD_WRITE, lb.ssd_opt, s + 3, layer=i,
                               deps=[st])
                w_par = b.xfer(DataKind.PARAM, LinkKind.SSD_WRITE, lb.ssd_param, s + 3, layer=i,
                               deps=[st], name=("b_wpar", i))
                rot_open = o_read if o_read is not None else st
                b.buffer("cpu", lb.ssd_opt + lb.ssd_param, rot_open, [w_opt, w_par], what="rotation")
                b.ring_use("rot_bwd", [rot_open], [w_opt, w_par])

    tasks, buffers = b.finish()
    resident_ckpt = N * M * ckpts_per_layer * (C - lb.ssd_ckpt_mb)
    budget = (N * (lb.param - lb.ssd_param) + N * (lb.opt - lb.ssd_opt) + resident_ckpt
              + N * lb.grad + 2 * lb.ssd_param + 2 * lb.ssd_ckpt_mb + 2 * (lb.ssd_opt + lb.ssd_param))
    return SchedulePlan(
        kind=kind, model=model, num_microbatches=M, split=split, tasks=tasks, buffers=buffers,
        num_stages=L, samples=M * samples_per_mb * gpus,
        gpu_static_bytes=0,
        cpu_static_bytes=(N * (lb.param - lb.ssd_param) + N * (lb.opt - lb.ssd_opt)
                          + resident_ckpt + N * lb.grad),
        cpu_budget_bytes=budget,
    )


def build_horizontal(model: ModelSpec, M: int, split: StorageSplit,
                     machine: MachineSpec | None = None) -> SchedulePlan:
    if not isinstance(M, int) or M < 1:
        raise ValueError(f"M must be an integer >= 1, got {M!r}")
    lb = layer_bytes(model, M, split)
    return _build_sequential(model, M, split, ScheduleKind("horizontal"), lb.ckpt, 1, 1.0,
                             machine, model.microbatch_size)


# Peak per-sample working set relative to per-layer checkpointing: the extra
# checkpoint between attention and FFN cuts the recomputed span to about 2/3.
EXTRA_CKPT_WORKSET = 2 / 3


def max_single_fb_batch(model: ModelSpec, machine: MachineSpec, extra_ckpt: bool) -> tuple:
    """Largest single-pass batch the GPU can hold and the operator that binds it."""
    sizes = derive_layer_sizes(model)
    fixed = 2 * sizes.param_bytes_low + sizes.grad_bytes_full
    per_sample = machine.act_bytes_per_sample * (EXTRA_CKPT_WORKSET if extra_ckpt else 1.0)
    # each sample also keeps its inter-layer activation and gradient on the GPU
    per_sample += 2 * (sizes.ckpt_bytes_per_mb // model.microbatch_size)
    avail = machine.gpu_mem_bytes - fixed
    operator = "FFN recompute span" if extra_ckpt else "transformer-block recompute span"
    if per_sample <= 0:
        return math.inf, operator
    return max(int(avail // per_sample), 0), operator


def build_single_fb(model: ModelSpec, batch: int, extra_ckpt: bool, split: StorageSplit,
                    machine: MachineSpec | None = None) -> SchedulePlan:
    if not isinstance(batch, int) or batch < 1:
        raise ValueError(f"batch must be an integer >= 1, got {batch!r}")
    if machine is not None and machine.act_bytes_per_sample > 0:
        cap, operator = max_single_fb_batch(model, machine, extra_ckpt)
        if batch > cap:
            raise PlanRejected(f"batch {batch} exceeds the GPU memory cap of {cap} samples "
                               f"set by the {operator}")
    ckpt = single_fb_ckpt_bytes(model, batch)
    work = batch / model.microbatch_size
    return _build_sequential(model, 1, split, ScheduleKind("single-fb", extra_ckpt=extra_ckpt),
                             ckpt, 2 if extra_ckpt else 1, work, machine, batch)


def overlap_window(plan: SchedulePlan) -> int:
    """Layer x micro-batch units of GPU compute that can hide the optimizer step."""
    N = plan.model.num_layers
    M = plan.num_microbatches
    if plan.kind.variant != "vertical":
        return N - 1
    base = (N - 1) * M
    return base + math.floor(plan.kind.alpha * base)


# --------------------------------------------------------------------------
# serialisation


def plan_to_json(plan: SchedulePlan) -> str:
    def task_dict(t: Task):
        d = {"id": t.id, "kind": t.kind.value, "stage": t.stage, "layer": t.layer,
             "microbatch": t.microbatch, "deps": t.deps, "carry": [list(c) for c in t.carry]}
        if t.kind == TaskKind.XFER:
            d.update(data_kind=t.data_kind.value, link=t.link.value, nbytes=t.nbytes)
        if t.work:
            d["work"] = t.work
        return d

    doc = {
        "kind": asdict(plan.kind),
        "model": asdict(plan.model),
        "num_microbatches": plan.num_microbatches,
        "split": asdict(plan.split),
        "num_stages": plan.num_stages,
        "samples": plan.samples,
        "gpu_static_bytes": plan.gpu_static_bytes,
        "cpu_static_bytes": plan.cpu_static_bytes,
        "cpu_budget_bytes": plan.cpu_budget_bytes,
        "tasks": [task_dict(t) for t in plan.tasks],
        "buffers": [{"pool": b.pool, "nbytes": b.nbytes, "opener": b.opener, "at": b.at,
                     "holders": [list(h) for h in b.holders], "what": b.what}
                    for b in plan.buffers],
    }
    return json.dumps(doc, separators=(",", ":"))


def plan_from_json(text: str) -> SchedulePlan:
    doc = json.loads(text)
    tasks = []
    for d in doc["tasks"]:
        tasks.append(Task(
            id=d["id"], kind=TaskKind(d["kind"]), stage=d["stage"], layer=d["layer"],
            microbatch=d["microbatch"],
            data_kind=DataKind(d["data_kind"]) if "data_kind" in d else None,
            link=LinkKind(d["link"]) if "link" in d else None,
            nbytes=d.get("nbytes", 0), work=d.get("work", 0.0),
            deps=list(d["deps"]), carry=[tuple(c) for c in d["carry"]]))
    buffers = [Buffer(b["pool"], b["nbytes"], b["opener"], b["at"],
                      [tuple(h) for h in b["holders"]], b.get("what", ""))
               for b in doc["buffers"]]
    return SchedulePlan(
        kind=ScheduleKind(**doc["kind"]), model=ModelSpec(**doc["model"]),
        num_microbatches=doc["num_microbatches"], split=StorageSplit(**doc["split"]),
        tasks=tasks, buffers=buffers, num_stages=doc["num_stages"], samples=doc["samples"],
        gpu_static_bytes=doc["gpu_static_bytes"], cpu_static_bytes=doc["cpu_static_bytes"],
        cpu_budget_bytes=doc["cpu_budget_bytes"],
    )
