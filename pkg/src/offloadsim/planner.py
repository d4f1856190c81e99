"""Storage-split and micro-batch planning for the vertical schedule.

For a fixed micro-batch count ``n`` and delay ratio ``alpha`` the per-layer
forward and backward times are each bounded below by compute, SSD, PCIe and
CPU-step terms that are affine in the CPU-resident fractions, so the best
split is a small LP.  The outer search walks ``n`` upward, taking the best
``alpha`` for each, until throughput stops improving by at least 1%.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .lp import frac, solve_lp
from .machine import LinkKind, MachineSpec
from .model import ConfigError, ModelSpec
from .schedule import cpu_mem_terms
from .traffic import StorageSplit, layer_bytes

ALPHA_GRID = tuple([0.0] + [k / 100 for k in range(1, 51)])
IMPROVEMENT = Fraction(101, 100)
DRAM_SLACK = 4096        # bytes kept free for rounding between the LP and the byte-exact plan
DELAY_SLACK = 64

ZERO = Fraction(0)


class PlanningError(ValueError):
    """No storage split can run the vertical schedule on this machine."""


@dataclass(frozen=True)
class Affine:
    """``const + ckpt*x_ckpt + param*x_param + opt*x_opt``."""

    const: Fraction = ZERO
    ckpt: Fraction = ZERO
    param: Fraction = ZERO
    opt: Fraction = ZERO

    def __add__(self, other):
        return Affine(self.const + other.const, self.ckpt + other.ckpt,
                      self.param + other.param, self.opt + other.opt)

    def scale(self, k):
        k = frac(k)
        return Affine(self.const * k, self.ckpt * k, self.param * k, self.opt * k)

    def coefs(self):
        return [self.ckpt, self.param, self.opt]

    def at(self, x_ckpt, x_param, x_opt):
        return self.const + self.ckpt * x_ckpt + self.param * x_param + self.opt * x_opt


def _offloaded(total, which) -> Affine:
    """Bytes of ``total`` left on SSD: ``total * (1 - x)``."""
    t = frac(total)
    return Affine(t, **{which: -t})


@dataclass
class LayerModel:
    """Lower bounds on the per-layer forward/backward times plus the feasibility rows."""

    fwd: dict
    bwd: dict
    ssd_bytes: Affine
    cpu_mem: Affine
    dram_limit: Fraction
    delay: Affine | None     # must be >= 0 when present
    reg: Fraction            # regularisation weight on SSD bytes


def layer_model(model: ModelSpec, machine: MachineSpec, n: int, alpha: float) -> LayerModel:
    if model.data_parallel_degree != machine.num_gpus:
        raise ConfigError("data_parallel_degree must equal num_gpus")
    lb = layer_bytes(model, n, StorageSplit(0.0, 0.0, 0.0))
    N = model.num_layers
    a = frac(alpha)
    P, O, G, C, E = (frac(v) for v in (lb.param, lb.opt, lb.grad, lb.ckpt, lb.elements))
    nC = n * C
    param_ssd = _offloaded(P, "param")
    opt_ssd = _offloaded(O, "opt")
    ckpt_ssd = _offloaded(nC, "ckpt")

    f_read = param_ssd.scale(1 - a) + opt_ssd.scale(a)
    f_write = ckpt_ssd + opt_ssd.scale(a) + param_ssd.scale(a)
    b_read = param_ssd + ckpt_ssd + opt_ssd.scale(1 - a)
    b_write = (opt_ssd + param_ssd).scale(1 - a)

    r = frac(machine.bandwidth(LinkKind.SSD_READ))
    w = frac(machine.bandwidth(LinkKind.SSD_WRITE))
    h2d = frac(machine.bandwidth(LinkKind.H2D))
    d2h = frac(machine.bandwidth(LinkKind.D2H))
    thr = frac(machine.cpu_step_throughput)
    turning = Fraction((N - 1) * (n - 1), N) * C  # per-layer average of the cross-boundary traffic

    def const(v):
        return Affine(frac(v))

    fwd = {
        "gpu_compute": const(n * frac(machine.fwd_compute_time_per_layer_per_mb)),
        "pcie_h2d": const((P + turning) / h2d),
        "pcie_d2h": const(nC / d2h),
        "cpu_step": const(a * E / thr),
    }
    bwd = {
        "gpu_compute": const(n * frac(machine.bwd_compute_time_per_layer_per_mb)),
        "pcie_h2d": const((P + nC + turning) / h2d),
        "pcie_d2h": const((G + turning) / d2h),
        "cpu_step": const((1 - a) * E / thr),
    }
    if machine.ssd_duplex:
        fwd["ssd_read"] = f_read.scale(1 / r)
        fwd["ssd_write"] = f_write.scale(1 / w)
        bwd["ssd_read"] = b_read.scale(1 / r)
        bwd["ssd_write"] = b_write.scale(1 / w)
    else:
        fwd["ssd"] = f_read.scale(1 / r) + f_write.scale(1 / w)
        bwd["ssd"] = b_read.scale(1 / r) + b_write.scale(1 / w)

    c0, cc, cp, co = cpu_mem_terms(model, n, "vertical")
    cpu_mem = Affine(frac(c0), frac(cc), frac(cp), frac(co))
    delay = None
    if alpha > 0:
        delay = Affine(-(a * G) - DELAY_SLACK, nC, a * P, ZERO)
    return LayerModel(
        fwd=fwd, bwd=bwd,
        ssd_bytes=f_read + f_write + b_read + b_write,
        cpu_mem=cpu_mem,
        dram_limit=frac(machine.cpu_usable_dram_bytes) - DRAM_SLACK,
        delay=delay,
        reg=1 / (Fraction(10) ** 6 * (P + O + nC)),
    )


@dataclass
class ConfigResult:
    n: int
    alpha: float
    split: StorageSplit
    t_fwd: Fraction          # per layer
    t_bwd: Fraction
    objective: Fraction
    exact_split: tuple

    @property
    def per_layer_time(self) -> float:
        return float(self.t_fwd + self.t_bwd)


def _rows(lm: LayerModel):
    a_ub, b_ub = [], []
    for k in range(3):
        row = [ZERO] * 5
        row[k] = Fraction(1)
        a_ub.append(row)
        b_ub.append(Fraction(1))
    for col, bounds in ((3, lm.fwd), (4, lm.bwd)):
        # constant bounds collapse into their maximum
        floor = max(e.const for e in bounds.values() if not any(e.coefs()))
        exprs = [Affine(floor)] + [e for e in bounds.values() if any(e.coefs())]
        for e in exprs:
            row = e.coefs() + [ZERO, ZERO]
            row[col] = Fraction(-1)
            a_ub.append(row)
            b_ub.append(-e.const)
    a_ub.append(lm.cpu_mem.coefs() + [ZERO, ZERO])
    b_ub.append(lm.dram_limit - lm.cpu_mem.const)
    if lm.delay is not None:
        a_ub.append([-v for v in lm.delay.coefs()] + [ZERO, ZERO])
        b_ub.append(lm.delay.const)
    return a_ub, b_ub


def _lex_refine(c, a_ub, b_ub, value):
    """Among optimal points prefer CPU residency of opt states, then params, then checkpoints."""
    a_eq, b_eq = [c], [value]
    x = None
    for k in (2, 1, 0):
        goal = [ZERO] * 5
        goal[k] = Fraction(-1)
        res = solve_lp(goal, a_ub, b_ub, a_eq, b_eq)
        x = res.x
        row = [ZERO] * 5
        row[k] = Fraction(1)
        a_eq = a_eq + [row]
        b_eq = b_eq + [x[k]]
    return x


def solve_config(machine: MachineSpec, model: ModelSpec, n: int, alpha: float,
                 tie_break: bool = False) -> ConfigResult | None:
    """Best storage split for ``n`` micro-batches at delay ratio ``alpha``; None if infeasible."""
    if not isinstance(n, int) or n < 1:
        raise ValueError(f"n must be an integer >= 1, got {n!r}")
    if not (0.0 <= alpha <= 0.5):
        raise ValueError(f"alpha must lie in [0, 0.5], got {alpha!r}")
    lm = layer_model(model, machine, n, alpha)
    a_ub, b_ub = _rows(lm)
    c = [lm.reg * v for v in lm.ssd_bytes.coefs()] + [Fraction(1), Fraction(1)]
    res = solve_lp(c, a_ub, b_ub)
    if res.status != "optimal":
        return None
    x = res.x
    if tie_break:
        x = _lex_refine(c, a_ub, b_ub, res.objective)
    split = StorageSplit(float(x[0]), float(x[1]), float(x[2]))
    return ConfigResult(n, alpha, split, x[3], x[4], res.objective + lm.reg * lm.ssd_bytes.const,
                        tuple(x[:3]))


def min_cpu_mem(model: ModelSpec, machine: MachineSpec, n: int) -> float:
    lm = layer_model(model, machine, n, 0.0)
    return float(min(lm.cpu_mem.at(xc, xp, xo) for xc in (0, 1) for xp in (0, 1) for xo in (0, 1)))


@dataclass
class PlanSolution:
    n: int
    alpha: float
    split: StorageSplit
    iteration_time: float
    throughput: float
    per_layer_time: float
    t_fwd: float
    t_bwd: float
    fixed_overhead_time: float = 0.0

    def to_dict(self) -> dict:
        def g(x):
            return float(f"{x:.6g}")
        return {
            "n": self.n,
            "alpha": g(self.alpha),
            "split": {"x_ckpt": g(self.split.x_ckpt), "x_param": g(self.split.x_param),
                      "x_opt": g(self.split.x_opt)},
            "iteration_time": g(self.iteration_time),
            "throughput": g(self.throughput),
            "per_layer_time": g(self.per_layer_time),
        }


def whole_model_projection(solution: PlanSolution, model: ModelSpec) -> tuple:
    """Iteration time and throughput from the per-layer time and the fixed overhead."""
    t = solution.per_layer_time * model.num_layers + solution.fixed_overhead_time
    samples = solution.n * model.microbatch_size * model.data_parallel_degree
    return t, (samples / t if t > 0 else math.inf)


def _solution(res: ConfigResult, model: ModelSpec, machine: MachineSpec) -> PlanSolution:
    sol = PlanSolution(res.n, res.alpha, res.split, 0.0, 0.0, res.per_layer_time,
                       float(res.t_fwd), float(res.t_bwd), machine.fixed_overhead_time)
    sol.iteration_time, sol.throughput = whole_model_projection(sol, model)
    return sol


def _exact_throughput(res: ConfigResult, model: ModelSpec, machine: MachineSpec) -> Fraction:
    t = (res.t_fwd + res.t_bwd) * model.num_layers + frac(machine.fixed_overhead_time)
    return Fraction(res.n * model.microbatch_size * model.data_parallel_degree) / t


def best_for_n(machine: MachineSpec, model: ModelSpec, n: int, alphas=ALPHA_GRID):
    """Highest-throughput alpha for ``n``; the smallest alpha wins ties."""
    best, best_thr = None, None
    for alpha in alphas:
        res = solve_config(machine, model, n, alpha)
        if res is None:
            continue
        thr = _exact_throughput(res, model, machine)
        if best is None or thr > best_thr:
            best, best_thr = res, thr
    return best, best_thr


def find_optimal_config(machine: MachineSpec, model: ModelSpec, alphas=ALPHA_GRID,
                        max_microbatches: int = 512) -> PlanSolution:
    best, max_thr = None, Fraction(0)
    for n in range(1, max_microbatches + 1):
        res, thr = best_for_n(machine, model, n, alphas)
        if res is None:
            if n == 1:
                need = min_cpu_mem(model, machine, 1)
                raise PlanningError(
                    f"infeasible at n=1: usable_dram ({machine.cpu_usable_dram_bytes} B) is below "
                    f"the {need:.0f} B the vertical schedule's buffers need")
            break  # checkpoints for more micro-batches no longer fit
        if thr >= IMPROVEMENT * max_thr:
            best, max_thr = res, thr
        else:
            break
    final = solve_config(machine, model, best.n, best.alpha, tie_break=True)
    return _solution(final, model, machine)


# --------------------------------------------------------------------------
# brute-force oracle


def grid_search(machine: MachineSpec, model: ModelSpec, n: int, alpha: float, steps: int = 100):
    """Minimum LP objective over x on a ``1/steps`` grid; returns (objective, split) or None."""
    import numpy as np

    lm = layer_model(model, machine, n, alpha)
    g = np.linspace(0.0, 1.0, steps + 1)
    xc, xp, xo = np.meshgrid(g, g, g, indexing="ij")

    def ev(e: Affine):
        return (float(e.const) + float(e.ckpt) * xc + float(e.param) * xp + float(e.opt) * xo)

    t_f = np.maximum.reduce([ev(e) for e in lm.fwd.values()])
    t_b = np.maximum.reduce([ev(e) for e in lm.bwd.values()])
    obj = t_f + t_b + float(lm.reg) * ev(lm.ssd_bytes)
    ok = ev(lm.cpu_mem) <= float(lm.dram_limit)
    if lm.delay is not None:
        ok &= ev(lm.delay) >= 0
    if not ok.any():
        return None
    obj = np.where(ok, obj, np.inf)
    idx = np.unravel_index(np.argmin(obj), obj.shape)
    return float(obj[idx]), (float(xc[idx]), float(xp[idx]), float(xo[idx]))


def baseline_split(model: ModelSpec, machine: MachineSpec, M: int, variant: str = "horizontal",
                   ckpts_per_mb: int = 1) -> StorageSplit:
    """Greedy CPU placement for the baseline schedules: params, then checkpoints, then opt states.

    Params go first because the baselines re-read them for every micro-batch.

    Raises PlanningError when even the all-SSD placement does not fit.
    """
    const, *coefs = cpu_mem_terms(model, M, variant, ckpts_per_mb)
    room = machine.cpu_usable_dram_bytes - DRAM_SLACK - const
    x = [0.0, 0.0, 0.0]
    # kinds whose residency frees buffer space come first, at full residency
    for k, a in enumerate(coefs):
        if a <= 0:
            x[k] = 1.0
            room -= a
    if room < 0:
        raise PlanningError(f"usable_dram ({machine.cpu_usable_dram_bytes} B) cannot hold the "
                            f"{variant} schedule's buffers even with everything on SSD")
    for k in (1, 0, 2):
        a = coefs[k]
        if a > 0:
            x[k] = min(1.0, math.floor(room / a * 1e6) / 1e6)
            room -= a * x[k]
    return StorageSplit(*x)
