"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 infeasible plan or simulation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .alloc import plan_alloc
from .config import RunConfig, parse_config, parse_size
from .model import ConfigError
from .planner import (
    PlanningError,
    baseline_split,
    best_for_n,
    find_optimal_config,
    grid_search,
    solve_config,
)
from .roofline import compute_roofline, io_roofline
from .schedule import (
    PlanRejected,
    build_horizontal,
    build_single_fb,
    build_vertical,
    plan_from_json,
    plan_to_json,
)
from .simulator import SimulationError, simulate
from .traffic import StorageSplit, horizontal_ledger, single_fb_ledger, vertical_ledger

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3
INFEASIBLE = (PlanRejected, PlanningError, SimulationError)


def _g(x: float) -> str:
    return f"{x:.6g}"


@dataclass(frozen=True)
class RunSpec:
    """One schedule variant to run: ``alpha`` may be "auto" (planner's pick per M)."""

    variant: str
    alpha: object = None
    split: StorageSplit | None = None
    extra_ckpt: bool = False

    @property
    def label(self) -> str:
        parts = [self.variant + ("+ckpt" if self.extra_ckpt else "")]
        if self.alpha is not None:
            parts.append(f"alpha={self.alpha}")
        if self.split is not None:
            parts.append("split=" + ",".join(_g(v) for v in self.split.as_tuple()))
        return ":".join(parts)


def parse_run_spec(text: str) -> RunSpec:
    """``vertical``, ``vertical:alpha=0.3``, ``vertical:split=0,0,0``, ``single-fb+ckpt``."""
    head, *opts = text.split(":")
    extra = head.endswith("+ckpt")
    variant = head[:-5] if extra else head
    if variant not in ("horizontal", "vertical", "single-fb"):
        raise ConfigError(f"unknown schedule {head!r}")
    alpha, split = None, None
    for opt in opts:
        key, _, value = opt.partition("=")
        if key == "alpha":
            alpha = value if value == "auto" else float(value)
        elif key == "split":
            split = StorageSplit.parse(value)
        else:
            raise ConfigError(f"unknown schedule option {key!r} in {text!r}")
    return RunSpec(variant, alpha, split, extra)


def build_plan(cfg: RunConfig, spec: RunSpec, M: int):
    """Resolve defaults (alpha, split) for ``M`` and build the plan."""
    model, machine = cfg.model, cfg.machine
    if spec.variant == "vertical":
        alpha = 0.0 if spec.alpha is None else spec.alpha
        split = spec.split
        if alpha == "auto":
            res, _ = best_for_n(machine, model, M)
            if res is None:
                raise PlanningError(f"no storage split fits in CPU memory at M={M}")
            alpha = res.alpha
            if split is None:
                split = solve_config(machine, model, M, alpha, tie_break=True).split
        if split is None:
            res = solve_config(machine, model, M, alpha, tie_break=True)
            if res is None:
                raise PlanningError(f"no storage split fits in CPU memory at M={M}, alpha={alpha}")
            split = res.split
        return build_vertical(model, M, split, alpha, machine)
    if spec.variant == "horizontal":
        split = spec.split or baseline_split(model, machine, M)
        return build_horizontal(model, M, split, machine)
    batch = M * model.microbatch_size
    per = 2 if spec.extra_ckpt else 1
    split = spec.split or baseline_split(model.with_(microbatch_size=batch), machine, 1,
                                         "horizontal", per)
    return build_single_fb(model, batch, spec.extra_ckpt, split, machine)


def config_spec(cfg: RunConfig) -> RunSpec:
    s = cfg.schedule
    return RunSpec(s.variant, s.alpha, s.split, s.extra_ckpt)


def resolve_microbatches(cfg: RunConfig, spec: RunSpec):
    """Fill M (and, for a bare vertical config, alpha and split) from the planner."""
    M = cfg.schedule.microbatches
    if M is not None:
        return M, spec
    if spec.variant != "vertical":
        return 1, spec
    sol = find_optimal_config(cfg.machine, cfg.model)
    alpha = sol.alpha if spec.alpha is None else spec.alpha
    split = spec.split if spec.split is not None else (sol.split if alpha == sol.alpha else None)
    return sol.n, replace(spec, alpha=alpha, split=split)


# --------------------------------------------------------------------------
# sweeps


SWEEP_COLUMNS = ["microbatches", "batch", "throughput", "io_limit", "compute_limit",
                 "bound_class", "note"]


def run_sweep(cfg: RunConfig, m_range, spec: RunSpec | None = None) -> list:
    spec = spec or config_spec(cfg)
    model, machine = cfg.model, cfg.machine
    rows = []
    for M in sorted(m_range):
        batch = M * model.microbatch_size * machine.num_gpus
        row = {"microbatches": M, "batch": batch}
        try:
            plan = build_plan(cfg, spec, M)
            rep = simulate(plan, machine)
        except INFEASIBLE as e:
            row.update(throughput=None, io_limit=None, compute_limit=None,
                       bound_class="infeasible", note=str(e))
            rows.append(row)
            continue
        row.update(
            throughput=rep.throughput,
            io_limit=io_roofline(model, machine, plan.samples, plan.split.x_opt),
            compute_limit=compute_roofline(model, machine),
            bound_class=rep.bound_class.value,
            note="",
        )
        rows.append(row)
    return rows


def saturation(throughputs: dict, level: float = 0.99):
    """(saturated throughput, smallest M reaching ``level`` of it) over feasible points."""
    feasible = {m: t for m, t in throughputs.items() if t is not None}
    if not feasible:
        return None, None
    top = max(feasible.values())
    first = min(m for m, t in feasible.items() if t >= level * top)
    return top, first


def run_compare(cfg: RunConfig, specs: list, m_range) -> list:
    if len(specs) < 2:
        raise ConfigError("compare needs at least two schedules")
    ms = sorted(m_range)
    table = []
    for spec in specs:
        rows = run_sweep(cfg, ms, spec)
        thr = {r["microbatches"]: r["throughput"] for r in rows}
        top, first = saturation(thr)
        table.append({"schedule": spec.label, "throughput": thr, "saturated": top,
                      "saturation_m": first})
    a, b = table[0], table[1]
    ratio = {m: (a["throughput"][m] / b["throughput"][m]
                 if a["throughput"][m] and b["throughput"][m] else None) for m in ms}
    sat_ratio = a["saturated"] / b["saturated"] if a["saturated"] and b["saturated"] else None
    table.append({"schedule": f"ratio:{a['schedule']}/{b['schedule']}", "throughput": ratio,
                  "saturated": sat_ratio, "saturation_m": None})
    return table


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return _g(v)
    return str(v)


def sweep_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_cell(r[c]) for c in SWEEP_COLUMNS])
    return out.getvalue()


def compare_csv(table, ms) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["schedule", *[f"M={m}" for m in ms], "saturated", "saturation_m"])
    for row in table:
        w.writerow([row["schedule"], *[_cell(row["throughput"][m]) for m in ms],
                    _cell(row["saturated"]), _cell(row["saturation_m"])])
    return out.getvalue()


def _rounded(obj):
    if isinstance(obj, float):
        return float(_g(obj))
    if isinstance(obj, dict):
        return {str(k): _rounded(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_rounded(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# argument handling


def parse_m_range(text: str):
    try:
        if ".." in text:
            a, b = text.split("..")
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(text)
    except ValueError:
        raise ConfigError(f"--m-range: expected a..b, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise ConfigError(f"--m-range: need 1 <= a <= b, got {text!r}")
    return range(lo, hi + 1)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    s = cfg.schedule
    if getattr(args, "schedule", None):
        s = replace(s, variant=args.schedule)
    if getattr(args, "microbatches", None) is not None:
        if args.microbatches < 1:
            raise ConfigError("--microbatches must be >= 1")
        s = replace(s, microbatches=args.microbatches)
    if getattr(args, "alpha", None) is not None:
        a = args.alpha
        if a != "auto":
            a = float(a)
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"--alpha must lie in [0, 1], got {a}")
        s = replace(s, alpha=a)
    if getattr(args, "split", None):
        s = replace(s, split=StorageSplit.parse(args.split))
    if getattr(args, "extra_ckpt", False):
        s = replace(s, extra_ckpt=True)
    fmt = getattr(args, "format", None) or cfg.output_format
    out = getattr(args, "out", None) or cfg.output_path
    return replace(cfg, schedule=s, output_format=fmt, output_path=out)


def _emit(text: str, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")


def _schedule_flags(p):
    p.add_argument("--schedule", choices=["horizontal", "vertical", "single-fb"])
    p.add_argument("--microbatches", type=int)
    p.add_argument("--alpha", help="delay ratio, or 'auto' for the planner's choice")
    p.add_argument("--split", help="x_ckpt,x_param,x_opt")
    p.add_argument("--extra-ckpt", action="store_true", help="single-fb: checkpoint inside the block too")


def _common(p, default_format=None):
    p.add_argument("--out")
    p.add_argument("--format", choices=["json", "csv"], default=default_format)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="offloadsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="simulate one configuration")
    p.add_argument("config")
    _schedule_flags(p)
    p.add_argument("--emit-plan", help="also write the task graph as JSON")
    p.add_argument("--plan-file", help="simulate a previously emitted plan instead of building one")
    _common(p)

    p = sub.add_parser("sweep", help="simulate a range of micro-batch counts")
    p.add_argument("config")
    p.add_argument("--m-range", required=True)
    _schedule_flags(p)
    _common(p, "csv")

    p = sub.add_parser("compare", help="throughput of several schedules over M")
    p.add_argument("config")
    p.add_argument("--m-range", required=True)
    p.add_argument("--schedules", nargs="+", required=True,
                   help="e.g. vertical horizontal vertical:alpha=0.3 vertical:split=0,0,0")
    _common(p, "csv")

    p = sub.add_parser("plan", help="run the configuration optimizer")
    p.add_argument("config")
    p.add_argument("--oracle", action="store_true", help="cross-check the LP against a grid search")
    p.add_argument("--max-microbatches", type=int, default=512)
    _common(p)

    p = sub.add_parser("traffic", help="closed-form traffic ledger")
    p.add_argument("config")
    _schedule_flags(p)
    _common(p)

    p = sub.add_parser("alloc-plan", help="pack equal buffers into power-of-two requests")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", required=True, help="bytes per buffer, units allowed (e.g. 4.1GiB)")
    _common(p)
    return ap


def _cmd_simulate(cfg, args):
    if args.plan_file:
        plan = plan_from_json(Path(args.plan_file).read_text())
    else:
        spec = config_spec(cfg)
        M, spec = resolve_microbatches(cfg, spec)
        plan = build_plan(cfg, spec, M)
    if args.emit_plan:
        Path(args.emit_plan).write_text(plan_to_json(plan))
    rep = simulate(plan, cfg.machine)
    if cfg.output_format == "csv":
        return rep.ledger.to_csv()
    return json.dumps(rep.to_dict(), indent=2)


def _cmd_sweep(cfg, args):
    rows = run_sweep(cfg, parse_m_range(args.m_range))
    if cfg.output_format == "json":
        return json.dumps(_rounded(rows), indent=2)
    return sweep_csv(rows)


def _cmd_compare(cfg, args):
    ms = list(parse_m_range(args.m_range))
    table = run_compare(cfg, [parse_run_spec(s) for s in args.schedules], ms)
    if cfg.output_format == "json":
        return json.dumps(_rounded(table), indent=2)
    return compare_csv(table, ms)


def _cmd_plan(cfg, args):
    sol = find_optimal_config(cfg.machine, cfg.model, max_microbatches=args.max_microbatches)
    doc = sol.to_dict()
    if args.oracle:
        res = solve_config(cfg.machine, cfg.model, sol.n, sol.alpha)
        grid = grid_search(cfg.machine, cfg.model, sol.n, sol.alpha)
        lp = float(res.objective)
        doc["oracle"] = {"lp_objective": float(_g(lp)), "grid_objective": float(_g(grid[0])),
                         "max_deviation": float(_g(abs(grid[0] - lp) / lp if lp else 0.0))}
    if cfg.output_format == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["n", "alpha", "x_ckpt", "x_param", "x_opt", "iteration_time", "throughput"])
        w.writerow([sol.n, _g(sol.alpha), *[_g(v) for v in sol.split.as_tuple()],
                    _g(sol.iteration_time), _g(sol.throughput)])
        return out.getvalue()
    return json.dumps(doc, indent=2)


def _cmd_traffic(cfg, args):
    spec = config_spec(cfg)
    M, spec = resolve_microbatches(cfg, spec)
    plan = build_plan(cfg, spec, M)
    if plan.kind.variant == "vertical":
        ledger = vertical_ledger(cfg.model, M, plan.split, plan.kind.alpha)
    elif plan.kind.variant == "horizontal":
        ledger = horizontal_ledger(cfg.model, M, plan.split)
    else:
        ledger = single_fb_ledger(cfg.model, M * cfg.model.microbatch_size, plan.kind.extra_ckpt,
                                  plan.split)
    if cfg.output_format == "csv":
        return ledger.to_csv()
    return json.dumps(ledger.to_dict(), indent=2)


def _cmd_alloc(args):
    plan = plan_alloc(args.count, int(parse_size(args.size, "--size")))
    if args.format == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["logical_buffer_count", "request_bytes", "granted_bytes"])
        for r in plan.requests:
            w.writerow([r.logical_buffer_count, r.request_bytes, r.granted_bytes])
        return out.getvalue()
    return plan.to_json()


COMMANDS = {"simulate": _cmd_simulate, "sweep": _cmd_sweep, "compare": _cmd_compare,
            "plan": _cmd_plan, "traffic": _cmd_traffic}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.cmd == "alloc-plan":
            _emit(_cmd_alloc(args), args.out)
            return EXIT_OK
        cfg = _apply_overrides(parse_config(args.config), args)
        _emit(COMMANDS[args.cmd](cfg, args), cfg.output_path)
    except INFEASIBLE as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
