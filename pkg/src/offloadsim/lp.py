"""Small dense linear programs solved exactly over rationals.

Two-phase tableau simplex with Bland's rule, so it always terminates and
the optimum it reports is exact.  Intended for a handful of variables and
constraints; there is no sparsity or numerical cleverness here.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction


def frac(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    # go through the shortest repr so 0.1 becomes 1/10, not its binary expansion
    return Fraction(repr(float(x)))


@dataclass
class LpResult:
    status: str              # optimal | infeasible | unbounded
    x: list | None = None
    objective: Fraction | None = None


def _pivot(tab, row, col):
    pr = tab[row]
    pv = pr[col]
    if pv != 1:
        tab[row] = pr = [v / pv for v in pr]
    for i, r in enumerate(tab):
        if i != row:
            f = r[col]
            if f:
                tab[i] = [a - f * b if b else a for a, b in zip(r, pr)]


def _simplex(tab, basis, ncols):
    """Minimise the objective kept in the last tableau row (reduced costs)."""
    m = len(tab) - 1
    while True:
        obj = tab[-1]
        col = next((j for j in range(ncols) if obj[j] < 0), None)  # Bland: lowest index
        if col is None:
            return True
        best = None
        for i in range(m):
            a = tab[i][col]
            if a > 0:
                ratio = tab[i][-1] / a
                if best is None or ratio < best[0] or (ratio == best[0] and basis[i] < basis[best[1]]):
                    best = (ratio, i)
        if best is None:
            return False
        row = best[1]
        _pivot(tab, row, col)
        basis[row] = col


def solve_lp(c, a_ub=(), b_ub=(), a_eq=(), b_eq=()) -> LpResult:
    """Minimise ``c @ x`` subject to ``a_ub @ x <= b_ub``, ``a_eq @ x == b_eq``, ``x >= 0``."""
    n = len(c)
    rows = []  # (coefs, rhs, kind) with kind in {"le", "ge", "eq"} after making rhs >= 0
    for a, b in zip(a_ub, b_ub):
        a, b = [frac(v) for v in a], frac(b)
        rows.append((a, b, "le") if b >= 0 else ([-v for v in a], -b, "ge"))
    for a, b in zip(a_eq, b_eq):
        a, b = [frac(v) for v in a], frac(b)
        rows.append((a, b, "eq") if b >= 0 else ([-v for v in a], -b, "eq"))
    m = len(rows)
    n_slack = sum(1 for r in rows if r[2] != "eq")
    n_art = sum(1 for r in rows if r[2] != "le")
    total = n + n_slack + n_art
    tab, basis = [], []
    s_idx, a_idx = n, n + n_slack
    artificials = []
    for a, b, kind in rows:
        row = a + [Fraction(0)] * (n_slack + n_art) + [b]
        if kind == "le":
            row[s_idx] = Fraction(1)
            basis.append(s_idx)
            s_idx += 1
        else:
            if kind == "ge":
                row[s_idx] = Fraction(-1)
                s_idx += 1
            row[a_idx] = Fraction(1)
            basis.append(a_idx)
            artificials.append(a_idx)
            a_idx += 1
        tab.append(row)

    if artificials:
        # phase 1: minimise the sum of artificials
        obj = [Fraction(0)] * (total + 1)
        for j in artificials:
            obj[j] = Fraction(1)
        for i, bj in enumerate(basis):
            if bj in artificials:
                obj = [o - v for o, v in zip(obj, tab[i])]
        tab.append(obj)
        _simplex(tab, basis, total)
        if tab[-1][-1] != 0:
            return LpResult("infeasible")
        tab.pop()
        # drive remaining (zero-valued) artificials out of the basis
        art = set(artificials)
        for i, bj in enumerate(basis):
            if bj in art:
                col = next((j for j in range(n + n_slack) if tab[i][j] != 0), None)
                if col is not None:
                    _pivot(tab, i, col)
                    basis[i] = col
        keep = [i for i, bj in enumerate(basis) if bj not in art]
        tab = [tab[i] for i in keep]
        basis = [basis[i] for i in keep]
        width = n + n_slack
        tab = [r[:width] + [r[-1]] for r in tab]
        total = width

    obj = [frac(v) for v in c] + [Fraction(0)] * (total - n) + [Fraction(0)]
    for i, bj in enumerate(basis):
        f = obj[bj]
        if f:
            obj = [o - f * v for o, v in zip(obj, tab[i])]
    tab.append(obj)
    if not _simplex(tab, basis, total):
        return LpResult("unbounded")
    x = [Fraction(0)] * total
    for i, bj in enumerate(basis):
        x[bj] = tab[i][-1]
    x = x[:n]
    value = sum((frac(ci) * xi for ci, xi in zip(c, x)), Fraction(0))
    return LpResult("optimal", x, value)
