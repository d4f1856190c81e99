import random
from fractions import Fraction

from hypothesis import given, strategies as st

from offloadsim.lp import frac, solve_lp


def test_two_variable_optimum():
    res = solve_lp([-1, -1], [[1, 2], [3, 1]], [4, 6])
    assert res.status == "optimal"
    assert res.x == [Fraction(8, 5), Fraction(6, 5)]
    assert res.objective == Fraction(-14, 5)


def test_infeasible():
    assert solve_lp([1], [[1]], [-1]).status == "infeasible"


def test_unbounded():
    assert solve_lp([-1, 0], [[0, 1]], [1]).status == "unbounded"


def test_equality_and_ge_rows():
    # min x + y  s.t.  x + y = 1,  x - y <= 0,  x >= 1/4 (written as -x <= -1/4)
    res = solve_lp([1, 1], [[1, -1], [-1, 0]], [0, Fraction(-1, 4)], [[1, 1]], [1])
    assert res.status == "optimal"
    assert res.objective == 1
    assert res.x[0] >= Fraction(1, 4) and res.x[0] <= res.x[1]


def test_degenerate_cycling_example_terminates():
    # a classic problem on which the largest-coefficient rule cycles forever
    c = [Fraction(-3, 4), 20, Fraction(-1, 2), 6]
    a = [[Fraction(1, 4), -8, -1, 9], [Fraction(1, 2), -12, Fraction(-1, 2), 3], [0, 0, 1, 0]]
    res = solve_lp(c, a, [0, 0, 1])
    assert res.status == "optimal"
    assert res.objective == Fraction(-5, 4)
    assert res.x == [1, 0, 1, 0]


def test_frac_uses_shortest_decimal():
    assert frac(0.1) == Fraction(1, 10)
    assert frac(3) == Fraction(3)


def _feasible(a, b, x):
    return all(sum(ai * xi for ai, xi in zip(row, x)) <= bi for row, bi in zip(a, b))


@given(seed=st.integers(0, 10**6), n=st.integers(1, 4), m=st.integers(1, 5))
def test_optimum_beats_random_feasible_points(seed, n, m):
    rng = random.Random(seed)
    # box plus random packing rows: always feasible (x = 0) and bounded
    a = [[Fraction(rng.randint(0, 9)) for _ in range(n)] for _ in range(m)]
    b = [Fraction(rng.randint(1, 20)) for _ in range(m)]
    for k in range(n):
        row = [Fraction(0)] * n
        row[k] = Fraction(1)
        a.append(row)
        b.append(Fraction(rng.randint(1, 5)))
    c = [Fraction(rng.randint(-9, 9)) for _ in range(n)]
    res = solve_lp(c, a, b)
    assert res.status == "optimal"
    assert all(v >= 0 for v in res.x) and _feasible(a, b, res.x)
    for _ in range(50):
        x = [Fraction(rng.randint(0, 50), 10) for _ in range(n)]
        if _feasible(a, b, x):
            assert res.objective <= sum(ci * xi for ci, xi in zip(c, x))
