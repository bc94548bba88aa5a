import itertools

import numpy as np
import pytest

from sliceopt.solvers import (
    BoxQP,
    InputError,
    LinearProgram,
    adaptive_quad,
    bisect,
    dykstra,
    fista,
    make_polyhedron_projection,
    solve_box_qp,
    solve_lp,
)


# ---------------------------------------------------------------------------
# LP


def test_lp_scalar_bounds():
    lp = LinearProgram(c=[1.0], lo=[3.0], hi=[10.0])
    res = solve_lp(lp)
    assert res.optimal
    assert res.x[0] == pytest.approx(3.0, abs=1e-9)


def test_lp_simplex_vertex():
    lp = LinearProgram(c=[-1.0, -1.0], A_ub=[[1.0, 1.0]], b_ub=[1.0], lo=[0, 0], hi=[1, 1])
    res = solve_lp(lp)
    assert res.objective == pytest.approx(-1.0, abs=1e-9)


def test_lp_infeasible_and_unbounded():
    res = solve_lp(LinearProgram(c=[1.0], A_ub=[[1.0], [-1.0]], b_ub=[1.0, -2.0], lo=[0.0]))
    assert res.status == "infeasible"
    res = solve_lp(LinearProgram(c=[-1.0], lo=[0.0]))
    assert res.status == "unbounded"


def test_lp_equality_rows():
    # min x + y s.t. x + y = 2, x - y <= 0.5
    lp = LinearProgram(c=[1.0, 1.0], A_ub=[[1.0, -1.0]], b_ub=[0.5],
                       A_eq=[[1.0, 1.0]], b_eq=[2.0], lo=[0, 0])
    res = solve_lp(lp)
    assert res.optimal
    assert res.objective == pytest.approx(2.0, abs=1e-9)
    assert res.x[0] + res.x[1] == pytest.approx(2.0, abs=1e-9)


def test_lp_free_variable():
    lp = LinearProgram(c=[1.0], A_ub=[[-1.0]], b_ub=[5.0], lo=[-np.inf])
    res = solve_lp(lp)
    assert res.x[0] == pytest.approx(-5.0, abs=1e-9)


def _enumerate_vertices(A, b, lo, hi):
    """Brute-force vertex enumeration of {lo <= x <= hi, A x <= b}."""
    n = A.shape[1]
    rows = [(A[i], b[i]) for i in range(A.shape[0])]
    rows += [(np.eye(n)[j], hi[j]) for j in range(n) if np.isfinite(hi[j])]
    rows += [(-np.eye(n)[j], -lo[j]) for j in range(n)]
    verts = []
    for combo in itertools.combinations(range(len(rows)), n):
        M = np.array([rows[i][0] for i in combo])
        rhs = np.array([rows[i][1] for i in combo])
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, rhs)
        if np.all(A @ x <= b + 1e-9) and np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9):
            verts.append(x)
    return verts


def test_lp_against_vertex_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n, m = 4, 5
        A = rng.normal(size=(m, n))
        x0 = rng.uniform(0.1, 1.0, size=n)
        b = A @ x0 + rng.uniform(0.05, 1.0, size=m)  # feasible by construction
        c = rng.normal(size=n)
        lo = np.zeros(n)
        hi = rng.uniform(1.5, 3.0, size=n)  # bounded polytope
        res = solve_lp(LinearProgram(c=c, A_ub=A, b_ub=b, lo=lo, hi=hi))
        assert res.optimal
        verts = _enumerate_vertices(A, b, lo, hi)
        best = min(c @ v for v in verts)
        assert res.objective == pytest.approx(best, abs=1e-7)


def test_lp_random_medium_kkt():
    # random 20x40 problems, certified by strong duality + complementary slackness
    rng = np.random.default_rng(42)
    for trial in range(5):
        m, n = 20, 40
        A = rng.normal(size=(m, n))
        x0 = rng.uniform(0.0, 1.0, size=n)
        b = A @ x0 + rng.uniform(0.1, 1.0, size=m)
        c = rng.normal(size=n) + 2.5  # keep bounded below on x >= 0 mostly
        c = np.abs(c)
        res = solve_lp(LinearProgram(c=c, A_ub=A, b_ub=b, lo=np.zeros(n)))
        assert res.optimal
        x = res.x
        assert np.all(A @ x <= b + 1e-7)
        assert np.all(x >= -1e-9)
        y = res.duals_ub
        # min problem with <= rows: row multipliers are <= 0 in this convention
        assert np.all(y <= 1e-9)
        # dual feasibility and complementary slackness
        red = c + A.T @ (-y) - A.T @ (0 * y)  # reduced costs c - A'y with y<=0
        red = c - A.T @ y
        assert np.all(red >= -1e-7)
        cs_rows = y * (b - A @ x)
        assert np.max(np.abs(cs_rows)) < 1e-7
        cs_cols = x * red
        assert np.max(np.abs(cs_cols)) < 1e-6
        # strong duality
        assert res.objective == pytest.approx(float(y @ b), abs=1e-6)


# ---------------------------------------------------------------------------
# Box QP


def test_boxqp_boundary_and_interior():
    qp = BoxQP(Q=[[2.0]], c=[-4.0], lo=[0.0], hi=[1.0])
    assert solve_box_qp(qp)[0] == pytest.approx(1.0, abs=1e-9)
    qp = BoxQP(Q=[[2.0]], c=[-4.0], lo=[0.0], hi=[5.0])
    assert solve_box_qp(qp)[0] == pytest.approx(2.0, abs=1e-9)


def test_boxqp_separable_matches_clamp():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = rng.integers(2, 8)
        q = rng.uniform(0.5, 4.0, size=n)
        c = rng.normal(size=n) * 3
        lo = rng.uniform(-2, 0, size=n)
        hi = lo + rng.uniform(0.5, 3, size=n)
        x = solve_box_qp(BoxQP(Q=np.diag(q), c=c, lo=lo, hi=hi), tol=1e-12)
        oracle = np.clip(-c / q, lo, hi)
        assert np.max(np.abs(x - oracle)) < 1e-10


def test_boxqp_unique_from_random_starts():
    rng = np.random.default_rng(9)
    M = rng.normal(size=(4, 4))
    Q = M @ M.T + 0.5 * np.eye(4)
    qp = BoxQP(Q=Q, c=rng.normal(size=4), lo=np.zeros(4), hi=np.ones(4))
    x1 = solve_box_qp(qp, tol=1e-11, x0=rng.normal(size=4))
    x2 = solve_box_qp(qp, tol=1e-11, x0=rng.normal(size=4))
    assert np.max(np.abs(x1 - x2)) < 1e-8


def test_boxqp_affine_constraint():
    # min ||x - (2,2)||^2 s.t. x >= 0, x1 + x2 <= 2 -> (1,1)
    qp = BoxQP(Q=2 * np.eye(2), c=[-4.0, -4.0], lo=[0, 0],
               A_ub=[[1.0, 1.0]], b_ub=[2.0])
    x = solve_box_qp(qp, tol=1e-10)
    assert np.allclose(x, [1.0, 1.0], atol=1e-7)


def test_boxqp_rejects_indefinite():
    with pytest.raises(InputError):
        BoxQP(Q=[[-1.0]], c=[0.0])


# ---------------------------------------------------------------------------
# bisection


def test_bisect_linear_and_cubic():
    assert bisect(lambda x: x - 1.0, 0.0, 2.0, tol=1e-12) == pytest.approx(1.0, abs=1e-10)
    assert bisect(lambda x: x**3 - 8.0, 0.0, 3.0, tol=1e-12) == pytest.approx(2.0, abs=1e-10)


def test_bisect_iteration_bound():
    calls = []

    def f(x):
        calls.append(x)
        return x - 0.3333

    tol = 1e-6
    root = bisect(f, 0.0, 1.0, tol=tol)
    assert abs(root - 0.3333) <= tol
    assert len(calls) <= int(np.ceil(np.log2(1.0 / tol))) + 3


def test_bisect_requires_bracket():
    with pytest.raises(InputError):
        bisect(lambda x: x + 1.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# projections / fista / quadrature


def test_dykstra_matches_qp_projection():
    rng = np.random.default_rng(17)
    for _ in range(10):
        z = rng.normal(size=3) * 2
        A = rng.normal(size=(2, 3))
        b = rng.uniform(0.5, 1.5, size=2)
        proj = make_polyhedron_projection(lo=np.zeros(3), A_ub=A, b_ub=b,
                                          tol=1e-14, max_iter=5000)
        x = proj(z)
        # oracle: projection as a box QP  min ||x - z||^2
        oracle = solve_box_qp(BoxQP(Q=2 * np.eye(3), c=-2 * z, lo=np.zeros(3),
                                    A_ub=A, b_ub=b), tol=1e-12)
        assert np.max(np.abs(x - oracle)) < 1e-6


def test_fista_quadratic():
    Q = np.diag([1.0, 10.0])
    c = np.array([-1.0, -5.0])
    grad = lambda x: Q @ x + c
    x, res = fista(grad, lambda x: np.maximum(x, 0.0), np.zeros(2), lipschitz=10.0, tol=1e-10)
    assert np.allclose(x, [1.0, 0.5], atol=1e-7)


def test_adaptive_quad_polynomial():
    assert adaptive_quad(lambda x: x * x, 0.0, 1.0) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert adaptive_quad(lambda x: np.exp(-x), 0.0, 50.0) == pytest.approx(1.0, abs=1e-9)
