"""Generic numerical kernels: dense LP, box-constrained QP, bisection, quadrature.

Everything here is reentrant and stateless; callers may run many instances in
parallel.  The LP solver is a dense two-phase simplex with Bland's rule, exact
at vertices, which is all the direction-finding subproblems of this package
need at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate


class InputError(ValueError):
    """Invalid solver input (no bracket, inconsistent dimensions, bad bounds)."""


class NumericalError(RuntimeError):
    """Iteration budget or tolerance failure; carries the achieved residual."""

    def __init__(self, message, residual=None, estimate=None):
        super().__init__(message)
        self.residual = residual
        self.estimate = estimate


# ---------------------------------------------------------------------------
# quadrature plumbing


def adaptive_quad(f, a, b, abs_tol=1e-9, rel_tol=1e-7):
    """Adaptive Gauss-Kronrod integral of f over [a, b].

    Raises NumericalError with the achieved estimate when the quadrature does
    not converge to the requested tolerance.
    """
    if a == b:
        return 0.0
    out = integrate.quad(f, a, b, epsabs=abs_tol, epsrel=rel_tol, limit=400, full_output=1)
    value, abserr = out[0], out[1]
    if len(out) > 3 and abserr > 10.0 * max(abs_tol, rel_tol * abs(value)):
        raise NumericalError(f"quadrature did not converge: {out[3]}", residual=abserr, estimate=value)
    return value


_GL_CACHE = {}


def gauss_legendre(n):
    """Cached Gauss-Legendre nodes/weights on [0, 1]."""
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


# ---------------------------------------------------------------------------
# linear programming


@dataclass
class LinearProgram:
    """min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lo <= x <= hi."""

    c: np.ndarray
    A_ub: np.ndarray = None
    b_ub: np.ndarray = None
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        if self.A_ub is None:
            self.A_ub = np.zeros((0, n))
            self.b_ub = np.zeros(0)
        self.A_ub = np.atleast_2d(np.asarray(self.A_ub, dtype=float))
        self.b_ub = np.atleast_1d(np.asarray(self.b_ub, dtype=float))
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))
        self.lo = np.zeros(n) if self.lo is None else np.asarray(self.lo, dtype=float)
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float)
        if self.A_ub.shape[1] != n or self.A_eq.shape[1] != n:
            raise InputError("constraint matrix width does not match objective length")
        if self.A_ub.shape[0] != self.b_ub.size or self.A_eq.shape[0] != self.b_eq.size:
            raise InputError("constraint rhs length mismatch")
        if np.any(self.lo > self.hi):
            raise InputError("lower bound exceeds upper bound")


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    status: str  # optimal | infeasible | unbounded
    duals_ub: np.ndarray = None
    duals_eq: np.ndarray = None

    @property
    def optimal(self):
        return self.status == "optimal"


def _pivot(M, basis, row, col):
    M[row] /= M[row, col]
    colv = M[:, col].copy()
    colv[row] = 0.0
    M -= np.outer(colv, M[row])
    basis[row] = col


def _bland_simplex(M, basis, ncols, allowed, tol, max_iter):
    """Run simplex to optimality on tableau M (last row = reduced costs).

    Dantzig pricing while the objective makes progress; after a degeneracy
    stall it falls back to Bland's rule (smallest eligible entering index,
    smallest basic-variable tie-break), which cannot cycle.
    """
    m = M.shape[0] - 1
    mask = allowed[:ncols]
    stall = 0
    last_obj = M[-1, -1]
    for _ in range(max_iter):
        costs = M[-1, :ncols]
        elig = mask & (costs < -tol)
        if not elig.any():
            return "optimal"
        if stall > 12:
            enter = int(np.argmax(elig))  # first eligible index (Bland)
        else:
            enter = int(np.argmin(np.where(elig, costs, 0.0)))
        col = M[:m, enter]
        rhs = M[:m, -1]
        pos = col > tol
        if not pos.any():
            return "unbounded"
        ratios = np.where(pos, rhs / np.where(pos, col, 1.0), np.inf)
        best_ratio = ratios.min()
        ties = np.where(ratios <= best_ratio + 1e-12)[0]
        leave = int(ties[np.argmin(basis[ties])]) if ties.size > 1 else int(ties[0])
        _pivot(M, basis, leave, enter)
        obj = M[-1, -1]
        if obj > last_obj + 1e-12 * (1.0 + abs(obj)):  # -objective rose => progress
            stall = 0
            last_obj = obj
        else:
            stall += 1
    raise NumericalError("simplex iteration cap exceeded", residual=float(-M[-1, :ncols].min(initial=0.0)))


class PreparedPolytope:
    """Reusable simplex state for a fixed feasible polytope.

    Phase 1 runs once at construction; every `minimize(c)` after that reprices
    the stored tableau with the new objective and resumes phase 2 from the
    previous optimal basis (the rhs never changes, so that basis stays primal
    feasible).  This is what makes the conditional-gradient loops cheap: each
    direction-finding subproblem differs from the last only in its objective.
    """

    def __init__(self, A_ub=None, b_ub=None, A_eq=None, b_eq=None, lo=None, hi=None,
                 n=None, tol=1e-9, refactor_every=50):
        if n is None:
            n = (A_ub.shape[1] if A_ub is not None else A_eq.shape[1])
        probe = LinearProgram(c=np.zeros(n), A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                              lo=lo, hi=hi)
        self.lp = probe
        self.tol = tol
        self.refactor_every = refactor_every
        self._solves = 0
        res = solve_lp(probe, tol=tol, keep_state=True)
        self.feasible = res.optimal
        self._state = getattr(res, "_state", None)

    def minimize(self, c, max_iter=None):
        """Optimal vertex for objective c over the prepared polytope."""
        if not self.feasible:
            return LPResult(np.full(self.lp.c.size, np.nan), np.nan, "infeasible")
        st = self._state
        self._solves += 1
        if self._solves % self.refactor_every == 0:
            _refactorize(st)
        M, basis, ncols, nslack, total = st["M"], st["basis"], st["ncols"], st["nslack"], st["total"]
        cfull = np.zeros(total)
        col_of = st["col_of"]
        for j, (pos, neg, _) in enumerate(col_of):
            cfull[pos] += c[j]
            if neg >= 0:
                cfull[neg] -= c[j]
        m = M.shape[0] - 1
        M[-1, :total] = cfull
        M[-1, -1] = 0.0
        cb = cfull[basis]
        nz = cb != 0.0
        if nz.any():
            M[-1] -= cb[nz] @ M[:m][nz]
        allowed = np.ones(total, dtype=bool)
        allowed[ncols + nslack:] = False
        if max_iter is None:
            max_iter = max(200 * (m + total), 1000)
        status = _bland_simplex(M, basis, total, allowed, self.tol, max_iter)
        if status == "unbounded":
            return LPResult(np.full(self.lp.c.size, np.nan), np.nan, "unbounded")
        x = _extract_x(st)
        return LPResult(x, float(np.asarray(c) @ x), "optimal")


def _extract_x(st):
    M, basis, ncols, col_of = st["M"], st["basis"], st["ncols"], st["col_of"]
    m = M.shape[0] - 1
    y = np.zeros(ncols)
    inb = basis < ncols
    y[basis[inb]] = M[:m][inb, -1]
    n = len(col_of)
    x = np.empty(n)
    for j, (pos, neg, off) in enumerate(col_of):
        x[j] = y[pos] + off - (y[neg] if neg >= 0 else 0.0)
    return x


def _refactorize(st):
    """Rebuild the tableau rows exactly from the current basis (drift control)."""
    M, basis = st["M"], st["basis"]
    m = M.shape[0] - 1
    full, b0 = st["full"], st["b0"]
    B = full[:, basis]
    try:
        rows = np.linalg.solve(B, np.hstack([full, b0[:, None]]))
    except np.linalg.LinAlgError:
        return
    M[:m, :] = rows


def solve_lp(lp, tol=1e-9, max_iter=None, keep_state=False):
    """Two-phase dense simplex.  Returns LPResult with status and duals.

    Duals follow the convention `objective = duals_ub . b_ub + duals_eq . b_eq
    + reduced costs . bounds`; duals_ub <= 0 ... sign is validated by the
    complementary-slackness tests rather than relied upon internally.
    """
    n = lp.c.size
    # shift/split variables to y >= 0
    col_of = []  # (pos_col, neg_col or -1, offset)
    ncols = 0
    for j in range(n):
        if np.isfinite(lp.lo[j]):
            col_of.append((ncols, -1, lp.lo[j]))
            ncols += 1
        else:
            col_of.append((ncols, ncols + 1, 0.0))
            ncols += 2

    def expand(A):
        out = np.zeros((A.shape[0], ncols))
        for j in range(n):
            pos, neg, _ = col_of[j]
            out[:, pos] += A[:, j]
            if neg >= 0:
                out[:, neg] -= A[:, j]
        return out

    offsets = np.array([c[2] for c in col_of])
    A_ub = expand(lp.A_ub)
    b_ub = lp.b_ub - lp.A_ub @ offsets
    A_eq = expand(lp.A_eq)
    b_eq = lp.b_eq - lp.A_eq @ offsets

    # finite upper bounds become extra <= rows
    ub_rows = []
    ub_rhs = []
    for j in range(n):
        if np.isfinite(lp.hi[j]):
            row = np.zeros(ncols)
            pos, neg, off = col_of[j]
            row[pos] = 1.0
            if neg >= 0:
                row[neg] = -1.0
            ub_rows.append(row)
            ub_rhs.append(lp.hi[j] - off)
    if ub_rows:
        A_ub = np.vstack([A_ub, np.array(ub_rows)])
        b_ub = np.concatenate([b_ub, np.array(ub_rhs)])

    c = np.zeros(ncols)
    for j in range(n):
        pos, neg, _ = col_of[j]
        c[pos] += lp.c[j]
        if neg >= 0:
            c[neg] -= lp.c[j]

    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    nslack = m_ub
    # columns: [y | slacks | artificials], rhs appended last
    A = np.zeros((m, ncols + nslack))
    A[:m_ub, :ncols] = A_ub
    A[:m_ub, ncols:ncols + nslack] = np.eye(m_ub)
    A[m_ub:, :ncols] = A_eq
    b = np.concatenate([b_ub, b_eq])

    neg = b < 0
    A[neg] *= -1.0
    b = np.abs(b)

    # rows whose slack no longer provides an identity column need artificials
    need_art = list(range(m_ub, m))
    for i in range(m_ub):
        if neg[i]:
            need_art.append(i)
    nart = len(need_art)
    full = np.hstack([A, np.zeros((m, nart))])
    art_col = {}
    for idx, i in enumerate(sorted(need_art)):
        full[i, ncols + nslack + idx] = 1.0
        art_col[i] = ncols + nslack + idx

    total = ncols + nslack + nart
    basis = np.zeros(m, dtype=int)
    for i in range(m):
        if i in art_col:
            basis[i] = art_col[i]
        else:
            basis[i] = ncols + i  # its slack

    M = np.zeros((m + 1, total + 1))
    M[:m, :total] = full
    M[:m, -1] = b

    if max_iter is None:
        max_iter = max(200 * (m + total), 1000)

    # phase 1
    if nart:
        cost1 = np.zeros(total)
        cost1[ncols + nslack:] = 1.0
        M[-1, :total] = cost1
        M[-1, -1] = 0.0
        for i in range(m):  # price out basic artificials
            if basis[i] >= ncols + nslack:
                M[-1] -= M[i]
        allowed = np.ones(total, dtype=bool)
        status = _bland_simplex(M, basis, total, allowed, tol, max_iter)
        if status != "optimal" or -M[-1, -1] > max(tol, 1e-7) * (1.0 + abs(b).max(initial=0.0)):
            return LPResult(np.full(n, np.nan), np.nan, "infeasible")
        # drive artificials out of the basis where possible
        for i in range(m):
            if basis[i] >= ncols + nslack:
                row = M[i, :ncols + nslack]
                j = np.argmax(np.abs(row))
                if abs(row[j]) > tol:
                    _pivot(M, basis, i, j)

    # phase 2
    M[-1, :] = 0.0
    M[-1, :ncols] = c
    for i in range(m):
        if M[-1, basis[i]] != 0.0:
            M[-1] -= M[-1, basis[i]] * M[i]
    allowed = np.ones(total, dtype=bool)
    allowed[ncols + nslack:] = False  # artificials may not re-enter
    status = _bland_simplex(M, basis, total, allowed, tol, max_iter)
    if status == "unbounded":
        return LPResult(np.full(n, np.nan), np.nan, "unbounded")

    y = np.zeros(ncols)
    for i in range(m):
        if basis[i] < ncols:
            y[basis[i]] = M[i, -1]
    x = np.empty(n)
    for j in range(n):
        pos, negc, off = col_of[j]
        x[j] = y[pos] + off - (y[negc] if negc >= 0 else 0.0)

    if keep_state:
        state = {
            "M": M,
            "basis": basis,
            "ncols": ncols,
            "nslack": nslack,
            "total": total,
            "col_of": col_of,
            "full": full.copy(),
            "b0": b.copy(),
        }

    # row multipliers from the final reduced-cost row over the initial identity
    duals = np.zeros(m)
    for i in range(m):
        col = art_col.get(i, ncols + i if i < m_ub else None)
        if col is not None:
            duals[i] = -M[-1, col]
    sign = np.where(neg, -1.0, 1.0)
    duals = duals * sign
    duals_ub = duals[:m_ub][: lp.b_ub.size]  # exclude bound rows
    duals_eq = duals[m_ub:]
    result = LPResult(x, float(lp.c @ x), "optimal", duals_ub=duals_ub, duals_eq=duals_eq)
    if keep_state:
        result._state = state
    return result


# ---------------------------------------------------------------------------
# projections


def project_box(x, lo, hi):
    return np.clip(x, lo, hi)


def project_halfspace(x, a, b):
    """Project onto {x : a.x <= b}."""
    v = a @ x - b
    if v <= 0:
        return x
    return x - (v / (a @ a)) * a


def dykstra(x0, projections, tol=1e-12, max_iter=2000):
    """Dykstra's alternating projection onto an intersection of convex sets.

    `projections` is a list of callables mapping a point to its projection.
    """
    x = np.asarray(x0, dtype=float).copy()
    p = [np.zeros_like(x) for _ in projections]
    for _ in range(max_iter):
        x_prev = x.copy()
        for i, proj in enumerate(projections):
            y = proj(x + p[i])
            p[i] = x + p[i] - y
            x = y
        if np.max(np.abs(x - x_prev)) <= tol * (1.0 + np.max(np.abs(x))):
            break
    return x


def make_polyhedron_projection(lo=None, hi=None, A_ub=None, b_ub=None, tol=1e-12, max_iter=2000):
    """Projection onto {lo <= x <= hi, A_ub x <= b_ub} via Dykstra."""
    projs = []
    if lo is not None or hi is not None:
        l = -np.inf if lo is None else lo
        h = np.inf if hi is None else hi
        projs.append(lambda x: np.clip(x, l, h))
    if A_ub is not None and len(A_ub):
        A_ub = np.atleast_2d(np.asarray(A_ub, dtype=float))
        b_ub = np.atleast_1d(np.asarray(b_ub, dtype=float))
        for i in range(A_ub.shape[0]):
            a, b = A_ub[i].copy(), float(b_ub[i])
            projs.append(lambda x, a=a, b=b: project_halfspace(x, a, b))
    if not projs:
        return lambda x: x
    if len(projs) == 1:
        return projs[0]
    return lambda x: dykstra(x, projs, tol=tol, max_iter=max_iter)


# ---------------------------------------------------------------------------
# box-constrained quadratic programming


@dataclass
class BoxQP:
    """min 0.5 x'Qx + c'x  s.t.  lo <= x <= hi  (+ optional A_ub x <= b_ub)."""

    Q: np.ndarray
    c: np.ndarray
    lo: np.ndarray = None
    hi: np.ndarray = None
    A_ub: np.ndarray = None
    b_ub: np.ndarray = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.size
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.ndim == 1:
            self.Q = np.diag(self.Q)
        if self.Q.shape != (n, n):
            raise InputError("Q shape mismatch")
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float)
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float)
        eigs = np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))
        if eigs.min() < -1e-10 * max(1.0, eigs.max(initial=0.0)):
            raise InputError("Q is not positive semidefinite")


def power_iteration_norm(Q, iters=100, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(Q.shape[0])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = Q @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        lam = nw
        v = w / nw
    return lam


def solve_box_qp(qp, tol=1e-10, max_iter=20000, x0=None):
    """Accelerated projected gradient with step 1/L, L from power iteration.

    Converges linearly under the documented strong-convexity precondition;
    the fixed point is certified by the projected-gradient residual
    ||x - Proj(x - grad f(x))|| <= tol.
    """
    n = qp.c.size
    Q, c = qp.Q, qp.c
    project = make_polyhedron_projection(qp.lo, qp.hi, qp.A_ub, qp.b_ub)
    L = max(power_iteration_norm(Q), 1e-12)
    x = project(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float))
    z = x.copy()
    theta = 1.0
    for it in range(max_iter):
        grad = Q @ z + c
        x_new = project(z - grad / L)
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta**2))
        z = x_new + ((theta - 1.0) / theta_new) * (x_new - x)
        # restart acceleration on objective oscillation
        if (x_new - x) @ grad > 0:
            z = x_new
            theta_new = 1.0
        x, theta = x_new, theta_new
        if it % 10 == 0 or it > max_iter - 5:
            res = np.linalg.norm(x - project(x - (Q @ x + c)))
            if res <= tol:
                return x
    res = float(np.linalg.norm(x - project(x - (Q @ x + c))))
    if res <= tol * 10:
        return x
    raise NumericalError("box QP did not reach tolerance", residual=res, estimate=x)


def fista(grad, project, x0, lipschitz, tol=1e-9, max_iter=50000, f=None):
    """Generic FISTA on smooth f with projection step; returns (x, residual).

    `grad` maps x to the gradient.  With `f` given the step size is fully
    adaptive: the local curvature estimate decays between iterations and is
    backtracked upward whenever the quadratic model fails to majorize, which
    matters for objectives whose curvature is concentrated (smoothed norms).
    """
    x = project(np.asarray(x0, dtype=float))
    z = x.copy()
    L = max(lipschitz, 1e-12)
    L_floor = L * 1e-8
    theta = 1.0
    res = np.inf
    for it in range(max_iter):
        g = grad(z)
        if f is not None:
            L = max(L * 0.8, L_floor)
            x_new = project(z - g / L)
            fz = f(z)
            for _ in range(80):
                d = x_new - z
                if f(x_new) <= fz + g @ d + 0.5 * L * (d @ d) + 1e-12 * max(1.0, abs(fz)):
                    break
                L *= 2.0
                x_new = project(z - g / L)
        else:
            x_new = project(z - g / L)
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta**2))
        z = x_new + ((theta - 1.0) / theta_new) * (x_new - x)
        if (x_new - x) @ g > 0:
            z = x_new.copy()
            theta_new = 1.0
        x, theta = x_new, theta_new
        if it % 5 == 0:
            res = np.linalg.norm(x - project(x - grad(x) / L)) * L
            if res <= tol:
                break
    return x, float(res)


# ---------------------------------------------------------------------------
# scalar bisection


def bisect(f, lo, hi, tol=1e-10, max_iter=200):
    """Root of a scalar function on [lo, hi] by bisection.

    Requires f(lo) and f(hi) to bracket a sign change; stops when the interval
    or |f| drops below tol.
    """
    if hi <= lo:
        raise InputError("bisect needs lo < hi")
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise InputError(f"no sign change on [{lo}, {hi}]: f={flo}, {fhi}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if abs(fmid) <= tol or (hi - lo) <= tol:
            return mid
        if np.sign(fmid) == np.sign(flo):
            lo, flo = mid, fmid
        else:
            hi, fhi = mid, fmid
    return 0.5 * (lo + hi)
