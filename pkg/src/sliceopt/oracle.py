"""Independent brute-force and reference solvers for desk-scale certification.

The exhaustive activation search enumerates binary patterns directly (with a
sound standalone-utility pruning bound), the Monte-Carlo estimator checks the
quadrature-based expectation functionals, and the reference convex solver is a
projected-gradient method used to certify the distributed algorithms.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .activation import solve_inner_fixed_pattern
from .solvers import InputError, NumericalError, fista, make_polyhedron_projection


@dataclass
class OracleResult:
    objective: float
    argument: object
    method: str
    runtime: float


def exhaustive_activation(problem, tol_scale=0.1, max_slices=12):
    """Best binary activation pattern by enumeration.

    Every pattern's inner problem is solved with the same proximal-anchored
    machinery as the main algorithm, at a tolerance `tol_scale` times tighter.
    Patterns whose standalone-utility bound cannot beat the incumbent are
    skipped; enumeration order prefers lower slice indices on ties.
    """
    S = problem.n_s
    if S > max_slices:
        raise InputError(f"exhaustive search limited to {max_slices} slices (got {S})")
    t0 = time.time()
    c_a = problem.params.c_a

    standalone = np.full(S, np.inf)
    for si in range(S):
        pattern = np.zeros(S, dtype=bool)
        pattern[si] = True
        out = solve_inner_fixed_pattern(problem, pattern, tol_scale)
        if out is not None:
            standalone[si] = out[2]

    best_obj = -np.inf
    best = None
    for bits in itertools.product([True, False], repeat=S):
        pattern = np.array(bits)
        bound = float(np.sum(np.where(pattern, standalone, 0.0))) - c_a * float(pattern.sum())
        # margin absorbs the truncation error of the standalone solves
        if np.isfinite(bound) and bound + 0.1 * abs(bound) + 1.0 <= best_obj:
            continue
        out = solve_inner_fixed_pattern(problem, pattern, tol_scale)
        if out is None:
            continue
        r, t, util = out
        obj = util - c_a * float(pattern.sum())
        if obj > best_obj + 1e-9 * (1.0 + abs(obj)):
            best_obj = obj
            best = {"active": pattern, "r": r, "t": t, "utility": util}
    if best is None:
        raise NumericalError("no feasible activation pattern exists")
    return OracleResult(best_obj, best, "exhaustive", time.time() - t0)


def monte_carlo_expectation(sampler, n_samples, seed=0):
    """Unbiased sample mean with standard error; deterministic under the seed.

    `sampler(rng, n)` must return n draws of the quantity.
    """
    if n_samples < 10**3:
        raise InputError("use at least 1e3 samples")
    rng = np.random.default_rng(seed)
    t0 = time.time()
    draws = np.asarray(sampler(rng, n_samples), dtype=float)
    est = float(draws.mean())
    stderr = float(draws.std(ddof=1) / np.sqrt(n_samples)) if draws.std() > 0 else 0.0
    return OracleResult(est, {"stderr": stderr, "n": n_samples}, "monte-carlo", time.time() - t0)


def reference_convex_solve(grad, x0, lipschitz, lo=None, hi=None, A_ub=None, b_ub=None,
                           tol=1e-9, max_iter=200000, f=None):
    """Dense projected-gradient reference for convex problems over polyhedra.

    Certifies the distributed solvers: returns the point with projected-
    gradient residual <= tol (scaled by the step), or raises with the residual.
    """
    t0 = time.time()
    project = make_polyhedron_projection(lo, hi, A_ub, b_ub, tol=1e-13, max_iter=4000)
    x, res = fista(grad, project, x0, lipschitz, tol=tol, max_iter=max_iter, f=f)
    if res > 10 * tol:
        raise NumericalError("reference solve did not reach tolerance", residual=res, estimate=x)
    obj = float(f(x)) if f is not None else np.nan
    return OracleResult(obj, x, "projected-gradient", time.time() - t0)


def slsqp_reference(objective, x0, bounds=None, constraints=(), tol=1e-10, restarts=()):
    """SLSQP reference for smooth problems with nonlinear constraints.

    Used where the feasible set is not polyhedral (QoS-constrained solves).
    Multiple starts are tried and the best feasible result kept.
    """
    t0 = time.time()
    best = None
    for start in (x0, *restarts):
        res = minimize(objective, np.asarray(start, dtype=float), method="SLSQP",
                       bounds=bounds, constraints=constraints,
                       options={"maxiter": 500, "ftol": tol})
        if not res.success:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise NumericalError("SLSQP reference failed from every start")
    return OracleResult(float(best.fun), best.x, "slsqp", time.time() - t0)
