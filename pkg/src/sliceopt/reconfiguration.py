"""Short time-scale sparse slice reconfiguration.

The reconfiguration cost (an l0 count of changed slices) is handled by
iteratively reweighted group norms; each weighted subproblem is solved by a
two-block consensus scheme: a rate block decomposed across backhaul links
(per-link multiplier bisections with splitting weights) and a reservation
block solved by an inner consensus loop whose per-path subproblems enforce
the outage QoS constraint through a level-set tangency search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import Allocation, ScenarioError, slice_ap_reservation, slice_link_reservation
from .solvers import InputError, NumericalError, bisect, fista, make_polyhedron_projection
from .stochastics import (
    aggregate_demand,
    expected_excess_demand,
    expected_excess_demand_grad,
    expected_revenue_batch,
    outage_batch,
    rayleigh_outage_vec,
    revenue_grad_batch,
    revenue_lipschitz,
)

_T_FLOOR = 1e-12


@dataclass
class ReconfigParams:
    c_r: float = 1.0
    rho: float = 1.0
    rho11: float = 1.0
    rho12: float = 1.0
    rho13: float = 1.0  # shared-downlink copy penalty
    a10: float = 1.0
    a20: float = 1.0
    eps1: float = 1e-3
    eps2: float = 1e-3
    delta: float = None  # smoothing; defaults to 1e-3 * max(1, ||prev r||_inf)
    weight_tol: float = 1e-3
    weight_max_iter: int = 9
    outer_tol: float = 1e-4
    outer_max_iter: int = 45
    inner_tol: float = 1e-5
    inner_max_iter: int = 21
    mu_tol: float = 1e-9
    rhat_passes: int = 5
    rhat_tol: float = 1e-8
    slice_tol: float = 1e-8
    boundary_grid: int = 512
    level_tol: float = 1e-6
    changed_tol: float = 1e-3  # relative deviation below which a slice counts unchanged
    agg_samples: int = 20000
    agg_seed: int = 1234
    quad_nodes: int = 96
    residual_balance: float = 10.0
    q_safety: float = 1.1


class ReconfigProblem:
    """Assembled short-time-scale instance (fixed user sets, unit presence)."""

    def __init__(self, topo, slices, tenants, demands, channels, phi, prev_alloc,
                 params=None, aggregates=None):
        self.topo = topo
        self.slices = list(slices)
        self.tenants = list(tenants)
        self.phi = phi
        self.params = params or ReconfigParams()

        tenant_of_slice = {}
        psi_of_tenant = {t.id: t.psi for t in self.tenants}
        for t in self.tenants:
            for sid in t.slices:
                tenant_of_slice[sid] = t.id
        self.slice_index = {s.id: i for i, s in enumerate(self.slices)}

        self.users = []
        self.slice_of_user = {}
        for s in self.slices:
            for k in s.users:
                if k not in topo.users:
                    raise ScenarioError(f"slice {s.id!r} references unknown user {k!r}")
                self.users.append(k)
                self.slice_of_user[k] = s.id
        self.users = sorted(self.users)
        self.user_index = {k: i for i, k in enumerate(self.users)}
        self.demands = [demands[k] for k in self.users]

        self.r_keys = []
        self.t_keys = []
        for k in self.users:
            u = topo.users[k]
            for pt in u.paths:
                self.r_keys.append((k, pt.id))
            for w in u.downlinks:
                self.t_keys.append((k, w.id))
        self.n_r = len(self.r_keys)
        self.n_t = len(self.t_keys)
        self.ir = {key: i for i, key in enumerate(self.r_keys)}
        self.it = {key: i for i, key in enumerate(self.t_keys)}

        self.user_of_r = np.array([self.user_index[k] for k, _ in self.r_keys], dtype=int)
        t_pos = {key: i for i, key in enumerate(self.t_keys)}
        self.dl_of_r = np.empty(self.n_r, dtype=int)
        for i, (k, pid) in enumerate(self.r_keys):
            self.dl_of_r[i] = t_pos[(k, topo.path(k, pid).downlink)]
        self.user_of_t = np.array([self.user_index[k] for k, _ in self.t_keys], dtype=int)
        self.slice_of_r = np.array(
            [self.slice_index[self.slice_of_user[k]] for k, _ in self.r_keys], dtype=int
        )
        self.slice_of_t = np.array(
            [self.slice_index[self.slice_of_user[k]] for k, _ in self.t_keys], dtype=int
        )
        self.psi_user = np.array(
            [psi_of_tenant[tenant_of_slice[self.slice_of_user[k]]] for k in self.users]
        )
        self.beta_t = np.array(
            [self.slices[self.slice_of_t[i]].beta for i in range(self.n_t)]
        )
        self.channels = [channels[key] for key in self.t_keys]
        from .stochastics import RayleighCapacityChannel

        self.snr_t = (
            np.array([c.avg_snr for c in self.channels])
            if all(isinstance(c, RayleighCapacityChannel) for c in self.channels)
            else None
        )
        self.paths_of_t = [np.where(self.dl_of_r == i)[0] for i in range(self.n_t)]

        # link incidence
        self.links_of_r = []
        self.paths_on_link = {lid: [] for lid in topo.link_ids}
        for i, (k, pid) in enumerate(self.r_keys):
            lids = topo.path(k, pid).links
            self.links_of_r.append(tuple(topo.link_index[lid] for lid in lids))
            for lid in lids:
                self.paths_on_link[lid].append(i)
        self.link_paths = [np.array(self.paths_on_link[lid], dtype=int) for lid in topo.link_ids]
        self.link_caps = np.array([l.capacity for l in topo.links])

        self.ap_of_t = np.array(
            [topo.ap_index[topo.users[k].downlink_by_id(w).ap] for k, w in self.t_keys], dtype=int
        )
        self.ap_caps = np.array([a.capacity for a in topo.aps])

        # per-slice aggregation matrices (paths -> links, downlinks -> APs)
        self.M_s = {}
        self.T_s = {}
        for s in self.slices:
            si = self.slice_index[s.id]
            M = np.zeros((len(topo.links), self.n_r))
            for i in range(self.n_r):
                if self.slice_of_r[i] == si:
                    for li in self.links_of_r[i]:
                        M[li, i] = 1.0
            T = np.zeros((len(topo.aps), self.n_t))
            for i in range(self.n_t):
                if self.slice_of_t[i] == si:
                    T[self.ap_of_t[i], i] = 1.0
            self.M_s[s.id] = M
            self.T_s[s.id] = T

        # previous-period reservations
        self.prev_alloc = prev_alloc
        self.prev_r = np.array([prev_alloc.rate(k, pid) for k, pid in self.r_keys])
        self.prev_t = np.array([prev_alloc.resource(k, w) for k, w in self.t_keys])
        self.prev_r_agg = {
            s.id: slice_link_reservation(prev_alloc, s, topo) for s in self.slices
        }
        self.prev_t_agg = {s.id: slice_ap_reservation(prev_alloc, s, topo) for s in self.slices}
        if self.params.delta is None:
            self.params.delta = 1e-3 * max(1.0, float(np.max(np.abs(self.prev_r), initial=0.0)))

        # aggregate slice demand estimates (data-driven)
        if aggregates is not None:
            self.aggregates = aggregates
        else:
            self.aggregates = {}
            for s in self.slices:
                member = [demands[k] for k in s.users]
                self.aggregates[s.id] = aggregate_demand(
                    member,
                    n_samples=self.params.agg_samples,
                    seed=self.params.agg_seed + 7919 * self.slice_index[s.id],
                )

        # revenue-gradient Lipschitz bounds, per user
        self.Q_user = np.array(
            [revenue_lipschitz(d, phi, safety=self.params.q_safety) for d in self.demands]
        )
        # slice curvature count: total path count of the slice's users
        self.N_s = np.zeros(len(self.slices))
        for i in range(self.n_r):
            self.N_s[self.slice_of_r[i]] += 1.0
        self.curv_r = self.psi_user[self.user_of_r] * self.Q_user[self.user_of_r] + self.N_s[
            self.slice_of_r
        ]

        self._boundary_cache = {}

    # -- objective ----------------------------------------------------------

    def user_rates(self, r):
        return np.bincount(self.user_of_r, weights=r, minlength=len(self.users))

    def slice_rates(self, r):
        return np.bincount(self.slice_of_r, weights=r, minlength=len(self.slices))

    def downlink_rates(self, r):
        return np.bincount(self.dl_of_r, weights=r, minlength=self.n_t)

    def cost_objective(self, r):
        """Expected excess demand minus weighted expected revenue (minimized)."""
        R_s = self.slice_rates(r)
        excess = sum(
            expected_excess_demand(self.aggregates[s.id], float(R_s[self.slice_index[s.id]]))
            for s in self.slices
        )
        ru = self.user_rates(r)
        rev = expected_revenue_batch(self.demands, self.phi, ru, self.params.quad_nodes)
        return float(excess - (self.psi_user * rev).sum())

    def cost_gradient(self, r):
        R_s = self.slice_rates(r)
        gex = np.array(
            [
                expected_excess_demand_grad(self.aggregates[s.id], float(R_s[self.slice_index[s.id]]))
                for s in self.slices
            ]
        )
        ru = self.user_rates(r)
        grev = revenue_grad_batch(self.demands, self.phi, ru)
        return gex[self.slice_of_r] - (self.psi_user * grev)[self.user_of_r]

    def cost_majorizer(self, r_hat):
        """Separable quadratic upper bound of the cost around r_hat.

        Returns (h, curvature, constant): the linear coefficients equal the
        exact gradient at the anchor, the per-path curvature is
        psi_j * Q_k + sum of the slice's path counts, and the constant makes
        the bound tight at the anchor.
        """
        h = self.cost_gradient(r_hat)
        return h, self.curv_r.copy(), self.cost_objective(r_hat)

    def majorizer_value(self, r, r_hat, h=None, curv=None, const=None):
        if h is None:
            h, curv, const = self.cost_majorizer(r_hat)
        d = r - r_hat
        return float(const + h @ d + 0.5 * (curv * d * d).sum())

    # -- stochastic helpers ---------------------------------------------------

    def outage_t(self, Rw, t):
        t = np.maximum(t, _T_FLOOR)
        if self.snr_t is not None:
            return rayleigh_outage_vec(self.snr_t, Rw, t, self.params.quad_nodes)
        return np.array(
            [float(outage_batch(self.channels[i], Rw[i], t[i])) for i in range(self.n_t)]
        )

    def slice_revenue(self, r):
        ru = self.user_rates(r)
        rev = expected_revenue_batch(self.demands, self.phi, ru, self.params.quad_nodes)
        out = np.zeros(len(self.slices))
        np.add.at(out, np.array([self.slice_index[self.slice_of_user[k]] for k in self.users]),
                  self.psi_user * rev)
        return out

    def boundary_resource(self, ti, g_val, t_cap=None, tol=1e-9):
        """Smallest transmission resource satisfying the outage QoS at rate g_val."""
        return feasibility_boundary(
            self.channels[ti], float(g_val), float(self.beta_t[ti]), t_cap=t_cap, tol=tol
        )

    def boundary_cache(self, ti, o_need):
        """Boundary t = phi2(o) on a per-downlink grid, extended on demand."""
        cached = self._boundary_cache.get(ti)
        if cached is None or cached[0][-1] < o_need:
            if cached is None:
                idx = self.paths_of_t[ti]
                cap = 1.2 * sum(
                    min(self.link_caps[li] for li in self.links_of_r[i]) for i in idx
                ) + 1.0
            else:
                cap = cached[0][-1]
            o_max = max(cap, 1.5 * o_need, 1.0)
            o_grid = np.linspace(0.0, o_max, self.params.boundary_grid)
            t_vals = boundary_curve(self.channels[ti], o_grid, float(self.beta_t[ti]))
            self._boundary_cache[ti] = (o_grid, t_vals)
        return self._boundary_cache[ti]


@dataclass
class ReconfigState:
    r: np.ndarray
    g: np.ndarray
    t: np.ndarray
    o: np.ndarray
    f: np.ndarray
    tau: np.ndarray
    iota: np.ndarray
    lam: np.ndarray
    r_hat: np.ndarray
    mu: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    rho: float = 1.0
    rho11: float = 1.0
    rho12: float = 1.0


def initial_state(problem):
    p = problem.params
    r = problem.prev_r.copy()
    t = problem.prev_t.copy()
    return ReconfigState(
        r=r,
        g=r.copy(),
        t=t,
        o=r.copy(),
        f=t.copy(),
        tau=np.zeros(problem.n_r),
        iota=np.zeros(problem.n_r),
        lam=np.zeros(problem.n_t),
        r_hat=r.copy(),
        mu=np.zeros(len(problem.topo.links)),
        a1=np.full(len(problem.slices), p.a10),
        a2=np.full(len(problem.slices), p.a20),
        rho=p.rho,
        rho11=p.rho11,
        rho12=p.rho12,
    )


# ---------------------------------------------------------------------------
# group-LASSO weights and smoothed group norms


def lasso_weight_update(problem, g, t):
    """Reweighting rule: a_s = a_s0 / (deviation norm + floor)."""
    p = problem.params
    a1 = np.empty(len(problem.slices))
    a2 = np.empty(len(problem.slices))
    for s in problem.slices:
        si = problem.slice_index[s.id]
        dev_g = np.linalg.norm(problem.M_s[s.id] @ g - problem.prev_r_agg[s.id])
        dev_t = np.linalg.norm(problem.T_s[s.id] @ t - problem.prev_t_agg[s.id])
        a1[si] = p.a10 / (dev_g + p.eps1)
        a2[si] = p.a20 / (dev_t + p.eps2)
    return a1, a2


def smooth_group_norm(problem, sid, g, t, a1, a2):
    """Smoothed per-slice group deviation cost U(g_s, t_s) and its gradients.

    U = -2 delta c_r (a1 + a2) + c_r a1 sqrt(||Mg - r_prev||^2 + delta^2)
      + c_r a2 sqrt(||Tt - t_prev||^2 + delta^2); minimized exactly at the
    previous-period reservations with value -delta c_r (a1 + a2).
    """
    p = problem.params
    dg = problem.M_s[sid] @ g - problem.prev_r_agg[sid]
    dt = problem.T_s[sid] @ t - problem.prev_t_agg[sid]
    root_g = np.sqrt(dg @ dg + p.delta**2)
    root_t = np.sqrt(dt @ dt + p.delta**2)
    value = -2.0 * p.delta * p.c_r * (a1 + a2) + p.c_r * a1 * root_g + p.c_r * a2 * root_t
    grad_g = p.c_r * a1 * (problem.M_s[sid].T @ dg) / root_g
    grad_t = p.c_r * a2 * (problem.T_s[sid].T @ dt) / root_t
    return float(value), grad_g, grad_t


# ---------------------------------------------------------------------------
# rate block: per-link decomposition (distributed solver)


def per_link_closed_form(alpha, A, B, mu):
    """Stationary rates of one link's share: max(0, (alpha A - mu)/(alpha B))."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(alpha > 0, (alpha * A - mu) / (alpha * B), 0.0)
    return np.maximum(out, 0.0)


def per_link_solve(alpha, A, B, cap, tol=1e-9):
    """KKT multiplier of one link by bisection: either mu = 0 with slack or
    mu > 0 with the capacity tight (complementary slackness)."""
    live = alpha > 0
    if not np.any(live):
        return 0.0, np.zeros_like(A)
    load0 = per_link_closed_form(alpha, A, B, 0.0).sum()
    if load0 <= cap + tol:
        return 0.0, per_link_closed_form(alpha, A, B, 0.0)
    mu_hi = float(np.max(alpha[live] * A[live]))
    mu = bisect(
        lambda m: per_link_closed_form(alpha, A, B, m).sum() - cap,
        0.0,
        mu_hi + 1.0,
        tol=tol,
    )
    return float(mu), per_link_closed_form(alpha, A, B, mu)


def _consistent_rates(problem, h, curv, state):
    """Rates from the converged multipliers: r = max(0, (A - sum mu)/B)."""
    A = curv * state.r_hat + state.rho * state.g - h - state.tau
    B = state.rho + curv
    mu_paths = np.array([sum(state.mu[li] for li in problem.links_of_r[i]) for i in range(problem.n_r)])
    return np.maximum(0.0, (A - mu_paths) / B)


def solve_rate_block(problem, state, tol=None, passes=None, collect=None):
    """Distributed rate update: per-link multiplier bisections with splitting
    weights, alternated to convergence, inside an anchor-refresh loop."""
    p = problem.params
    tol = p.mu_tol if tol is None else tol
    passes = p.rhat_passes if passes is None else passes
    n_links = len(problem.link_caps)
    r_hat = state.r_hat.copy()

    mu = np.maximum(state.mu, 1e-3)  # re-examine every link at each pass
    for outer in range(passes):
        h, curv, _ = problem.cost_majorizer(r_hat)
        A = curv * r_hat + state.rho * state.g - h - state.tau
        B = state.rho + curv
        for sweep in range(200):
            max_change = 0.0
            for li in range(n_links):
                idx = problem.link_paths[li]
                if idx.size == 0:
                    mu[li] = 0.0
                    continue
                if mu[li] <= 0.0:
                    continue
                denom = np.array(
                    [sum(mu[l2] for l2 in problem.links_of_r[i]) for i in idx]
                )
                alpha = np.where(denom > 0, mu[li] / np.where(denom > 0, denom, 1.0), 0.0)
                new_mu, _ = per_link_solve(alpha, A[idx], B[idx], problem.link_caps[li], tol)
                max_change = max(max_change, abs(new_mu - mu[li]))
                mu[li] = new_mu
            if max_change <= tol * (1.0 + float(mu.max(initial=0.0))):
                break
        state.mu = mu.copy()
        r_new = _consistent_rates(problem, h, curv, state)
        move = float(np.max(np.abs(r_new - r_hat), initial=0.0))
        r_hat = r_new.copy()
        if move <= p.rhat_tol * (1.0 + float(np.max(np.abs(r_hat), initial=0.0))):
            break
    state.r_hat = r_hat
    state.r = r_new
    if collect is not None:
        collect["rate_passes"] = outer + 1
        collect["mu_sweeps"] = sweep + 1
    return state.r


# ---------------------------------------------------------------------------
# QoS feasibility boundary


def feasibility_boundary(channel, g_val, beta, t_cap=None, tol=1e-9):
    """Smallest t with expected_outage(g_val, t) <= beta * g_val.

    Returns 0 for zero rate.  Raises NumericalError when no t within `t_cap`
    is feasible (infeasible-path flag for the caller).
    """
    if g_val < 0:
        raise InputError("rate must be >= 0")
    if g_val == 0.0:
        return 0.0
    target = beta * g_val

    def slack(t):
        return float(outage_batch(channel, np.array(g_val), np.array(t))) - target

    t_hi = max(1e-3, g_val / max(beta, 1e-6) * 1e-3)
    cap = t_cap if t_cap is not None else np.inf
    for _ in range(200):
        if slack(t_hi) <= 0:
            break
        t_hi *= 2.0
        if t_hi > cap:
            raise NumericalError(
                f"no feasible transmission resource within cap {cap}", residual=slack(cap)
            )
    else:
        raise NumericalError("feasibility boundary bracketing failed")
    t_lo = _T_FLOOR
    root = bisect(slack, t_lo, t_hi, tol=tol)
    # land on the feasible side
    step = max(1e-12, 1e-9 * root)
    while slack(root) > 0:
        root += step
        step *= 2.0
    return float(root)


def boundary_curve(channel, o_grid, beta, t_cap=None):
    """Vectorized boundary: minimal feasible t for every rate in o_grid."""
    o_grid = np.asarray(o_grid, dtype=float)
    out = np.zeros_like(o_grid)
    pos = o_grid > 0
    if not np.any(pos):
        return out
    o = o_grid[pos]
    target = beta * o
    lo = np.full_like(o, _T_FLOOR)
    hi = np.full_like(o, 1e-3)
    cap = t_cap if t_cap is not None else np.inf
    for _ in range(200):
        sl = outage_batch(channel, o, hi) - target
        need = sl > 0
        if not np.any(need):
            break
        hi[need] *= 2.0
        if float(hi.max()) > max(cap, 1e6):
            raise NumericalError("boundary bracketing failed")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        sl = outage_batch(channel, o, mid) - target
        hi = np.where(sl <= 0, mid, hi)
        lo = np.where(sl <= 0, lo, mid)
        if float(np.max(hi - lo)) <= 1e-12 * (1.0 + float(hi.max())):
            break
    out[pos] = hi  # feasible side
    return out


# ---------------------------------------------------------------------------
# per-path copies: strongly convex 2-D solves with the QoS constraint


def _qos_feasible(channel, o, f, beta, tol=1e-12):
    if o <= 0:
        return True
    if f <= 0:
        return False
    return float(outage_batch(channel, np.array(o), np.array(f))) <= beta * o + tol


def solve_of_subproblem(channel, beta, o_tilde, f_tilde, rho_o, rho_f,
                        grid=512, level_tol=1e-6, t_cap=None, curve=None):
    """Minimize rho_o/2 (o - o~)^2 + rho_f/2 (f - f~)^2 over o, f >= 0 subject
    to expected_outage(o, f) <= beta o.

    If the clamped unconstrained minimizer is feasible it is returned;
    otherwise a bisection over objective level sets walks each candidate level
    against the feasibility boundary and returns the tangency point.
    """
    o0, f0 = max(0.0, o_tilde), max(0.0, f_tilde)
    if _qos_feasible(channel, o0, f0, beta):
        return o0, f0

    def objective(o, f):
        return 0.5 * rho_o * (o - o_tilde) ** 2 + 0.5 * rho_f * (f - f_tilde) ** 2

    # level-set range: from the unconstrained minimum value up to the cheapest
    # feasible boundary point on the sampled curve
    span0 = max(abs(o_tilde), abs(f_tilde), 1.0)
    if curve is None:
        o_grid = np.linspace(0.0, max(o_tilde + 3.0 * span0, 2.0 * span0), grid)
        t_bound = boundary_curve(channel, o_grid, beta, t_cap=t_cap)
    else:
        o_grid, t_bound = curve
    f_best = np.maximum(t_bound, f_tilde)  # optimal f for each o on/above the boundary
    obj_1d = 0.5 * rho_o * (o_grid - o_tilde) ** 2 + 0.5 * rho_f * (f_best - f_tilde) ** 2
    A2 = float(obj_1d.min())
    A1 = objective(o0, f0)

    def intersects(level):
        if level <= A1:
            return False
        # upper arc of the level set against the boundary
        span = np.sqrt(2.0 * level / rho_o)
        inside = np.abs(o_grid - o_tilde) <= span
        if not np.any(inside):
            return False
        o = o_grid[inside]
        f_top = f_tilde + np.sqrt(
            np.maximum(0.0, (2.0 * level - rho_o * (o - o_tilde) ** 2) / rho_f)
        )
        return bool(np.any(f_top >= t_bound[inside] - 1e-15))

    lo, hi = A1, A2
    for _ in range(200):
        if hi - lo <= level_tol * (1.0 + abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if intersects(mid):
            hi = mid
        else:
            lo = mid
    # touching point at the accepted level
    span = np.sqrt(2.0 * hi / rho_o)
    inside = np.abs(o_grid - o_tilde) <= span
    o = o_grid[inside]
    f_top = f_tilde + np.sqrt(np.maximum(0.0, (2.0 * hi - rho_o * (o - o_tilde) ** 2) / rho_f))
    gap = f_top - t_bound[inside]
    oi = int(np.argmax(gap))
    o_star = float(o[oi])
    # local refinement around the touch point (interpolated boundary), then a
    # single exact boundary evaluation pins the returned point feasible
    do = float(o_grid[1] - o_grid[0]) if o_grid.size > 1 else 1e-3
    lo_o, hi_o = max(0.0, o_star - 2 * do), o_star + 2 * do
    for _ in range(3):
        cand = np.linspace(lo_o, hi_o, 9)
        f_c = np.maximum(np.interp(cand, o_grid, t_bound), 0.0)
        f_opt = np.maximum(f_c, f_tilde)
        vals = 0.5 * rho_o * (cand - o_tilde) ** 2 + 0.5 * rho_f * (f_opt - f_tilde) ** 2
        j = int(np.argmin(vals))
        o_star = float(cand[j])
        width = (hi_o - lo_o) / 4.0
        lo_o, hi_o = max(0.0, o_star - width), o_star + width
    f_star = max(feasibility_boundary(channel, o_star, beta), f_tilde, 0.0)
    return o_star, f_star


def _solve_of_group(problem, state, ti, g_new, t_new, rho11, rho12):
    """Copy update for one downlink: plain per-path solve when the downlink is
    private, or the extra consensus layer when several paths share it."""
    p = problem.params
    idx = problem.paths_of_t[ti]
    if idx.size == 1:
        i = int(idx[0])
        o_t = g_new[i] - state.iota[i] / rho11
        f_t = t_new[ti] - state.lam[ti] / rho12
        curve = problem.boundary_cache(ti, max(0.0, o_t) + 3.0 * max(abs(o_t), abs(f_t), 1.0))
        o, f = solve_of_subproblem(
            problem.channels[ti], float(problem.beta_t[ti]), o_t, f_t, rho11, rho12,
            grid=p.boundary_grid, level_tol=p.level_tol, curve=curve,
        )
        return np.array([o]), f
    # shared downlink: dualize the aggregate-rate copy O = sum(o)
    o = np.maximum(g_new[idx] - state.iota[idx] / rho11, 0.0)
    f = max(t_new[ti] - state.lam[ti] / rho12, 0.0)
    O = float(o.sum())
    nu = 0.0
    rho13 = p.rho13
    for _ in range(60):
        # (O, f) block: level-set solve in the aggregate plane
        O_t = float(o.sum()) - nu / rho13
        f_t = t_new[ti] - state.lam[ti] / rho12
        curve = problem.boundary_cache(ti, max(0.0, O_t) + 3.0 * max(abs(O_t), abs(f_t), 1.0))
        O_new, f_new = solve_of_subproblem(
            problem.channels[ti], float(problem.beta_t[ti]), O_t, f_t, rho13, rho12,
            grid=p.boundary_grid, level_tol=p.level_tol, curve=curve,
        )
        # {o_p} block: diagonal-plus-rank-one quadratic, solved exactly with
        # nonnegativity by active-set enumeration over the zero pattern
        b = rho11 * (g_new[idx] - state.iota[idx] / rho11) + nu + rho13 * O_new
        o_new = _rank_one_qp(b, rho11, rho13, O_new, g_new[idx] - state.iota[idx] / rho11)
        nu += rho13 * (O_new - float(o_new.sum()))
        if abs(O_new - float(o_new.sum())) <= 1e-10 * (1.0 + abs(O_new)) and np.max(
            np.abs(o_new - o)
        ) <= 1e-10 * (1.0 + float(np.max(np.abs(o_new)))):
            o, f, O = o_new, f_new, O_new
            break
        o, f, O = o_new, f_new, O_new
    return o, f


def _rank_one_qp(b, rho11, rho13, O, fallback):
    """min sum rho11/2 o_p^2 - b_p o_p + rho13/2 (O - sum o)^2 ... stationarity
    gives o_p = (b_p - rho13 S)/rho11 with S = sum o; negatives are clamped by
    enumerating zero patterns (groups are tiny)."""
    n = b.size
    best = None
    for mask in range(1 << n):
        free = np.array([(mask >> j) & 1 == 0 for j in range(n)])
        if not np.any(free):
            o = np.zeros(n)
        else:
            bf = b[free]
            S = bf.sum() / (rho11 + rho13 * free.sum())
            o = np.zeros(n)
            o[free] = (bf - rho13 * S) / rho11
            if np.any(o < -1e-12):
                continue
        val = float(0.5 * rho11 * (o @ o) - b @ o + 0.5 * rho13 * (O - o.sum()) ** 2)
        if best is None or val < best[0] - 1e-15:
            best = (val, o)
    return best[1]


# ---------------------------------------------------------------------------
# reservation block: per-slice strongly convex solves


def solve_gt_subproblem(problem, state, sid, tol=None):
    """Per-slice reservation update: projected accelerated gradient on the
    smoothed group-norm plus consensus quadratics, subject to the slice's AP
    capacities and minimum-reservation rows."""
    p = problem.params
    tol = p.slice_tol if tol is None else tol
    si = problem.slice_index[sid]
    r_idx = np.where(problem.slice_of_r == si)[0]
    t_idx = np.where(problem.slice_of_t == si)[0]
    a1, a2 = state.a1[si], state.a2[si]

    # residual capacities with the other slices held fixed
    other_t = state.t.copy()
    other_t[t_idx] = 0.0
    ap_used = np.bincount(problem.ap_of_t, weights=other_t, minlength=len(problem.ap_caps))
    slc = problem.slices[si]

    # g block -----------------------------------------------------------
    M = problem.M_s[sid][:, r_idx]
    prev_agg = problem.prev_r_agg[sid]
    rho, rho11, rho12 = state.rho, state.rho11, state.rho12
    delta = p.delta

    def g_grad(gs):
        dg = M @ gs - prev_agg
        root = np.sqrt(dg @ dg + delta**2)
        return (
            rho * (gs - state.r[r_idx])
            - state.tau[r_idx]
            + rho11 * (gs - state.o[r_idx])
            - state.iota[r_idx]
            + p.c_r * a1 * (M.T @ dg) / root
        )

    def g_val(gs):
        dg = M @ gs - prev_agg
        root = np.sqrt(dg @ dg + delta**2)
        return (
            0.5 * rho * float((gs - state.r[r_idx]) @ (gs - state.r[r_idx]))
            - float(state.tau[r_idx] @ (gs - state.r[r_idx]))
            + 0.5 * rho11 * float((gs - state.o[r_idx]) @ (gs - state.o[r_idx]))
            - float(state.iota[r_idx] @ (gs - state.o[r_idx]))
            + p.c_r * a1 * float(root)
        )

    rows_g = [(-np.ones(r_idx.size), -slc.min_rate)]
    ten = next(t for t in problem.tenants if slc.id in t.slices)
    if ten.min_rate > 0:
        others = sum(
            state.g[problem.slice_of_r == problem.slice_index[s2]].sum()
            for s2 in ten.slices
            if s2 != sid
        )
        rows_g.append((-np.ones(r_idx.size), -(ten.min_rate - others)))
    A_g = np.array([row for row, _ in rows_g])
    b_g = np.array([b for _, b in rows_g])
    proj_g = make_polyhedron_projection(lo=np.zeros(r_idx.size), A_ub=A_g, b_ub=b_g,
                                        tol=1e-13, max_iter=3000)
    Lg = rho + rho11 + p.c_r * a1 * float(np.linalg.norm(M, 2)) ** 2 / delta
    gs, res_g = fista(g_grad, proj_g, state.g[r_idx], Lg, tol=tol, max_iter=5000, f=g_val)

    # t block -----------------------------------------------------------
    T = problem.T_s[sid][:, t_idx]
    prev_t_agg = problem.prev_t_agg[sid]

    def t_grad(ts):
        dt = T @ ts - prev_t_agg
        root = np.sqrt(dt @ dt + delta**2)
        return rho12 * (ts - state.f[t_idx]) - state.lam[t_idx] + p.c_r * a2 * (T.T @ dt) / root

    def t_val(ts):
        dt = T @ ts - prev_t_agg
        root = np.sqrt(dt @ dt + delta**2)
        return (
            0.5 * rho12 * float((ts - state.f[t_idx]) @ (ts - state.f[t_idx]))
            - float(state.lam[t_idx] @ (ts - state.f[t_idx]))
            + p.c_r * a2 * float(root)
        )

    rows_t = [(-np.ones(t_idx.size), -slc.min_bandwidth)]
    if ten.min_bandwidth > 0:
        others = sum(
            state.t[problem.slice_of_t == problem.slice_index[s2]].sum()
            for s2 in ten.slices
            if s2 != sid
        )
        rows_t.append((-np.ones(t_idx.size), -(ten.min_bandwidth - others)))
    for b_ap in np.unique(problem.ap_of_t[t_idx]):
        row = np.where(problem.ap_of_t[t_idx] == b_ap, 1.0, 0.0)
        # floor the residual so transient over-allocation by other slices
        # cannot make the projection region empty
        rows_t.append((row, max(problem.ap_caps[b_ap] - ap_used[b_ap], 0.0)))
    A_t = np.array([row for row, _ in rows_t])
    b_t = np.array([b for _, b in rows_t])
    proj_t = make_polyhedron_projection(lo=np.zeros(t_idx.size), A_ub=A_t, b_ub=b_t,
                                        tol=1e-13, max_iter=3000)
    Lt = rho12 + p.c_r * a2 * float(np.linalg.norm(T, 2)) ** 2 / delta
    ts, res_t = fista(t_grad, proj_t, state.t[t_idx], Lt, tol=tol, max_iter=5000, f=t_val)
    return gs, ts, max(res_g, res_t)


# ---------------------------------------------------------------------------
# inner consensus loop (reservation block)


def run_inner_admm(problem, state, tol=None, collect=None):
    """Alternate per-slice reservation solves and per-path QoS copies with dual
    ascent until the primal and dual residuals drop below tolerance."""
    p = problem.params
    tol = p.inner_tol if tol is None else tol
    # copy variables track the current blocks; the duals warm-start from the
    # previous outer iteration (they are zeroed once, at the start of a run)
    state.o = state.g.copy()
    state.f = state.t.copy()
    iters = 0
    for m in range(p.inner_max_iter):
        iters = m + 1
        g_prev = state.g.copy()
        t_prev = state.t.copy()
        # sequential slice updates: each sees the latest residual capacities
        for s in problem.slices:
            si = problem.slice_index[s.id]
            gs, ts, _ = solve_gt_subproblem(problem, state, s.id)
            state.g[problem.slice_of_r == si] = gs
            state.t[problem.slice_of_t == si] = ts
        g_new = state.g
        t_new = state.t

        o_new = state.o.copy()
        f_new = state.f.copy()
        for ti in range(problem.n_t):
            o_grp, f_val = _solve_of_group(problem, state, ti, g_new, t_new, state.rho11, state.rho12)
            o_new[problem.paths_of_t[ti]] = o_grp
            f_new[ti] = f_val
        state.o, state.f = o_new, f_new

        state.iota = state.iota + state.rho11 * (state.o - state.g)
        state.lam = state.lam + state.rho12 * (state.f - state.t)

        scale = 1.0 + max(
            float(np.max(np.abs(state.g), initial=0.0)), float(np.max(np.abs(state.t), initial=0.0))
        )
        primal = max(
            float(np.max(np.abs(state.o - state.g), initial=0.0)),
            float(np.max(np.abs(state.f - state.t), initial=0.0)),
        )
        dual = max(
            state.rho11 * float(np.max(np.abs(state.g - g_prev), initial=0.0)),
            state.rho12 * float(np.max(np.abs(state.t - t_prev), initial=0.0)),
        )
        if collect is not None:
            collect.setdefault("inner_residuals", []).append((primal, dual))
        if primal <= tol * scale and dual <= tol * scale:
            break
        # standard residual balancing, bounded around the configured values
        if primal > p.residual_balance * dual:
            state.rho11 = min(state.rho11 * 2.0, p.rho11 * 64.0)
            state.rho12 = min(state.rho12 * 2.0, p.rho12 * 64.0)
        elif dual > p.residual_balance * primal:
            state.rho11 = max(state.rho11 / 2.0, p.rho11 / 64.0)
            state.rho12 = max(state.rho12 / 2.0, p.rho12 / 64.0)
    if collect is not None:
        collect["inner_iters"] = max(collect.get("inner_iters", 0), iters)
    return state


# ---------------------------------------------------------------------------
# full reconfiguration (outer consensus + reweighting)


def reconfigure(problem, collect=None):
    """Reweighted group-sparse reconfiguration.

    Solves each weighted subproblem with the two-block consensus scheme
    (rate block by the distributed per-link solver, reservation block by the
    inner consensus loop), refreshes the group weights from the converged
    deviations, and repeats until the weights settle.  Returns the new
    reservations plus a per-slice report.
    """
    p = problem.params
    state = initial_state(problem)
    stats = {"weight_updates": 0, "outer_iters_max": 0, "inner_iters": 0}
    a_prev = (state.a1.copy(), state.a2.copy())
    for wi in range(p.weight_max_iter):
        outer_iters = 0
        rhat_prev = state.r_hat.copy()
        for pi in range(p.outer_max_iter):
            outer_iters = pi + 1
            inner_stats = {}
            solve_rate_block(problem, state, collect=inner_stats)
            run_inner_admm(problem, state, collect=inner_stats)
            stats["inner_iters"] = max(stats["inner_iters"], inner_stats.get("inner_iters", 0))
            tau_prev = state.tau.copy()
            state.tau = state.tau + state.rho * (state.r - state.g)

            scale = 1.0 + float(np.max(np.abs(state.r), initial=0.0))
            primal = float(np.max(np.abs(state.r - state.g), initial=0.0))
            dual = state.rho * float(np.max(np.abs(state.r_hat - rhat_prev), initial=0.0))
            rhat_move = float(np.max(np.abs(state.r_hat - rhat_prev), initial=0.0))
            rhat_prev = state.r_hat.copy()
            if collect is not None:
                collect.setdefault("outer_residuals", []).append((primal, dual, rhat_move))
            if primal <= p.outer_tol * scale and rhat_move <= max(
                p.outer_tol * scale, p.rhat_tol * scale * 10
            ):
                break
            if primal > p.residual_balance * max(dual, 1e-16):
                state.rho = min(state.rho * 2.0, p.rho * 64.0)
            elif dual > p.residual_balance * max(primal, 1e-16):
                state.rho = max(state.rho / 2.0, p.rho / 64.0)
        stats["outer_iters_max"] = max(stats["outer_iters_max"], outer_iters)

        a1_new, a2_new = lasso_weight_update(problem, state.g, state.t)
        rel = max(
            float(np.max(np.abs(a1_new - state.a1) / np.maximum(np.abs(state.a1), 1e-12))),
            float(np.max(np.abs(a2_new - state.a2) / np.maximum(np.abs(state.a2), 1e-12))),
        )
        stats["weight_updates"] = wi + 1
        a_prev = (state.a1.copy(), state.a2.copy())
        state.a1, state.a2 = a1_new, a2_new
        if rel <= p.weight_tol:
            break
    report = build_report(problem, state)
    report["stats"] = stats
    if collect is not None:
        collect.update(stats)
    return state, report


def build_report(problem, state):
    """Per-slice changed flags, deviation norms, revenue and excess demand."""
    rows = []
    R_s = problem.slice_rates(state.r)
    rev_s = problem.slice_revenue(state.r)
    for s in problem.slices:
        si = problem.slice_index[s.id]
        dev_g = float(np.linalg.norm(problem.M_s[s.id] @ state.g - problem.prev_r_agg[s.id]))
        dev_t = float(np.linalg.norm(problem.T_s[s.id] @ state.t - problem.prev_t_agg[s.id]))
        base_g = float(np.linalg.norm(problem.prev_r_agg[s.id]))
        base_t = float(np.linalg.norm(problem.prev_t_agg[s.id]))
        changed = (
            dev_g > problem.params.changed_tol * max(base_g, 1.0)
            or dev_t > problem.params.changed_tol * max(base_t, 1.0)
        )
        rows.append(
            {
                "slice": s.id,
                "changed": bool(changed),
                "dev_rate": dev_g,
                "dev_bandwidth": dev_t,
                "rate": float(R_s[si]),
                "bandwidth": float(state.t[problem.slice_of_t == si].sum()),
                "expected_revenue": float(rev_s[si]),
                "expected_excess": float(
                    expected_excess_demand(problem.aggregates[s.id], float(R_s[si]))
                ),
            }
        )
    return {"slices": rows}


def final_allocation(problem, state):
    r = {key: float(max(v, 0.0)) for key, v in zip(problem.r_keys, state.r)}
    t = {key: float(max(v, 0.0)) for key, v in zip(problem.t_keys, state.t)}
    return Allocation(r, t)


# ---------------------------------------------------------------------------
# QoS check


def qos_check(problem, r, t, tol=1e-9):
    """Outage-fraction constraint report per downlink (aggregating the rates
    of paths that share it)."""
    Rw = problem.downlink_rates(np.asarray(r, dtype=float))
    t = np.asarray(t, dtype=float)
    out = problem.outage_t(Rw, np.maximum(t, _T_FLOOR))
    rows = []
    for ti, key in enumerate(problem.t_keys):
        bound = problem.beta_t[ti] * Rw[ti]
        ok = (Rw[ti] == 0.0) or (out[ti] <= bound + tol)
        rows.append(
            {"downlink": key, "outage": float(out[ti]), "bound": float(bound), "ok": bool(ok)}
        )
    return rows
