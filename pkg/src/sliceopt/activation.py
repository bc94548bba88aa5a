"""Long time-scale sparse slice activation.

The mixed-binary activation problem is relaxed: the activation-count cost is
replaced by a differentiable lq-norm (0 < q < 1) whose concave value is
successively majorized by a locally tight quadratic, and the outage terms
(nonconvex in the transmission resources) are convexified by proximal
anchoring.  Each surrogate is minimized with a Frank-Wolfe loop whose
direction-finding subproblem is a dense LP; an outer loop adds a growing
binary-promotion weight until the relaxed indicators are (numerically)
binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import ScenarioError
from .solvers import LinearProgram, NumericalError, PreparedPolytope, solve_lp
from .stochastics import (
    RayleighCapacityChannel,
    expected_revenue_batch,
    demand_cdf_batch,
    outage_batch,
    outage_dt_batch,
    rayleigh_cdf_vec,
    rayleigh_outage_dt_vec,
    rayleigh_outage_vec,
)

_T_FLOOR = 1e-12  # outage terms are evaluated in the t -> 0+ limit below this


@dataclass
class ActivationParams:
    q: float = 0.1
    eps: float = 0.05
    c_a: float = 1000.0
    e: float = 1e-2  # curvature of the lq quadratic bound
    zeta: float = 1.0  # proximal weight on t, doubled if the anchored objective rises
    # big-M override; by default a per-slice reachable-reservation bound is
    # used, computed from path bottlenecks and AP capacities and then
    # tightened to psi_margin times the slice's untaxed reservation (from an
    # all-active presolve).  The indicator floor x1 >= E[r]/Psi only carries
    # activation information when Psi sits at the per-slice achievable scale;
    # a network-wide constant drives every x1 to ~0 and the binary promotion
    # then deactivates everything.
    psi_big: float = None
    psi_margin: float = 1.6
    warmup: int = 3  # outer iterations before the binary-promotion weight turns on
    gamma0: float = 10.0
    gamma_growth: float = 2.0
    fw_tol: float = 1e-4
    fw_gap_tol: float = 1e-3
    # plateau rule: stop when the surrogate objective drops by less than
    # fw_plateau_tol * (1 + |obj|) over the last fw_stall_window iterations
    fw_plateau_tol: float = 1e-3
    fw_stall_window: int = 16
    fw_max_iter: int = 180
    anchor_tol: float = 1e-4
    anchor_max_iter: int = 25
    binary_tol: float = 1e-3
    outer_max_iter: int = 90
    quad_nodes: int = 96


def lq_majorizer(x1, x_ref, q, eps, e):
    """Locally tight quadratic upper bound of ||x + eps*1||_q^q at x_ref.

    Returns (value, gradient); at x1 == x_ref the value and gradient coincide
    with those of the lq term itself.
    """
    x1 = np.asarray(x1, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    base = np.sum((x_ref + eps) ** q)
    lin = q * (x_ref + eps) ** (q - 1.0)
    diff = x1 - x_ref
    value = base + lin @ diff + 0.5 * e * diff @ diff
    grad = lin + e * diff
    return float(value), grad


class ActivationProblem:
    """Assembled long-time-scale instance: index maps, affine rows, objective.

    Variables are ordered [r per (user, path) | t per (user, downlink) |
    x1 per slice | x2 per slice].  Scenario expectations enter as per-user
    presence weights, which turns every expected constraint into an affine
    row over the same variables.
    """

    def __init__(self, topo, slices, tenants, demands, channels, phi, params=None):
        self.topo = topo
        self.slices = list(slices)
        self.tenants = list(tenants)
        self.phi = phi
        self.params = params or ActivationParams()

        slice_by_id = {s.id: s for s in self.slices}
        tenant_of_slice = {}
        psi_of_tenant = {t.id: t.psi for t in self.tenants}
        for t in self.tenants:
            for sid in t.slices:
                tenant_of_slice[sid] = t.id

        # presence weights; users absent from every scenario are dropped
        self.weight = {}
        self.slice_of_user = {}
        for s in self.slices:
            for k, w in s.presence_weights().items():
                if w <= 0:
                    continue
                if k not in topo.users:
                    raise ScenarioError(f"slice {s.id!r} references unknown user {k!r}")
                self.weight[k] = w
                self.slice_of_user[k] = s.id

        self.users = sorted(self.weight)
        self.user_index = {k: i for i, k in enumerate(self.users)}
        self.demands = [demands[k] for k in self.users]

        self.r_keys = []
        self.t_keys = []
        for k in self.users:
            u = topo.users[k]
            for p in u.paths:
                self.r_keys.append((k, p.id))
            for w in u.downlinks:
                self.t_keys.append((k, w.id))
        self.n_r = len(self.r_keys)
        self.n_t = len(self.t_keys)
        self.n_s = len(self.slices)
        self.n = self.n_r + self.n_t + 2 * self.n_s
        self.ir = {key: i for i, key in enumerate(self.r_keys)}
        self.it = {key: self.n_r + i for i, key in enumerate(self.t_keys)}
        self.slice_index = {s.id: i for i, s in enumerate(self.slices)}

        self.user_of_r = np.array([self.user_index[k] for k, _ in self.r_keys], dtype=int)
        self.dl_of_r = np.empty(self.n_r, dtype=int)
        t_pos = {key: i for i, key in enumerate(self.t_keys)}
        for i, (k, pid) in enumerate(self.r_keys):
            path = topo.path(k, pid)
            self.dl_of_r[i] = t_pos[(k, path.downlink)]
        self.user_of_t = np.array([self.user_index[k] for k, _ in self.t_keys], dtype=int)

        def per_user(fn):
            return np.array([fn(k) for k in self.users])

        self.w_user = per_user(lambda k: self.weight[k])
        self.psi_user = per_user(lambda k: psi_of_tenant[tenant_of_slice[self.slice_of_user[k]]])
        self.theta_user = per_user(lambda k: slice_by_id[self.slice_of_user[k]].theta)
        self.w_t = self.w_user[self.user_of_t]
        self.psi_t = self.psi_user[self.user_of_t]
        self.theta_t = self.theta_user[self.user_of_t]
        self.zeta_t = np.full(self.n_t, self.params.zeta)

        self.channels = [channels[key] for key in self.t_keys]
        if all(isinstance(c, RayleighCapacityChannel) for c in self.channels):
            self.snr_t = np.array([c.avg_snr for c in self.channels])
        else:
            self.snr_t = None

        self._psi_bounds()
        self._build_rows()

    def _psi_bounds(self):
        """Per-slice reachable-reservation bounds used as the coupling big-M."""
        topo = self.topo
        self.psi_rate = {}
        self.psi_band = {}
        for s in self.slices:
            rate = 0.0
            band = 0.0
            for k in s.users:
                w = self.weight.get(k, 0.0)
                if w <= 0:
                    continue
                u = topo.users[k]
                rate += w * sum(
                    min(topo.link_by_id[lid].capacity for lid in pt.links) for pt in u.paths
                )
                band += w * sum(topo.ap_by_id[dl.ap].capacity for dl in u.downlinks)
            if self.params.psi_big is not None:
                rate = band = self.params.psi_big
            self.psi_rate[s.id] = max(1.25 * rate, 2.0 * s.min_rate, 1.0)
            self.psi_band[s.id] = max(1.25 * band, 2.0 * s.min_bandwidth, 1.0)

    def recalibrate_psi(self, slice_rates, slice_bands):
        """Tighten the coupling bounds to the untaxed per-slice reservations."""
        kappa = self.params.psi_margin
        for s in self.slices:
            self.psi_rate[s.id] = max(
                kappa * slice_rates.get(s.id, 0.0), 2.0 * s.min_rate, 1e-6
            )
            self.psi_band[s.id] = max(
                kappa * slice_bands.get(s.id, 0.0), 2.0 * s.min_bandwidth, 1e-6
            )
        self._build_rows()

    # -- affine rows --------------------------------------------------------

    def _build_rows(self):
        topo = self.topo
        n = self.n
        rows, rhs, labels = [], [], []

        link_rows = {lid: np.zeros(n) for lid in topo.link_ids}
        for i, (k, pid) in enumerate(self.r_keys):
            for lid in topo.path(k, pid).links:
                link_rows[lid][i] += self.weight[k]
        for lid in topo.link_ids:
            rows.append(link_rows[lid])
            rhs.append(topo.link_by_id[lid].capacity)
            labels.append(("link", lid))

        ap_rows = {aid: np.zeros(n) for aid in topo.ap_ids}
        for i, (k, wid) in enumerate(self.t_keys):
            ap = topo.users[k].downlink_by_id(wid).ap
            ap_rows[ap][self.n_r + i] += self.weight[k]
        for aid in topo.ap_ids:
            rows.append(ap_rows[aid])
            rhs.append(topo.ap_by_id[aid].capacity)
            labels.append(("ap", aid))

        self.slice_r_row = {}
        self.slice_t_row = {}
        for s in self.slices:
            si = self.slice_index[s.id]
            r_row = np.zeros(n)
            t_row = np.zeros(n)
            for i, (k, _) in enumerate(self.r_keys):
                if self.slice_of_user[k] == s.id:
                    r_row[i] = self.weight[k]
            for i, (k, _) in enumerate(self.t_keys):
                if self.slice_of_user[k] == s.id:
                    t_row[self.n_r + i] = self.weight[k]
            self.slice_r_row[s.id] = r_row
            self.slice_t_row[s.id] = t_row

            x1col = self.n_r + self.n_t + si
            row = -r_row.copy()
            row[x1col] = s.min_rate
            rows.append(row)
            rhs.append(0.0)
            labels.append(("slice-min-rate", s.id))

            row = -t_row.copy()
            row[x1col] = s.min_bandwidth
            rows.append(row)
            rhs.append(0.0)
            labels.append(("slice-min-bandwidth", s.id))

            row = r_row.copy()
            row[x1col] = -self.psi_rate[s.id]
            rows.append(row)
            rhs.append(0.0)
            labels.append(("slice-cap-rate", s.id))

            row = t_row.copy()
            row[x1col] = -self.psi_band[s.id]
            rows.append(row)
            rhs.append(0.0)
            labels.append(("slice-cap-bandwidth", s.id))

        for t in self.tenants:
            r_row = np.zeros(n)
            t_row = np.zeros(n)
            for sid in t.slices:
                r_row += self.slice_r_row[sid]
                t_row += self.slice_t_row[sid]
            rows.append(-r_row)
            rhs.append(-t.min_rate)
            labels.append(("tenant-min-rate", t.id))
            rows.append(-t_row)
            rhs.append(-t.min_bandwidth)
            labels.append(("tenant-min-bandwidth", t.id))

        self.A_ub = np.array(rows) if rows else np.zeros((0, n))
        self.b_ub = np.array(rhs)
        self.row_labels = labels

        A_eq = np.zeros((self.n_s, n))
        for s in self.slices:
            si = self.slice_index[s.id]
            A_eq[si, self.n_r + self.n_t + si] = 1.0
            A_eq[si, self.n_r + self.n_t + self.n_s + si] = 1.0
        self.A_eq = A_eq
        self.b_eq = np.ones(self.n_s)

        lo = np.zeros(n)
        hi = np.full(n, np.inf)
        hi[self.n_r + self.n_t:] = 1.0
        self.lo, self.hi = lo, hi
        self._polytope = None

    def polytope(self):
        if self._polytope is None:
            self._polytope = PreparedPolytope(
                A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                lo=self.lo, hi=self.hi,
            )
        return self._polytope

    # -- views --------------------------------------------------------------

    def split(self, v):
        r = v[: self.n_r]
        t = v[self.n_r: self.n_r + self.n_t]
        x1 = v[self.n_r + self.n_t: self.n_r + self.n_t + self.n_s]
        x2 = v[self.n_r + self.n_t + self.n_s:]
        return r, t, x1, x2

    def user_rates(self, r):
        return np.bincount(self.user_of_r, weights=r, minlength=len(self.users))

    def downlink_rates(self, r):
        return np.bincount(self.dl_of_r, weights=r, minlength=self.n_t)

    # -- stochastic terms ---------------------------------------------------

    def _outage(self, Rw, t):
        t = np.maximum(t, _T_FLOOR)
        if self.snr_t is not None:
            return rayleigh_outage_vec(self.snr_t, Rw, t, self.params.quad_nodes)
        return np.array([
            float(outage_batch(self.channels[i], Rw[i], t[i], self.params.quad_nodes))
            for i in range(self.n_t)
        ])

    def _outage_dt(self, Rw, t):
        t = np.maximum(t, _T_FLOOR)
        if self.snr_t is not None:
            return rayleigh_outage_dt_vec(self.snr_t, Rw, t, self.params.quad_nodes)
        return np.array([
            float(outage_dt_batch(self.channels[i], Rw[i], t[i], self.params.quad_nodes))
            for i in range(self.n_t)
        ])

    def _cdf(self, Rw, t):
        t = np.maximum(t, _T_FLOOR)
        if self.snr_t is not None:
            return rayleigh_cdf_vec(self.snr_t, Rw, t)
        return np.array([float(self.channels[i].cdf(Rw[i], t[i])) for i in range(self.n_t)])

    # -- objective pieces ---------------------------------------------------

    def smooth_objective(self, r, t):
        """Minimization form of the smooth utility part (no activation cost)."""
        ru = self.user_rates(r)
        rev = expected_revenue_batch(self.demands, self.phi, ru, self.params.quad_nodes)
        out = self._outage(self.downlink_rates(r), t)
        return float(
            -(self.psi_user * self.w_user * rev).sum()
            + (self.psi_t * self.w_t * self.theta_t * out).sum()
        )

    def utility(self, r, t):
        """Maximization-form utility (weighted revenue minus weighted outage)."""
        return -self.smooth_objective(r, t)

    def prox_value(self, t, t_hat):
        return float(0.5 * (self.psi_t * self.w_t * self.zeta_t * (t - t_hat) ** 2).sum())

    def lq_cost_true(self, x1, x2, x_ref1, x_ref2, gamma):
        p = self.params
        val = p.c_a * np.sum((x1 + p.eps) ** p.q)
        if gamma > 0:
            val += gamma * (np.sum((x1 + p.eps) ** p.q) + np.sum((x2 + p.eps) ** p.q))
        return float(val)

    def lq_cost_bound(self, x1, x2, x_ref1, x_ref2, gamma):
        p = self.params
        v1, _ = lq_majorizer(x1, x_ref1, p.q, p.eps, p.e)
        val = p.c_a * v1
        if gamma > 0:
            b1, _ = lq_majorizer(x1, x_ref1, p.q, p.eps, p.e)
            b2, _ = lq_majorizer(x2, x_ref2, p.q, p.eps, p.e)
            val += gamma * (b1 + b2)
        return float(val)

    def surrogate_objective(self, state):
        r, t, x1, x2 = self.split(state.v)
        return (
            self.smooth_objective(r, t)
            + self.prox_value(t, state.t_hat)
            + self.lq_cost_bound(x1, x2, state.x_ref1, state.x_ref2, state.gamma)
        )

    def relaxed_objective(self, state):
        """Smooth part plus the true (un-majorized) lq costs at the state."""
        r, t, x1, x2 = self.split(state.v)
        return self.smooth_objective(r, t) + self.lq_cost_true(
            x1, x2, state.x_ref1, state.x_ref2, state.gamma
        )


@dataclass
class ActivationState:
    v: np.ndarray
    x_ref1: np.ndarray
    x_ref2: np.ndarray
    t_hat: np.ndarray
    gamma: float = 0.0
    m: int = 0
    i: int = 0


def assemble_activation_problem(topo, slices, tenants, demands, channels, phi, params=None):
    """Build the affine constraint system and objective evaluators."""
    return ActivationProblem(topo, slices, tenants, demands, channels, phi, params)


def initial_state(problem):
    """Feasible start: x1 = x2 = 0.5, (r, t) from a minimal-reservation LP."""
    n = problem.n
    c = np.zeros(n)
    c[: problem.n_r + problem.n_t] = 1.0
    A_eq = problem.A_eq
    b_eq = problem.b_eq
    # pin x1 = 0.5 with extra equality rows
    pins = np.zeros((problem.n_s, n))
    for si in range(problem.n_s):
        pins[si, problem.n_r + problem.n_t + si] = 1.0
    lp = LinearProgram(
        c=c,
        A_ub=problem.A_ub,
        b_ub=problem.b_ub,
        A_eq=np.vstack([A_eq, pins]),
        b_eq=np.concatenate([b_eq, np.full(problem.n_s, 0.5)]),
        lo=problem.lo,
        hi=problem.hi,
    )
    res = solve_lp(lp)
    if not res.optimal:
        raise ScenarioError(
            f"activation instance has no feasible start (LP status {res.status}): "
            "capacities are inconsistent with the minimum reservations"
        )
    v = res.x.copy()
    _, t, x1, x2 = problem.split(v)
    return ActivationState(
        v=v,
        x_ref1=x1.copy(),
        x_ref2=x2.copy(),
        t_hat=t.copy(),
        gamma=0.0,
    )


def direction_coefficients(problem, state):
    """Exact gradient of the surrogate objective: the LP objective of the
    direction-finding subproblem."""
    r, t, x1, x2 = problem.split(state.v)
    p = problem.params
    ru = problem.user_rates(r)
    Rw = problem.downlink_rates(r)

    # chi: outage CDF term minus marginal expected revenue, per (user, path)
    z = problem._cdf(Rw, t)
    from .stochastics import revenue_grad_batch

    rev_grad = revenue_grad_batch(problem.demands, problem.phi, ru)
    chi_dl = problem.theta_t * z
    chi = chi_dl[problem.dl_of_r] - rev_grad[problem.user_of_r]
    coef_r = problem.psi_user[problem.user_of_r] * problem.w_user[problem.user_of_r] * chi

    # omega: proximal pull plus the outage derivative in t, per (user, downlink)
    omega = problem.zeta_t * (t - state.t_hat) + problem.theta_t * problem._outage_dt(Rw, t)
    coef_t = problem.psi_t * problem.w_t * omega

    lin1 = p.q * (state.x_ref1 + p.eps) ** (p.q - 1.0)
    lin2 = p.q * (state.x_ref2 + p.eps) ** (p.q - 1.0)
    rho1 = p.c_a * (lin1 + p.e * (x1 - state.x_ref1))
    coef_x1 = rho1.copy()
    coef_x2 = np.zeros_like(rho1)
    if state.gamma > 0:
        coef_x1 += state.gamma * (lin1 + p.e * (x1 - state.x_ref1))
        coef_x2 += state.gamma * (lin2 + p.e * (x2 - state.x_ref2))
    return np.concatenate([coef_r, coef_t, coef_x1, coef_x2])


def frank_wolfe_iterate(problem, state, coefs=None):
    """One conditional-gradient step: LP direction, then v += pi (v_bar - v)."""
    if coefs is None:
        coefs = direction_coefficients(problem, state)
    res = problem.polytope().minimize(coefs)
    if not res.optimal:
        raise ScenarioError(f"direction LP is {res.status}; check capacities vs minimums")
    gap = float(coefs @ (state.v - res.x))
    pi = 2.0 / (2.0 + state.m)
    step = pi * (res.x - state.v)
    state.v = state.v + step
    state.m += 1
    return {"gap": gap, "step_inf": float(np.max(np.abs(step))), "pi": pi}


def run_frank_wolfe(problem, state, tol=None, trace=None):
    """Minimize the current surrogate: inner conditional-gradient loop inside a
    proximal-anchor refresh loop, until the t anchor stops moving.

    Returns run statistics including the largest inner iteration count, which
    the acceptance suite audits against the documented budgets.
    """
    p = problem.params
    tol = p.fw_tol if tol is None else tol
    stats = {"fw_iters_max": 0, "anchor_loops": 0}
    state.m = 0
    moves = []
    for outer in range(p.anchor_max_iter):
        t_cur = problem.split(state.v)[1]
        state.t_hat = t_cur.copy()
        stats["anchor_loops"] = outer + 1

        iters = 0
        window = []
        for _ in range(p.fw_max_iter):
            info = frank_wolfe_iterate(problem, state)
            iters += 1
            scale = 1.0 + float(np.max(np.abs(state.v)))
            obj = problem.surrogate_objective(state)
            window.append(obj)
            if trace is not None:
                r, t, x1, x2 = problem.split(state.v)
                trace.append(
                    {
                        "outer": state.i,
                        "anchor": outer,
                        "m": state.m,
                        "objective": obj,
                        "gap": info["gap"],
                        "step_inf": info["step_inf"],
                        "fractional": int(np.sum(np.minimum(x1, 1 - x1) > p.binary_tol)),
                    }
                )
            plateau = (
                len(window) > p.fw_stall_window
                and window[-p.fw_stall_window - 1] - obj <= p.fw_plateau_tol * (1.0 + abs(obj))
            )
            if (
                info["step_inf"] <= tol * scale
                or info["gap"] <= p.fw_gap_tol * (1.0 + abs(obj))
                or plateau
            ):
                break
        else:
            # inexact surrogate minimization: accept the truncated solve and
            # let the outer loops (and the acceptance ratios) judge quality
            stats["fw_truncated"] = stats.get("fw_truncated", 0) + 1
        stats["fw_iters_max"] = max(stats["fw_iters_max"], iters)

        new_t = problem.split(state.v)[1]
        anchor_move = float(np.max(np.abs(new_t - state.t_hat)))
        moves.append(anchor_move)
        # adaptive proximal weight: the anchored surrogate must not worsen the
        # smooth objective through the t block alone; double zeta when it does
        r_cur = problem.split(state.v)[0]
        at_new = problem.smooth_objective(r_cur, new_t)
        at_anchor = problem.smooth_objective(r_cur, state.t_hat)
        if at_new > at_anchor + 1e-9 * (1.0 + abs(at_anchor)):
            problem.zeta_t = np.minimum(problem.zeta_t * 2.0, problem.params.zeta * 2.0**6)
        if anchor_move <= p.anchor_tol * (1.0 + float(np.max(np.abs(state.t_hat)))):
            return stats
        # anchor moves bounded below by the truncation noise of the inner
        # solves: accept once they stop contracting
        if len(moves) >= 3 and anchor_move >= 0.9 * min(moves[-3:-1]):
            return stats
    raise NumericalError("proximal anchor loop did not converge", residual=anchor_move)


def solve_activation(problem, trace=None, collect_stats=None):
    """Binary activation by successive majorization with binary promotion.

    Runs the surrogate minimization to convergence, refreshes the lq anchor,
    turns on (and grows) the binary-promotion weight after the warmup, and
    stops once every relaxed indicator is within the binary tolerance of
    {0, 1}.  The returned allocation comes from a final solve with the chosen
    pattern fixed, so the exact-binary constraints hold exactly.
    """
    p = problem.params
    if p.psi_big is None:
        # presolve: untaxed all-active solve calibrates the per-slice bounds so
        # the relaxed indicators sit near 1 for slices that keep their value
        warm = solve_inner_fixed_pattern(problem, np.ones(problem.n_s, dtype=bool))
        if warm is not None:
            r0, t0, _ = warm
            v0 = np.zeros(problem.n)
            v0[: problem.n_r] = r0
            v0[problem.n_r: problem.n_r + problem.n_t] = t0
            rates = {s.id: float(problem.slice_r_row[s.id] @ v0) for s in problem.slices}
            bands = {s.id: float(problem.slice_t_row[s.id] @ v0) for s in problem.slices}
            problem.recalibrate_psi(rates, bands)
    state = initial_state(problem)
    stats = {"outer_iters": 0, "fw_iters_max": 0, "anchor_loops_max": 0}
    for i in range(p.outer_max_iter):
        run = run_frank_wolfe(problem, state, trace=trace)
        stats["fw_iters_max"] = max(stats["fw_iters_max"], run["fw_iters_max"])
        stats["anchor_loops_max"] = max(stats["anchor_loops_max"], run["anchor_loops"])
        stats["outer_iters"] = i + 1

        r, t, x1, x2 = problem.split(state.v)
        state.x_ref1 = x1.copy()
        state.x_ref2 = x2.copy()
        state.i = i + 1
        if np.all(np.minimum(x1, 1.0 - x1) <= p.binary_tol) and np.all(
            np.minimum(x2, 1.0 - x2) <= p.binary_tol
        ):
            active, r_fin, t_fin, util = _round_and_polish(problem, x1 > 0.5)
            if collect_stats is not None:
                collect_stats.update(stats)
            return {
                "active": active,
                "x1": np.where(active, 1.0, 0.0),
                "r": r_fin,
                "t": t_fin,
                "utility": util,
                "objective": util - p.c_a * float(np.sum(active)),
                "stats": stats,
            }
        if state.i > p.warmup:
            state.gamma = p.gamma0 if state.gamma == 0.0 else state.gamma * p.gamma_growth
    frac = np.minimum(x1, 1.0 - x1)
    raise NumericalError(
        f"binary promotion did not converge; fractional coordinates at {np.where(frac > p.binary_tol)[0]}",
        residual=float(frac.max()),
    )


def _round_and_polish(problem, active):
    """Rounding step of the binary promotion: fix the pattern, re-solve, and
    accept single-slice flips while they improve the net objective.

    The relaxation settles borderline slices by thin margins; checking the
    one-flip neighbourhood removes the marginal-contribution mistakes without
    touching the relaxation path itself.
    """
    p = problem.params
    active = active.copy()
    cache = {}

    def net(pattern):
        key = tuple(pattern.tolist())
        if key not in cache:
            out = solve_inner_fixed_pattern(problem, pattern)
            cache[key] = None if out is None else (out, out[2] - p.c_a * float(np.sum(pattern)))
        return cache[key]

    def neighbours(pattern):
        for si in range(problem.n_s):
            alt = pattern.copy()
            alt[si] = ~alt[si]
            yield alt
        for si in range(problem.n_s):
            if not pattern[si]:
                continue
            for sj in range(problem.n_s):
                if pattern[sj]:
                    continue
                alt = pattern.copy()
                alt[si], alt[sj] = False, True
                yield alt

    cur = net(active)
    if cur is None:
        # fall back to the nearest feasible neighbour before giving up
        for alt in neighbours(active):
            cur = net(alt)
            if cur is not None:
                active = alt
                break
        if cur is None:
            raise NumericalError("rounded activation pattern is infeasible")
    best_out, best_obj = cur
    for _ in range(2 * problem.n_s + 2):
        improved = False
        for alt in neighbours(active):
            out = net(alt)
            if out is not None and out[1] > best_obj + 1e-9 * (1.0 + abs(best_obj)):
                active, (best_out, best_obj) = alt, out
                improved = True
                break
        if not improved:
            break
    r_fin, t_fin, util = best_out
    return active, r_fin, t_fin, util


def solve_inner_fixed_pattern(problem, active, tol_scale=1.0):
    """Convex-in-r solve of the activation problem with the binary pattern fixed.

    Deactivated slices contribute zero reservations; the outage nonconvexity in
    t is handled by the same proximal anchoring, iterated to convergence.
    Returns (r, t, utility) or None when the pattern is infeasible.
    """
    p = problem.params
    n = problem.n
    keep = np.ones(n, dtype=bool)
    x_fix = np.zeros(2 * problem.n_s)
    for s in problem.slices:
        si = problem.slice_index[s.id]
        x_fix[si] = 1.0 if active[si] else 0.0
        x_fix[problem.n_s + si] = 0.0 if active[si] else 1.0
        if not active[si]:
            for i, (k, _) in enumerate(problem.r_keys):
                if problem.slice_of_user[k] == s.id:
                    keep[i] = False
            for i, (k, _) in enumerate(problem.t_keys):
                if problem.slice_of_user[k] == s.id:
                    keep[problem.n_r + i] = False
    keep[problem.n_r + problem.n_t:] = False  # x columns are fixed

    xs = np.zeros(n)
    xs[problem.n_r + problem.n_t:] = x_fix
    b_shift = problem.b_ub - problem.A_ub @ xs
    A_sub = problem.A_ub[:, keep]
    vacuous = np.all(A_sub == 0, axis=1)
    if np.any(vacuous & (b_shift < -1e-9)):
        return None  # a row with every variable fixed is violated outright
    A_sub = A_sub[~vacuous]
    b_sub = b_shift[~vacuous]
    nsub = int(keep.sum())

    poly = PreparedPolytope(A_ub=A_sub, b_ub=b_sub, lo=np.zeros(nsub), n=nsub)
    if not poly.feasible:
        return None
    feas = poly.minimize(np.ones(nsub))
    if not feas.optimal:
        return None

    keep_r = np.where(keep[: problem.n_r])[0]
    keep_t = np.where(keep[problem.n_r: problem.n_r + problem.n_t])[0]
    sub_of_full = np.concatenate([keep_r, problem.n_r + keep_t])

    def expand(vsub):
        full = np.zeros(n)
        full[sub_of_full] = vsub
        r, t, _, _ = problem.split(full)
        return r, t

    from .stochastics import revenue_grad_batch

    fw_tol = p.fw_tol * tol_scale
    anchor_tol = p.anchor_tol * tol_scale
    boost = 2 if tol_scale < 1.0 else 1  # extra budget for the tighter oracle solves
    zeta = np.full(problem.n_t, p.zeta)  # fresh proximal weights for this solve
    v = feas.x.copy()
    t_hat = expand(v)[1].copy()
    moves = []
    for _ in range(p.anchor_max_iter * boost):
        m = 0
        window = []
        for it in range(p.fw_max_iter * boost):
            r, t = expand(v)
            ru = problem.user_rates(r)
            Rw = problem.downlink_rates(r)
            z = problem._cdf(Rw, t)
            rev_grad = revenue_grad_batch(problem.demands, problem.phi, ru)
            chi = problem.theta_t[problem.dl_of_r] * z[problem.dl_of_r] - rev_grad[problem.user_of_r]
            coef_r = problem.psi_user[problem.user_of_r] * problem.w_user[problem.user_of_r] * chi
            omega = zeta * (t - t_hat) + problem.theta_t * problem._outage_dt(Rw, t)
            coef_t = problem.psi_t * problem.w_t * omega
            coefs = np.concatenate([coef_r[keep_r], coef_t[keep_t]])
            res = poly.minimize(coefs)
            if not res.optimal:
                return None
            gap = float(coefs @ (v - res.x))
            pi = 2.0 / (2.0 + m)
            step = pi * (res.x - v)
            v = v + step
            m += 1
            r, t = expand(v)
            obj = problem.smooth_objective(r, t) + 0.5 * float(
                (problem.psi_t * problem.w_t * zeta * (t - t_hat) ** 2).sum()
            )
            window.append(obj)
            win = boost * p.fw_stall_window
            plateau = (
                len(window) > win
                and window[-win - 1] - obj <= p.fw_plateau_tol * tol_scale * (1.0 + abs(obj))
            )
            scale = 1.0 + float(np.max(np.abs(v), initial=0.0))
            if (
                float(np.max(np.abs(step), initial=0.0)) <= fw_tol * scale
                or gap <= p.fw_gap_tol * tol_scale * (1.0 + abs(obj))
                or plateau
            ):
                break
        r_new, t_new = expand(v)
        move = float(np.max(np.abs(t_new - t_hat), initial=0.0))
        moves.append(move)
        if problem.smooth_objective(r_new, t_new) > problem.smooth_objective(r_new, t_hat) + 1e-9:
            zeta = np.minimum(zeta * 2.0, p.zeta * 2.0**6)
        t_hat = t_new.copy()
        if move <= anchor_tol * (1.0 + float(np.max(np.abs(t_hat), initial=0.0))):
            break
        if len(moves) >= 4 and move >= 0.9 * min(moves[-4:-1]):
            break
    r_fin, t_fin = expand(v)
    return r_fin, t_fin, problem.utility(r_fin, t_fin)
