"""Demand/channel distributions and the expectation functionals of both time-scales.

Expected revenue, expected downlink outage and expected excess demand are all
one-dimensional integrals against parametric or data-driven densities.  The
adaptive path goes through Gauss-Kronrod quadrature (tolerances dominate the
solver tolerances); a vectorized fixed-order path is provided for the solver
inner loops and is tested against the adaptive one.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr, ndtri

from .solvers import InputError, adaptive_quad, bisect, gauss_legendre

_SQRT2PI = math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)
_TAIL_EPS = 1e-8  # semi-infinite integrals truncated at the (1 - eps) quantile


# ---------------------------------------------------------------------------
# demand distributions


class DemandDistribution:
    """Nonnegative random demand with pdf/cdf/quantile/sampling."""

    kind = "abstract"

    def pdf(self, y):
        raise NotImplementedError

    def cdf(self, y):
        raise NotImplementedError

    def ppf(self, u):
        raise NotImplementedError

    def mean(self):
        raise NotImplementedError

    def sample(self, rng, n):
        raise NotImplementedError

    def upper_limit(self, eps=_TAIL_EPS):
        return float(self.ppf(1.0 - eps))

    def to_spec(self):
        raise NotImplementedError


class LognormalDemand(DemandDistribution):
    kind = "lognormal"

    def __init__(self, eta, sigma):
        if sigma <= 0:
            raise InputError("lognormal sigma must be > 0")
        self.eta = float(eta)
        self.sigma = float(sigma)

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        pos = y > 0
        ly = np.log(y, where=pos, out=np.full_like(y, -np.inf))
        out[pos] = np.exp(-((ly[pos] - self.eta) ** 2) / (2 * self.sigma**2)) / (
            y[pos] * self.sigma * _SQRT2PI
        )
        return out if out.ndim else float(out)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        pos = y > 0
        out[pos] = ndtr((np.log(y[pos]) - self.eta) / self.sigma)
        return out if out.ndim else float(out)

    def ppf(self, u):
        return float(np.exp(self.eta + self.sigma * ndtri(u)))

    def mean(self):
        return math.exp(self.eta + 0.5 * self.sigma**2)

    def sample(self, rng, n):
        return rng.lognormal(self.eta, self.sigma, size=n)

    def to_spec(self):
        return {"kind": "lognormal", "eta": self.eta, "sigma": self.sigma}


class ExponentialDemand(DemandDistribution):
    kind = "exponential"

    def __init__(self, mean):
        if mean <= 0:
            raise InputError("exponential mean must be > 0")
        self.mu = float(mean)

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.where(y >= 0, np.exp(-y / self.mu) / self.mu, 0.0)
        return out if out.ndim else float(out)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        out = np.where(y >= 0, -np.expm1(-y / self.mu), 0.0)
        return out if out.ndim else float(out)

    def ppf(self, u):
        return float(-self.mu * math.log1p(-u))

    def mean(self):
        return self.mu

    def sample(self, rng, n):
        return rng.exponential(self.mu, size=n)

    def to_spec(self):
        return {"kind": "exponential", "mean": self.mu}


class KdeEstimator:
    """Recursive kernel density estimator with Gaussian kernels.

    The n-th sample enters with bandwidth h_n = n**(-gamma), so the estimate is
    a running mixture that never needs reprocessing of earlier samples:

        f_{n+1} = n/(n+1) f_n + 1/((n+1) h_{n+1}) K((x_{n+1} - x)/h_{n+1})

    The mixture state is tracked on `grid` for inspection; pdf/cdf queries use
    the exact mixture.
    """

    def __init__(self, grid, gamma=1.0 / 3.0):
        self.grid = np.asarray(grid, dtype=float)
        if self.grid.ndim != 1 or self.grid.size < 2:
            raise InputError("KDE grid must be a 1-D array with >= 2 points")
        self.gamma = float(gamma)
        self.samples = np.zeros(0)
        self.bandwidths = np.zeros(0)
        self.state = np.zeros_like(self.grid)

    @property
    def n(self):
        return self.samples.size

    def bandwidth(self, n):
        return float(n) ** (-self.gamma)

    def add(self, sample):
        n = self.n
        h = self.bandwidth(n + 1)
        kern = np.exp(-0.5 * ((self.grid - sample) / h) ** 2) / (h * _SQRT2PI)
        self.state = (n / (n + 1.0)) * self.state + kern / (n + 1.0)
        self.samples = np.append(self.samples, sample)
        self.bandwidths = np.append(self.bandwidths, h)
        return self

    def fit_batch(self, samples):
        """Equivalent to adding every sample in order (the recursion unrolled)."""
        samples = np.asarray(samples, dtype=float)
        n0 = self.n
        ns = np.arange(n0 + 1, n0 + samples.size + 1, dtype=float)
        hs = ns**(-self.gamma)
        kern = np.exp(-0.5 * ((self.grid[None, :] - samples[:, None]) / hs[:, None]) ** 2)
        kern /= hs[:, None] * _SQRT2PI
        total = self.state * n0 + kern.sum(axis=0)
        self.samples = np.concatenate([self.samples, samples])
        self.bandwidths = np.concatenate([self.bandwidths, hs])
        self.state = total / self.n
        return self

    def pdf(self, y):
        if self.n == 0:
            raise InputError("KDE has no samples")
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = (y[:, None] - self.samples[None, :]) / self.bandwidths[None, :]
        vals = np.exp(-0.5 * z**2) / (self.bandwidths[None, :] * _SQRT2PI)
        out = vals.mean(axis=1)
        return out if out.size > 1 else float(out[0])

    def cdf(self, y):
        if self.n == 0:
            raise InputError("KDE has no samples")
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = (y[:, None] - self.samples[None, :]) / self.bandwidths[None, :]
        out = ndtr(z).mean(axis=1)
        return out if out.size > 1 else float(out[0])

    def mean(self):
        return float(self.samples.mean())

    def ppf(self, u):
        lo = float(self.samples.min() - 8.0 * self.bandwidths.max())
        hi = float(self.samples.max() + 8.0 * self.bandwidths.max())
        return bisect(lambda y: self.cdf(y) - u, lo, hi, tol=1e-10)

    def excess_mean(self, threshold):
        """Exact E[max(Y - threshold, 0)] for the Gaussian mixture."""
        z = (self.samples - threshold) / self.bandwidths
        phi = np.exp(-0.5 * z**2) / _SQRT2PI
        return float(np.mean((self.samples - threshold) * ndtr(z) + self.bandwidths * phi))

    def grid_integral(self):
        return float(np.trapezoid(self.state, self.grid))


def kde_update(est, sample):
    """Fold one observation into the running estimate (in place, returned)."""
    return est.add(sample)


class EmpiricalDemand(DemandDistribution):
    """Demand distribution backed by a KdeEstimator (data-driven aggregate)."""

    kind = "empirical-kde"

    def __init__(self, estimator):
        self.estimator = estimator

    def pdf(self, y):
        return self.estimator.pdf(y)

    def cdf(self, y):
        return self.estimator.cdf(y)

    def ppf(self, u):
        return self.estimator.ppf(u)

    def mean(self):
        return self.estimator.mean()

    def sample(self, rng, n):
        idx = rng.integers(0, self.estimator.n, size=n)
        return self.estimator.samples[idx] + self.estimator.bandwidths[idx] * rng.standard_normal(n)

    def to_spec(self):
        return {"kind": "empirical-kde", "n": int(self.estimator.n)}


def demand_from_spec(spec):
    kind = spec.get("kind")
    if kind == "lognormal":
        return LognormalDemand(spec["eta"], spec["sigma"])
    if kind == "exponential":
        return ExponentialDemand(spec["mean"])
    raise InputError(f"unknown demand kind {kind!r}")


def aggregate_demand(demands, n_samples=20000, seed=0, gamma=1.0 / 3.0, grid_size=512):
    """Data-driven estimate of the aggregate demand of a user group.

    Monte-Carlo convolution: draw joint samples of the member demands and feed
    the sums into the recursive estimator.
    """
    rng = np.random.default_rng(seed)
    total = np.zeros(n_samples)
    for d in demands:
        total += d.sample(rng, n_samples)
    hi = float(total.max()) * 1.25 + 1.0
    est = KdeEstimator(np.linspace(0.0, hi, grid_size), gamma=gamma)
    est.fit_batch(total)
    return EmpiricalDemand(est)


# ---------------------------------------------------------------------------
# channel distributions


class ChannelDistribution:
    """Random downlink achievable rate, parameterized by transmission resource t."""

    kind = "abstract"
    has_analytic_dt = False

    def cdf(self, v, t):
        raise NotImplementedError

    def pdf(self, v, t):
        raise NotImplementedError

    def sample(self, rng, t, n):
        raise NotImplementedError


class RayleighCapacityChannel(ChannelDistribution):
    """Capacity of a Rayleigh-fading downlink: V = t * log2(1 + snr * E), E ~ Exp(1).

    CDF: 1 - exp((1 - 2**(v/t)) / avg_snr), nondecreasing in v and
    nonincreasing in t.
    """

    kind = "rayleigh"
    has_analytic_dt = True

    def __init__(self, avg_snr):
        if avg_snr <= 0:
            raise InputError("average SNR must be > 0")
        self.avg_snr = float(avg_snr)

    def _check(self, v, t):
        if np.any(np.asarray(t) <= 0):
            raise InputError("transmission resource t must be > 0")
        if np.any(np.asarray(v) < 0):
            raise InputError("rate v must be >= 0")

    def cdf(self, v, t):
        self._check(v, t)
        v = np.asarray(v, dtype=float)
        with np.errstate(over="ignore"):
            out = -np.expm1((1.0 - np.exp2(v / t)) / self.avg_snr)
        return out if out.ndim else float(out)

    def survival(self, v, t):
        """1 - CDF, computed stably."""
        self._check(v, t)
        v = np.asarray(v, dtype=float)
        with np.errstate(over="ignore"):
            out = np.exp((1.0 - np.exp2(v / t)) / self.avg_snr)
        return out if out.ndim else float(out)

    def pdf(self, v, t):
        self._check(v, t)
        v = np.asarray(v, dtype=float)
        with np.errstate(over="ignore"):
            la = v / t * _LN2
            a = np.exp(la)
            logp = np.log(_LN2 / (self.avg_snr * t)) + la + (1.0 - a) / self.avg_snr
            out = np.where(np.isfinite(a), np.exp(logp), 0.0)
        return out if out.ndim else float(out)

    def dcdf_dt(self, v, t):
        """Analytic d/dt of the CDF (nonpositive)."""
        self._check(v, t)
        v = np.asarray(v, dtype=float)
        with np.errstate(over="ignore"):
            la = v / t * _LN2
            a = np.exp(la)
            logmag = np.log(v * _LN2 / (self.avg_snr * t * t), where=v > 0,
                            out=np.full_like(v, -np.inf)) + la + (1.0 - a) / self.avg_snr
            out = -np.where(np.isfinite(a), np.exp(logmag), 0.0)
        return out if out.ndim else float(out)

    def sample(self, rng, t, n):
        self._check(0.0, t)
        snr = self.avg_snr * rng.exponential(1.0, size=n)
        return t * np.log2(1.0 + snr)

    def to_spec(self):
        return {"kind": "rayleigh", "avg_snr": self.avg_snr}


class TabulatedChannel(ChannelDistribution):
    """CDF given on a (v, t) grid, bilinearly interpolated."""

    kind = "tabulated"
    has_analytic_dt = False

    def __init__(self, v_grid, t_grid, cdf_table):
        self.v_grid = np.asarray(v_grid, dtype=float)
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.table = np.asarray(cdf_table, dtype=float)
        if self.table.shape != (self.v_grid.size, self.t_grid.size):
            raise InputError("CDF table shape must be (len(v_grid), len(t_grid))")
        if np.any(np.diff(self.table, axis=0) < -1e-12):
            raise InputError("tabulated CDF must be nondecreasing in v")

    def cdf(self, v, t):
        if np.any(np.asarray(t) <= 0):
            raise InputError("transmission resource t must be > 0")
        v = np.clip(v, self.v_grid[0], self.v_grid[-1])
        t = np.clip(t, self.t_grid[0], self.t_grid[-1])
        iv = np.clip(np.searchsorted(self.v_grid, v) - 1, 0, self.v_grid.size - 2)
        it = np.clip(np.searchsorted(self.t_grid, t) - 1, 0, self.t_grid.size - 2)
        fv = (v - self.v_grid[iv]) / (self.v_grid[iv + 1] - self.v_grid[iv])
        ft = (t - self.t_grid[it]) / (self.t_grid[it + 1] - self.t_grid[it])
        c00 = self.table[iv, it]
        c10 = self.table[iv + 1, it]
        c01 = self.table[iv, it + 1]
        c11 = self.table[iv + 1, it + 1]
        return (1 - fv) * (1 - ft) * c00 + fv * (1 - ft) * c10 + (1 - fv) * ft * c01 + fv * ft * c11

    def pdf(self, v, t):
        # exact density of the bilinear CDF: per-cell slope in v
        v = float(np.clip(v, self.v_grid[0], self.v_grid[-1]))
        iv = int(np.clip(np.searchsorted(self.v_grid, v) - 1, 0, self.v_grid.size - 2))
        dv = self.v_grid[iv + 1] - self.v_grid[iv]
        return (self.cdf(self.v_grid[iv + 1], t) - self.cdf(self.v_grid[iv], t)) / dv

    def sample(self, rng, t, n):
        u = rng.uniform(size=n)
        cdf_at = np.array([self.cdf(v, t) for v in self.v_grid])
        return np.interp(u, cdf_at, self.v_grid)


def channel_from_spec(spec):
    kind = spec.get("kind")
    if kind == "rayleigh":
        return RayleighCapacityChannel(spec["avg_snr"])
    if kind == "tabulated":
        return TabulatedChannel(spec["v_grid"], spec["t_grid"], spec["cdf"])
    raise InputError(f"unknown channel kind {kind!r}")


def channel_cdf(dist, v, t):
    """Probability that the downlink achievable rate is at most v, given t."""
    if t <= 0:
        raise InputError("transmission resource t must be > 0")
    if v < 0:
        raise InputError("rate v must be >= 0")
    return float(dist.cdf(v, t))


# ---------------------------------------------------------------------------
# revenue functions


class RevenueFunction:
    """Concave nondecreasing revenue from a served rate."""

    kind = "abstract"

    def __call__(self, r):
        raise NotImplementedError

    def deriv(self, r):
        raise NotImplementedError

    def second_deriv(self, r):
        dr = 1e-5 * max(1.0, abs(r))
        return (self.deriv(r + dr) - self.deriv(max(r - dr, 0.0))) / (dr + min(r, dr))


class SaturatingRevenue(RevenueFunction):
    """phi(r) = a - exp(-b r + c); concave and nondecreasing for b > 0."""

    kind = "exp-saturating"

    def __init__(self, a, b, c):
        if b <= 0:
            raise InputError("saturating revenue needs b > 0")
        self.a, self.b, self.c = float(a), float(b), float(c)

    def __call__(self, r):
        return self.a - np.exp(-self.b * np.asarray(r, dtype=float) + self.c)

    def deriv(self, r):
        return self.b * np.exp(-self.b * np.asarray(r, dtype=float) + self.c)

    def second_deriv(self, r):
        return -self.b**2 * np.exp(-self.b * np.asarray(r, dtype=float) + self.c)

    def to_spec(self):
        return {"kind": "exp-saturating", "a": self.a, "b": self.b, "c": self.c}


class IdentityRevenue(RevenueFunction):
    kind = "identity"

    def __call__(self, r):
        return np.asarray(r, dtype=float) + 0.0

    def deriv(self, r):
        return np.ones_like(np.asarray(r, dtype=float)) + 0.0

    def second_deriv(self, r):
        return np.zeros_like(np.asarray(r, dtype=float)) + 0.0

    def to_spec(self):
        return {"kind": "identity"}


class CustomRevenue(RevenueFunction):
    kind = "custom"

    def __init__(self, fn, deriv=None):
        self.fn = fn
        self._deriv = deriv

    def __call__(self, r):
        return self.fn(r)

    def deriv(self, r):
        if self._deriv is not None:
            return self._deriv(r)
        dr = 1e-6 * max(1.0, abs(r))
        return (self.fn(r + dr) - self.fn(max(r - dr, 0.0))) / (dr + min(r, dr))


def revenue_from_spec(spec):
    kind = spec.get("kind")
    if kind == "exp-saturating":
        return SaturatingRevenue(spec["a"], spec["b"], spec["c"])
    if kind == "identity":
        return IdentityRevenue()
    raise InputError(f"unknown revenue kind {kind!r}")


def check_concave_nondecreasing(phi, upper, n=200, tol=1e-9):
    """Numerical concavity/monotonicity check of a revenue function on [0, upper]."""
    grid = np.linspace(0.0, upper, n)
    d = np.array([float(phi.deriv(g)) for g in grid])
    if np.any(d < -tol):
        raise InputError("revenue function is decreasing on the sampled grid")
    if np.any(np.diff(d) > tol * max(1.0, np.abs(d).max())):
        raise InputError("revenue function is not concave on the sampled grid")


# ---------------------------------------------------------------------------
# expectation functionals


def expected_outage(channel, r, t, abs_tol=1e-9, rel_tol=1e-7):
    """Expected downlink rate loss E[max(r - V, 0)] = int_0^r z(v,t)(r-v) dv."""
    if r < 0:
        raise InputError("reserved rate must be >= 0")
    if t <= 0:
        raise InputError("transmission resource t must be > 0")
    if r == 0:
        return 0.0
    return adaptive_quad(lambda v: channel.pdf(v, t) * (r - v), 0.0, r, abs_tol, rel_tol)


def expected_outage_cdf_form(channel, r, t, abs_tol=1e-9, rel_tol=1e-7):
    """Same quantity by parts: int_0^r Z(v,t) dv (independent cross-check form)."""
    if r == 0:
        return 0.0
    return adaptive_quad(lambda v: channel.cdf(v, t), 0.0, r, abs_tol, rel_tol)


def outage_t_derivative(channel, r, t, abs_tol=1e-9, rel_tol=1e-7):
    """d/dt of the expected outage; analytic integrand when available, else
    central finite differences in t with step 1e-5 * max(1, t)."""
    if r == 0:
        return 0.0
    if channel.has_analytic_dt:
        return adaptive_quad(lambda v: channel.dcdf_dt(v, t), 0.0, r, abs_tol, rel_tol)
    h = 1e-5 * max(1.0, t)
    lo = max(t - h, 1e-12)
    return (expected_outage(channel, r, t + h) - expected_outage(channel, r, lo)) / (t + h - lo)


def rayleigh_cdf_vec(snr, v, t):
    """Vectorized Rayleigh-capacity CDF with per-entry average SNR."""
    with np.errstate(over="ignore"):
        out = -np.expm1((1.0 - np.exp2(np.asarray(v, dtype=float) / t)) / snr)
    return out


def rayleigh_outage_vec(snr, r, t, nodes=96):
    """Vectorized expected outage int_0^r Z dv = r - int_0^r (1-Z) dv.

    Integration stops where the survival mass has decayed below float noise,
    which keeps the fixed-order rule accurate even for tiny t.
    """
    snr = np.asarray(snr, dtype=float)
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise InputError("transmission resource t must be > 0")
    x, w = gauss_legendre(nodes)
    cut = np.minimum(r, t * np.log2(1.0 + 37.0 * snr))
    v = cut[..., None] * x
    with np.errstate(over="ignore"):
        surv = np.exp((1.0 - np.exp2(v / t[..., None])) / snr[..., None])
    return r - cut * (surv * w).sum(axis=-1)


def rayleigh_outage_dt_vec(snr, r, t, nodes=96):
    """Vectorized d/dt of the expected outage (analytic integrand)."""
    snr = np.asarray(snr, dtype=float)
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float)
    x, w = gauss_legendre(nodes)
    cut = np.minimum(r, t * np.log2(1.0 + 37.0 * snr))
    v = cut[..., None] * x
    tt = t[..., None]
    ss = snr[..., None]
    with np.errstate(over="ignore", invalid="ignore"):
        la = v / tt * _LN2
        a = np.exp(la)
        mag = np.where(v > 0,
                       np.exp(np.log(np.maximum(v, 1e-300) * _LN2 / (ss * tt * tt))
                              + la + (1.0 - a) / ss),
                       0.0)
        integrand = -np.where(np.isfinite(a), mag, 0.0)
    return cut * (integrand * w).sum(axis=-1)


def outage_batch(channel, r, t, nodes=96):
    """Vectorized expected outage for arrays r, t (Rayleigh fast path)."""
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float)
    if isinstance(channel, RayleighCapacityChannel):
        snr = np.full(np.broadcast_shapes(r.shape, t.shape), channel.avg_snr)
        return rayleigh_outage_vec(snr, r, t, nodes)
    flat_r, flat_t = np.broadcast_arrays(r, t)
    out = np.array([
        expected_outage(channel, float(ri), float(ti))
        for ri, ti in zip(flat_r.ravel(), flat_t.ravel())
    ])
    return out.reshape(flat_r.shape)


def outage_dt_batch(channel, r, t, nodes=96):
    """Vectorized d/dt expected outage (Rayleigh analytic integrand)."""
    r = np.asarray(r, dtype=float)
    t = np.asarray(t, dtype=float)
    if isinstance(channel, RayleighCapacityChannel):
        snr = np.full(np.broadcast_shapes(r.shape, t.shape), channel.avg_snr)
        return rayleigh_outage_dt_vec(snr, r, t, nodes)
    flat_r, flat_t = np.broadcast_arrays(r, t)
    out = np.array([
        outage_t_derivative(channel, float(ri), float(ti))
        for ri, ti in zip(flat_r.ravel(), flat_t.ravel())
    ])
    return out.reshape(flat_r.shape)


def expected_revenue_batch(demands, phi, r, nodes=96):
    """Vectorized expected revenue across users (grouped by demand kind)."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    x, w = gauss_legendre(nodes)
    by_kind = {}
    for i, d in enumerate(demands):
        by_kind.setdefault(d.kind, []).append(i)
    for kind, idx in by_kind.items():
        idx = np.array(idx)
        ri = r[idx]
        if kind == "lognormal":
            eta = np.array([demands[i].eta for i in idx])
            sig = np.array([demands[i].sigma for i in idx])
            y = ri[:, None] * x
            with np.errstate(divide="ignore", invalid="ignore"):
                ly = np.where(y > 0, np.log(np.maximum(y, 1e-300)), -np.inf)
                pdf = np.where(
                    y > 0,
                    np.exp(-((ly - eta[:, None]) ** 2) / (2 * sig[:, None] ** 2))
                    / np.maximum(y, 1e-300) / (sig[:, None] * _SQRT2PI),
                    0.0,
                )
            head = ri * (np.asarray(phi(y)) * pdf * w).sum(axis=1)
            cdf_r = np.where(ri > 0, ndtr((np.log(np.maximum(ri, 1e-300)) - eta) / sig), 0.0)
        elif kind == "exponential":
            mu = np.array([demands[i].mu for i in idx])
            y = ri[:, None] * x
            pdf = np.exp(-y / mu[:, None]) / mu[:, None]
            head = ri * (np.asarray(phi(y)) * pdf * w).sum(axis=1)
            cdf_r = -np.expm1(-ri / mu)
        else:
            head = np.array([
                adaptive_quad(lambda u: float(phi(u)) * float(demands[i].pdf(u)), 0.0, float(rr))
                if rr > 0 else 0.0
                for i, rr in zip(idx, ri)
            ])
            cdf_r = np.array([float(demands[i].cdf(rr)) for i, rr in zip(idx, ri)])
        out[idx] = head + np.asarray(phi(ri)) * (1.0 - cdf_r)
    return out


def demand_cdf_batch(demands, r):
    return np.array([float(d.cdf(rr)) for d, rr in zip(demands, np.asarray(r, dtype=float))])


def revenue_grad_batch(demands, phi, r):
    r = np.asarray(r, dtype=float)
    return np.asarray(phi.deriv(r)) * (1.0 - demand_cdf_batch(demands, r))


def expected_revenue(demand, phi, r, abs_tol=1e-9, rel_tol=1e-7):
    """E[phi(min(r, d))] = int_0^r phi(y) f(y) dy + phi(r)(1 - F(r))."""
    if r < 0:
        raise InputError("reserved rate must be >= 0")
    tail = float(phi(r)) * (1.0 - float(demand.cdf(r)))
    if r == 0:
        return tail
    head = adaptive_quad(lambda y: float(phi(y)) * float(demand.pdf(y)), 0.0, r, abs_tol, rel_tol)
    return head + tail


def expected_revenue_grad(demand, phi, r):
    """d/dr expected revenue = phi'(r) (1 - F(r))."""
    return float(phi.deriv(r)) * (1.0 - float(demand.cdf(r)))


def revenue_curvature(demand, phi, r):
    """d2/dr2 expected revenue = phi''(r)(1 - F(r)) - phi'(r) f(r)."""
    return float(phi.second_deriv(r)) * (1.0 - float(demand.cdf(r))) - float(phi.deriv(r)) * float(
        demand.pdf(r)
    )


def revenue_lipschitz(demand, phi, upper=None, n=256, safety=1.1):
    """Gradient-Lipschitz bound for the expected revenue: grid sweep of |d2/dr2|."""
    if upper is None:
        upper = demand.upper_limit(1e-6)
    grid = np.linspace(0.0, upper, n)
    curv = np.abs([revenue_curvature(demand, phi, float(g)) for g in grid])
    return safety * float(np.max(curv))


def expected_excess_demand(demand, total_r, abs_tol=1e-9, rel_tol=1e-7):
    """E[max(d - R, 0)] = int_R^inf (y - R) f(y) dy.

    The integral is truncated at the (1 - 1e-8) quantile, which bounds the
    absolute error by the corresponding tail mass.  Mixture-backed (KDE)
    demands use the exact closed form instead of quadrature.
    """
    if total_r < 0:
        raise InputError("total reserved rate must be >= 0")
    if isinstance(demand, EmpiricalDemand):
        return demand.estimator.excess_mean(float(total_r))
    upper = max(demand.upper_limit(), float(total_r))
    if upper <= total_r:
        return 0.0
    return adaptive_quad(
        lambda y: (y - total_r) * float(demand.pdf(y)), total_r, upper, abs_tol, rel_tol
    )


def expected_excess_demand_grad(demand, total_r):
    """d/dR of the expected excess demand = -(1 - F(R))."""
    return -(1.0 - float(demand.cdf(total_r)))


def outage_shared_downlink(channel, rates, t, **kw):
    """Expected outage of a downlink shared by several paths: rates aggregate."""
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise InputError("rates must be >= 0")
    return expected_outage(channel, float(rates.sum()), t, **kw)


def expectation_over_user_sets(scenarios, f):
    """Finite expectation over enumerated user sets: sum_u P_u f(K_u)."""
    probs = np.array([p for _, p in scenarios], dtype=float)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
        raise InputError(f"scenario probabilities must be >= 0 and sum to 1 (got {probs.sum()})")
    return float(sum(p * f(members) for members, p in scenarios if p != 0.0))
