"""Physical network, slices, tenants and reservation bookkeeping.

The backhaul is a set of directed capacitated links between data centers,
routers and access points (APs).  Every user is reached through a small set
of candidate paths; a path is an ordered chain of backhaul links ending at
an AP, followed by one wireless downlink.  Reservations are made per
(user, path) for rates and per (user, downlink) for transmission resources;
several paths of one user may share a downlink (shared-downlink mode), in
which case they share its transmission resource.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NODE_KINDS = ("data-center", "router", "access-point")


class ScenarioError(ValueError):
    """Structurally inconsistent scenario data (unknown ids, bad shapes)."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ScenarioError(f"unknown node kind {self.kind!r} for node {self.id!r}")


@dataclass(frozen=True)
class Link:
    id: str
    src: str
    dst: str
    capacity: float


@dataclass(frozen=True)
class AccessPoint:
    id: str
    capacity: float


@dataclass(frozen=True)
class Downlink:
    """One wireless downlink of a user, dispensed by a single AP."""

    id: str
    ap: str


@dataclass(frozen=True)
class Path:
    """A chain of backhaul links from a data center to an AP plus one downlink."""

    user: str
    id: str
    links: tuple
    downlink: str
    ap: str = ""


@dataclass
class UserSpec:
    """A user together with its candidate downlinks and paths."""

    id: str
    slice: str
    downlinks: list
    paths: list

    def downlink_by_id(self, wid):
        for w in self.downlinks:
            if w.id == wid:
                return w
        raise ScenarioError(f"user {self.id!r} has no downlink {wid!r}")

    def paths_on_downlink(self, wid):
        return [p for p in self.paths if p.downlink == wid]


class NetworkTopology:
    """Nodes, capacitated links, APs, and the per-user candidate paths.

    Immutable after construction; all derived maps are built eagerly so the
    solver modules can iterate without re-resolving string ids.
    """

    def __init__(self, nodes, links, aps, users):
        self.nodes = list(nodes)
        self.links = list(links)
        self.aps = list(aps)
        self.users = {u.id: u for u in users}

        self.node_by_id = {n.id: n for n in self.nodes}
        self.link_by_id = {l.id: l for l in self.links}
        self.ap_by_id = {a.id: a for a in self.aps}
        self.link_ids = [l.id for l in self.links]
        self.ap_ids = [a.id for a in self.aps]
        self.link_index = {lid: i for i, lid in enumerate(self.link_ids)}
        self.ap_index = {aid: i for i, aid in enumerate(self.ap_ids)}
        self._validate()

    def _validate(self):
        if len(self.link_by_id) != len(self.links):
            raise ScenarioError("duplicate link ids")
        for l in self.links:
            if l.capacity <= 0:
                raise ScenarioError(f"link {l.id!r} capacity must be > 0")
            for end in (l.src, l.dst):
                if end not in self.node_by_id:
                    raise ScenarioError(f"link {l.id!r} endpoint {end!r} is not a node")
        for a in self.aps:
            if a.capacity <= 0:
                raise ScenarioError(f"AP {a.id!r} capacity must be > 0")
            if a.id not in self.node_by_id or self.node_by_id[a.id].kind != "access-point":
                raise ScenarioError(f"AP {a.id!r} is not an access-point node")
        for u in self.users.values():
            wids = {w.id for w in u.downlinks}
            if len(wids) != len(u.downlinks):
                raise ScenarioError(f"user {u.id!r} has duplicate downlink ids")
            for w in u.downlinks:
                if w.ap not in self.ap_by_id:
                    raise ScenarioError(f"downlink {w.id!r} references unknown AP {w.ap!r}")
            for p in u.paths:
                if p.downlink not in wids:
                    raise ScenarioError(f"path {p.id!r} references unknown downlink {p.downlink!r}")
                self._validate_chain(u, p)

    def _validate_chain(self, user, path):
        """Links must form a connected chain from a data center to the path's AP."""
        if not path.links:
            raise ScenarioError(f"path {path.id!r} of user {user.id!r} has no links")
        prev = None
        for lid in path.links:
            link = self.link_by_id.get(lid)
            if link is None:
                raise ScenarioError(f"path {path.id!r} references unknown link {lid!r}")
            if prev is None:
                if self.node_by_id[link.src].kind != "data-center":
                    raise ScenarioError(f"path {path.id!r} does not start at a data center")
            elif link.src != prev:
                raise ScenarioError(f"path {path.id!r} links are not a connected chain")
            prev = link.dst
        ap = user.downlink_by_id(path.downlink).ap
        if prev != ap:
            raise ScenarioError(f"path {path.id!r} does not end at AP {ap!r}")

    def path(self, user_id, path_id):
        u = self.users.get(user_id)
        if u is None:
            raise ScenarioError(f"unknown user {user_id!r}")
        for p in u.paths:
            if p.id == path_id:
                return p
        raise ScenarioError(f"user {user_id!r} has no path {path_id!r}")


@dataclass
class SliceSpec:
    """One network slice: user group, minimum reservations and QoS fraction.

    `users` is the fixed short-time-scale membership.  `scenarios` is the
    long-time-scale list of (user subset, probability) pairs; probabilities
    must sum to one.
    """

    id: str
    tenant: str
    users: list
    min_rate: float = 0.0
    min_bandwidth: float = 0.0
    beta: float = 0.1
    theta: float = 0.0
    scenarios: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta < 1.0):
            raise ScenarioError(f"slice {self.id!r}: beta must lie in (0, 1)")
        if self.min_rate < 0 or self.min_bandwidth < 0:
            raise ScenarioError(f"slice {self.id!r}: minimums must be >= 0")
        if self.theta < 0:
            raise ScenarioError(f"slice {self.id!r}: theta must be >= 0")
        if self.scenarios:
            probs = np.array([p for _, p in self.scenarios], dtype=float)
            if np.any(probs < 0):
                raise ScenarioError(f"slice {self.id!r}: scenario probabilities must be >= 0")
            if abs(probs.sum() - 1.0) > 1e-12:
                raise ScenarioError(f"slice {self.id!r}: scenario probabilities sum to {probs.sum()}")

    def presence_weights(self):
        """Probability that each user is present, from the scenario list.

        Falls back to weight one for every member when no scenarios are given
        (fixed short-time-scale membership).
        """
        if not self.scenarios:
            return {k: 1.0 for k in self.users}
        w = {}
        for members, prob in self.scenarios:
            for k in members:
                w[k] = w.get(k, 0.0) + prob
        return w


@dataclass
class TenantSpec:
    id: str
    slices: list
    min_rate: float = 0.0
    min_bandwidth: float = 0.0
    psi: float = 1.0

    def __post_init__(self):
        if self.psi <= 0:
            raise ScenarioError(f"tenant {self.id!r}: psi must be > 0")


def validate_slice_partition(slices, tenants):
    """Slice sets of distinct tenants must be disjoint and ids must resolve."""
    slice_by_id = {s.id: s for s in slices}
    seen = {}
    for t in tenants:
        for sid in t.slices:
            if sid not in slice_by_id:
                raise ScenarioError(f"tenant {t.id!r} references unknown slice {sid!r}")
            if sid in seen:
                raise ScenarioError(f"slice {sid!r} owned by tenants {seen[sid]!r} and {t.id!r}")
            seen[sid] = t.id
            if slice_by_id[sid].tenant != t.id:
                raise ScenarioError(f"slice {sid!r} tenant mismatch")


class Allocation:
    """Reserved rates per (user, path) and transmission resources per (user, downlink)."""

    def __init__(self, r=None, t=None):
        self.r = dict(r or {})
        self.t = dict(t or {})
        for d in (self.r, self.t):
            for key, v in d.items():
                if not np.isfinite(v) or v < 0:
                    raise ScenarioError(f"allocation entry {key} = {v} must be finite and >= 0")

    def rate(self, user, path):
        return self.r.get((user, path), 0.0)

    def resource(self, user, downlink):
        return self.t.get((user, downlink), 0.0)

    def user_rate(self, user_spec):
        return sum(self.rate(user_spec.id, p.id) for p in user_spec.paths)

    def copy(self):
        return Allocation(dict(self.r), dict(self.t))

    def to_dict(self):
        return {
            "r": {f"{k}|{p}": v for (k, p), v in sorted(self.r.items())},
            "t": {f"{k}|{w}": v for (k, w), v in sorted(self.t.items())},
        }

    @classmethod
    def from_dict(cls, d):
        def parse(m):
            out = {}
            for key, v in m.items():
                a, b = key.split("|", 1)
                out[(a, b)] = float(v)
            return out

        return cls(parse(d.get("r", {})), parse(d.get("t", {})))


def _check_alloc_ids(alloc, topo):
    for (k, p) in alloc.r:
        topo.path(k, p)
    for (k, w) in alloc.t:
        u = topo.users.get(k)
        if u is None:
            raise ScenarioError(f"unknown user {k!r}")
        u.downlink_by_id(w)


def slice_link_reservation(alloc, slc, topo):
    """Per-link rate reserved for one slice: sums r over member paths crossing each link."""
    _check_alloc_ids(alloc, topo)
    out = np.zeros(len(topo.links))
    for k in slc.users:
        user = topo.users.get(k)
        if user is None:
            raise ScenarioError(f"slice {slc.id!r} references unknown user {k!r}")
        for p in user.paths:
            v = alloc.rate(k, p.id)
            if v == 0.0:
                continue
            for lid in p.links:
                out[topo.link_index[lid]] += v
    return out


def slice_ap_reservation(alloc, slc, topo):
    """Per-AP transmission resource reserved for one slice."""
    _check_alloc_ids(alloc, topo)
    out = np.zeros(len(topo.aps))
    for k in slc.users:
        user = topo.users.get(k)
        if user is None:
            raise ScenarioError(f"slice {slc.id!r} references unknown user {k!r}")
        for w in user.downlinks:
            v = alloc.resource(k, w.id)
            if v == 0.0:
                continue
            out[topo.ap_index[w.ap]] += v
    return out


@dataclass
class ConstraintSlack:
    kind: str
    id: str
    slack: float


class FeasibilityReport:
    def __init__(self, rows, tol):
        self.rows = rows
        self.tol = tol

    @property
    def feasible(self):
        return all(row.slack >= -self.tol for row in self.rows)

    def violations(self):
        return [row for row in self.rows if row.slack < -self.tol]


def check_feasibility(alloc, topo, slices, tenants, tol=1e-9):
    """Slack report for link/AP capacities and slice/tenant minimum reservations.

    Slack is capacity minus usage for capacity rows and total minus requirement
    for minimum rows, so the allocation is feasible iff every slack >= -tol.
    """
    _check_alloc_ids(alloc, topo)
    rows = []

    link_load = np.zeros(len(topo.links))
    ap_load = np.zeros(len(topo.aps))
    for (k, p), v in alloc.r.items():
        path = topo.path(k, p)
        for lid in path.links:
            link_load[topo.link_index[lid]] += v
    for (k, w), v in alloc.t.items():
        ap = topo.users[k].downlink_by_id(w).ap
        ap_load[topo.ap_index[ap]] += v

    for i, l in enumerate(topo.links):
        rows.append(ConstraintSlack("link-capacity", l.id, l.capacity - link_load[i]))
    for i, a in enumerate(topo.aps):
        rows.append(ConstraintSlack("ap-capacity", a.id, a.capacity - ap_load[i]))

    slice_rate = {}
    slice_band = {}
    for s in slices:
        total_r = sum(alloc.rate(k, p.id) for k in s.users for p in topo.users[k].paths)
        total_t = sum(alloc.resource(k, w.id) for k in s.users for w in topo.users[k].downlinks)
        slice_rate[s.id] = total_r
        slice_band[s.id] = total_t
        rows.append(ConstraintSlack("slice-min-rate", s.id, total_r - s.min_rate))
        rows.append(ConstraintSlack("slice-min-bandwidth", s.id, total_t - s.min_bandwidth))

    for t in tenants:
        total_r = sum(slice_rate.get(sid, 0.0) for sid in t.slices)
        total_t = sum(slice_band.get(sid, 0.0) for sid in t.slices)
        rows.append(ConstraintSlack("tenant-min-rate", t.id, total_r - t.min_rate))
        rows.append(ConstraintSlack("tenant-min-bandwidth", t.id, total_t - t.min_bandwidth))

    return FeasibilityReport(rows, tol)
