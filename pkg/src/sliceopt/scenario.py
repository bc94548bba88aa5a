"""Scenario schema, deterministic generator, and presets.

A scenario file is a single JSON document holding the topology, users (with
their candidate paths, downlinks, demand and channel models), slices, tenants,
revenue functions and algorithm parameter overrides.  Generation is fully
deterministic under the seed; the same (params, seed) pair produces a
byte-identical file.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .netmodel import (
    AccessPoint,
    Allocation,
    Downlink,
    Link,
    NetworkTopology,
    Node,
    Path,
    ScenarioError,
    SliceSpec,
    TenantSpec,
    UserSpec,
    validate_slice_partition,
)
from .stochastics import channel_from_spec, demand_from_spec, revenue_from_spec

SCHEMA_VERSION = 1

# capacity tiers (rates in Mnats/s, transmission resources in MHz)
CAP_DC_ROUTER = 4000.0
CAP_ROUTER_ROUTER = 2000.0
CAP_ROUTER_AP = 2000.0
CAP_AP_2HOP = 400.0
CAP_AP_3HOP = 320.0
CAP_AP_4HOP = 160.0


@dataclass
class Scenario:
    """A fully resolved instance: topology, statistics and parameters."""

    topo: NetworkTopology
    slices: list
    tenants: list
    demands: dict  # user id -> DemandDistribution
    channels: dict  # (user id, downlink id) -> ChannelDistribution
    phi_long: object
    phi_short: object
    seed: int = 0
    shared_downlink: bool = False
    activation_params: dict = field(default_factory=dict)
    reconfig_params: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def slice_by_id(self, sid):
        for s in self.slices:
            if s.id == sid:
                return s
        raise ScenarioError(f"unknown slice {sid!r}")


def _ap_capacity_tier(hops_to_router):
    if hops_to_router <= 1:
        return CAP_ROUTER_AP
    if hops_to_router == 2:
        return CAP_AP_2HOP
    if hops_to_router == 3:
        return CAP_AP_3HOP
    return CAP_AP_4HOP


def _shortest_paths_from(nodes_adj, source):
    """BFS tree of shortest-hop routes; ties resolved by lowest link id.

    Returns {node: (hops, (link ids along the route))}.
    """
    best = {source: (0, ())}
    queue = deque([source])
    while queue:
        cur = queue.popleft()
        hops, route = best[cur]
        for link_id, dst in sorted(nodes_adj.get(cur, [])):
            cand = (hops + 1, route + (link_id,))
            if dst not in best or cand < best[dst]:
                best[dst] = cand
                queue.append(dst)
    return best


def generate_scenario(params=None, seed=0):
    """Deterministic scenario generation.

    `params` may be a preset name ("tiny", "paper-tiny", "paper") or a dict of
    overrides on top of a preset (key "preset" selects the base).
    """
    if params is None:
        params = {}
    if isinstance(params, str):
        params = {"preset": params}
    preset = params.get("preset", "tiny")
    base = _preset_params(preset)
    base.update({k: v for k, v in params.items() if k != "preset"})
    return _generate(base, seed)


def _preset_params(preset):
    if preset == "tiny":
        return {
            "preset": "tiny",
            "n_aps": 4,
            "n_routers": 2,
            "n_gateways": 1,
            "n_users": 8,
            "n_slices": 3,
            "n_tenants": 3,
            "paths_per_user": 3,
            "scenarios_per_slice": 2,
            "ap_budget": 12.0,
            "area": 100.0,
            "eta_mean": [2.2, 2.2, 2.2],
            "eta_sd": 0.25,
            "sigma": 0.7,
            "snr_ref": 18.0,
            "min_rate": [12.0, 12.0, 10.0],
            "min_bandwidth": [1.0, 1.0, 1.0],
            "beta": [0.1, 0.2, 0.3],
            "theta": 3.0,
            "psi": 1.0,
            "tenant_min_rate": 0.0,
            "tenant_min_bandwidth": 0.0,
            "c_a": 60.0,
            "c_r": 1.0,
            "cap_scale": 0.02,
            "revenue_long": {"kind": "exp-saturating", "a": 90.0, "b": 0.045, "c": 4.5},
            "revenue_short": {"kind": "exp-saturating", "a": 90.0, "b": 0.09, "c": 4.5},
            "shared_downlink": False,
        }
    if preset == "paper-tiny":
        p = _preset_params("tiny")
        p.update(
            {
                "preset": "paper-tiny",
                "n_aps": 8,
                "n_routers": 3,
                "n_gateways": 2,
                "n_users": 25,
                "n_slices": 5,
                "n_tenants": 1,
                "scenarios_per_slice": 4,
                "ap_budget": 8.0,
                # users of slices 1 and 4 request greater rates, as in the
                # reference setup that activates those slices first
                "eta_mean": [3.0, 2.2, 2.2, 3.0, 2.2],
                "min_rate": [20.0, 20.0, 20.0, 20.0, 16.0],
                "min_bandwidth": [1.0] * 5,
                "beta": [0.1, 0.2, 0.3, 0.2, 0.3],
                "c_a": 150.0,
                "cap_scale": 0.05,
            }
        )
        return p
    if preset == "paper":
        p = _preset_params("tiny")
        p.update(
            {
                "preset": "paper",
                "n_aps": 57,
                "n_routers": 11,
                "n_gateways": 3,
                "n_users": 200,
                "n_slices": 5,
                "n_tenants": 1,
                "scenarios_per_slice": 4,
                "ap_budget": 20.0,
                "area": 1000.0,
                "eta_mean": [3.5, 2.5, 2.5, 3.5, 2.5],
                "sigma": 0.8,
                "min_rate": [600.0] * 5,
                "min_bandwidth": [1.0] * 5,
                "beta": [0.1, 0.2, 0.3, 0.2, 0.3],
                "c_a": 1000.0,
                "cap_scale": 1.0,
                "router_edges": 21,
            }
        )
        return p
    raise ScenarioError(f"unknown preset {preset!r}")


def _generate(p, seed):
    rng = np.random.default_rng(seed)
    n_aps = p["n_aps"]
    n_routers = p["n_routers"]
    n_gateways = min(p["n_gateways"], n_routers)
    area = p["area"]
    cap_scale = p.get("cap_scale", 1.0)

    nodes = [Node("dc0", "data-center")]
    router_ids = [f"r{i}" for i in range(n_routers)]
    ap_ids = [f"ap{i}" for i in range(n_aps)]
    nodes += [Node(rid, "router") for rid in router_ids]
    nodes += [Node(aid, "access-point") for aid in ap_ids]

    router_pos = {rid: rng.uniform(0.2 * area, 0.8 * area, size=2) for rid in router_ids}
    ap_pos = {aid: rng.uniform(0.0, area, size=2) for aid in ap_ids}

    links = []
    lid = 0

    def add_edge(a, b, cap):
        nonlocal lid
        links.append(Link(f"l{lid:03d}", a, b, cap * cap_scale))
        links.append(Link(f"l{lid + 1:03d}", b, a, cap * cap_scale))
        lid += 2

    for rid in router_ids[:n_gateways]:
        add_edge("dc0", rid, CAP_DC_ROUTER)

    # router mesh: a chain plus extra nearest-neighbour chords
    undirected = set()
    for i in range(1, n_routers):
        undirected.add((router_ids[i - 1], router_ids[i]))
    target_edges = p.get("router_edges", max(n_routers - 1, 1))
    cand = []
    for i in range(n_routers):
        for j in range(i + 1, n_routers):
            a, b = router_ids[i], router_ids[j]
            if (a, b) not in undirected:
                d = np.linalg.norm(router_pos[a] - router_pos[b])
                cand.append((d, a, b))
    cand.sort(key=lambda x: (x[0], x[1], x[2]))
    for d, a, b in cand:
        if len(undirected) >= target_edges:
            break
        undirected.add((a, b))
    for a, b in sorted(undirected):
        add_edge(a, b, CAP_ROUTER_ROUTER)

    # APs attach to the nearest router or to an already attached AP (chains)
    hops_to_router = {}
    attach_order = sorted(
        ap_ids, key=lambda aid: min(np.linalg.norm(ap_pos[aid] - router_pos[r]) for r in router_ids)
    )
    attached = []
    for aid in attach_order:
        best_r = min(router_ids, key=lambda r: (np.linalg.norm(ap_pos[aid] - router_pos[r]), r))
        d_r = np.linalg.norm(ap_pos[aid] - router_pos[best_r])
        best_a, d_a = None, np.inf
        for other in attached:
            d = np.linalg.norm(ap_pos[aid] - ap_pos[other])
            if d < d_a and hops_to_router[other] < 3:
                best_a, d_a = other, d
        if best_a is not None and d_a < 0.6 * d_r:
            hops = hops_to_router[best_a] + 1
            add_edge(best_a, aid, _ap_capacity_tier(hops))
        else:
            hops = 1
            add_edge(best_r, aid, _ap_capacity_tier(1))
        hops_to_router[aid] = hops
        attached.append(aid)

    aps = [AccessPoint(aid, p["ap_budget"]) for aid in ap_ids]

    adj = {}
    for l in links:
        adj.setdefault(l.src, []).append((l.id, l.dst))
    routes = _shortest_paths_from(adj, "dc0")
    for aid in ap_ids:
        if aid not in routes:
            raise ScenarioError(f"generated topology leaves AP {aid!r} unreachable")

    # users: top-k APs by received power (distance with shadowing)
    n_users = p["n_users"]
    n_slices = p["n_slices"]
    paths_per_user = p["paths_per_user"]
    shared = p.get("shared_downlink", False)
    users = []
    channel_specs = {}
    demand_specs = {}
    slice_members = {i: [] for i in range(n_slices)}
    for ui in range(n_users):
        uid = f"u{ui:03d}"
        si = ui % n_slices
        slice_members[si].append(uid)
        pos = rng.uniform(0.0, area, size=2)
        shadow = rng.normal(0.0, 2.0, size=n_aps)
        power = np.array(
            [
                -25.0 * np.log10(max(np.linalg.norm(pos - ap_pos[aid]), 1.0)) + shadow[j]
                for j, aid in enumerate(ap_ids)
            ]
        )
        order = np.argsort(-power)
        n_dl = 2 if shared else paths_per_user
        chosen = [ap_ids[j] for j in order[:n_dl]]
        downlinks = []
        paths = []
        for di, aid in enumerate(chosen):
            wid = f"{uid}w{di}"
            downlinks.append(Downlink(wid, aid))
            dist = max(np.linalg.norm(pos - ap_pos[aid]), 1.0)
            snr = p["snr_ref"] / (1.0 + (dist / (0.35 * area)) ** 2.5)
            snr *= float(np.exp(rng.normal(0.0, 0.25)))
            snr = float(np.clip(snr, 1.0, 40.0))
            channel_specs[(uid, wid)] = {"kind": "rayleigh", "avg_snr": round(snr, 6)}
        pi = 0
        for di, aid in enumerate(chosen):
            hops, route = routes[aid]
            paths.append(Path(uid, f"p{pi}", tuple(route), f"{uid}w{di}", ap=aid))
            pi += 1
        if shared and paths_per_user > len(chosen):
            # extra path to the best AP through an alternative route
            aid = chosen[0]
            first = routes[aid][1][0]
            adj2 = {
                src: [(l, d) for (l, d) in lst if l != first] for src, lst in adj.items()
            }
            alt = _shortest_paths_from(adj2, "dc0")
            if aid in alt:
                paths.append(Path(uid, f"p{pi}", tuple(alt[aid][1]), f"{uid}w0", ap=aid))
        users.append(UserSpec(uid, f"s{si}", downlinks, paths))
        eta = float(rng.normal(p["eta_mean"][si % len(p["eta_mean"])], p["eta_sd"]))
        demand_specs[uid] = {"kind": "lognormal", "eta": round(eta, 6), "sigma": p["sigma"]}

    topo = NetworkTopology(nodes, links, aps, users)

    slices = []
    n_tenants = p["n_tenants"]
    tenant_slices = {j: [] for j in range(n_tenants)}
    for si in range(n_slices):
        tj = si % n_tenants
        tenant_slices[tj].append(f"s{si}")
        members = slice_members[si]
        scen = []
        n_scen = p["scenarios_per_slice"]
        if n_scen <= 1 or len(members) <= 1:
            scen = [(list(members), 1.0)]
        else:
            probs = rng.uniform(0.5, 1.5, size=n_scen)
            probs /= probs.sum()
            scen = [(list(members), float(probs[0]))]
            for u in range(1, n_scen):
                size = max(1, int(round(len(members) * rng.uniform(0.4, 0.9))))
                sub = sorted(rng.choice(members, size=size, replace=False).tolist())
                scen.append((sub, float(probs[u])))
            total = sum(q for _, q in scen)
            scen = [(m, q / total) for m, q in scen]
        slices.append(
            SliceSpec(
                f"s{si}",
                f"j{tj}",
                users=list(members),
                min_rate=p["min_rate"][si % len(p["min_rate"])],
                min_bandwidth=p["min_bandwidth"][si % len(p["min_bandwidth"])],
                beta=p["beta"][si % len(p["beta"])],
                theta=p["theta"],
                scenarios=scen,
            )
        )
    tenants = [
        TenantSpec(
            f"j{tj}",
            slices=tenant_slices[tj],
            min_rate=p["tenant_min_rate"],
            min_bandwidth=p["tenant_min_bandwidth"],
            psi=p["psi"],
        )
        for tj in range(n_tenants)
    ]
    validate_slice_partition(slices, tenants)

    doc = {
        "schema_version": SCHEMA_VERSION,
        "seed": int(seed),
        "preset": p["preset"],
        "shared_downlink": bool(shared),
        "topology": {
            "nodes": [{"id": n.id, "kind": n.kind} for n in nodes],
            "links": [
                {"id": l.id, "src": l.src, "dst": l.dst, "capacity": l.capacity} for l in links
            ],
            "aps": [{"id": a.id, "capacity": a.capacity} for a in aps],
        },
        "users": [
            {
                "id": u.id,
                "slice": u.slice,
                "demand": demand_specs[u.id],
                "downlinks": [
                    {"id": w.id, "ap": w.ap, "channel": channel_specs[(u.id, w.id)]}
                    for w in u.downlinks
                ],
                "paths": [
                    {"id": pt.id, "links": list(pt.links), "downlink": pt.downlink}
                    for pt in u.paths
                ],
            }
            for u in users
        ],
        "slices": [
            {
                "id": s.id,
                "tenant": s.tenant,
                "users": list(s.users),
                "min_rate": s.min_rate,
                "min_bandwidth": s.min_bandwidth,
                "beta": s.beta,
                "theta": s.theta,
                "scenarios": [{"users": list(m), "prob": q} for m, q in s.scenarios],
            }
            for s in slices
        ],
        "tenants": [
            {
                "id": t.id,
                "slices": list(t.slices),
                "min_rate": t.min_rate,
                "min_bandwidth": t.min_bandwidth,
                "psi": t.psi,
            }
            for t in tenants
        ],
        "revenue": {"long": p["revenue_long"], "short": p["revenue_short"]},
        "params": {
            "activation": {"c_a": p["c_a"], "theta": p["theta"]},
            "reconfiguration": {"c_r": p["c_r"]},
        },
    }
    return scenario_from_dict(doc)


# ---------------------------------------------------------------------------
# (de)serialization


def scenario_from_dict(doc):
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {doc.get('schema_version')!r}")
    topo_doc = doc["topology"]
    nodes = [Node(n["id"], n["kind"]) for n in topo_doc["nodes"]]
    links = [Link(l["id"], l["src"], l["dst"], float(l["capacity"])) for l in topo_doc["links"]]
    aps = [AccessPoint(a["id"], float(a["capacity"])) for a in topo_doc["aps"]]

    users = []
    demands = {}
    channels = {}
    for u in doc["users"]:
        downlinks = [Downlink(w["id"], w["ap"]) for w in u["downlinks"]]
        paths = [Path(u["id"], pt["id"], tuple(pt["links"]), pt["downlink"]) for pt in u["paths"]]
        users.append(UserSpec(u["id"], u["slice"], downlinks, paths))
        demands[u["id"]] = demand_from_spec(u["demand"])
        for w in u["downlinks"]:
            channels[(u["id"], w["id"])] = channel_from_spec(w["channel"])
    topo = NetworkTopology(nodes, links, aps, users)

    slices = [
        SliceSpec(
            s["id"],
            s["tenant"],
            users=list(s["users"]),
            min_rate=float(s["min_rate"]),
            min_bandwidth=float(s["min_bandwidth"]),
            beta=float(s["beta"]),
            theta=float(s.get("theta", 0.0)),
            scenarios=[(list(sc["users"]), float(sc["prob"])) for sc in s.get("scenarios", [])],
        )
        for s in doc["slices"]
    ]
    tenants = [
        TenantSpec(
            t["id"],
            slices=list(t["slices"]),
            min_rate=float(t.get("min_rate", 0.0)),
            min_bandwidth=float(t.get("min_bandwidth", 0.0)),
            psi=float(t.get("psi", 1.0)),
        )
        for t in doc["tenants"]
    ]
    validate_slice_partition(slices, tenants)

    member_of = {}
    for s in slices:
        for k in s.users:
            if k in member_of:
                raise ScenarioError(f"user {k!r} belongs to slices {member_of[k]!r} and {s.id!r}")
            member_of[k] = s.id
    for u in users:
        if u.slice != member_of.get(u.id):
            raise ScenarioError(f"user {u.id!r} slice field disagrees with slice membership")

    return Scenario(
        topo=topo,
        slices=slices,
        tenants=tenants,
        demands=demands,
        channels=channels,
        phi_long=revenue_from_spec(doc["revenue"]["long"]),
        phi_short=revenue_from_spec(doc["revenue"]["short"]),
        seed=int(doc.get("seed", 0)),
        shared_downlink=bool(doc.get("shared_downlink", False)),
        activation_params=dict(doc.get("params", {}).get("activation", {})),
        reconfig_params=dict(doc.get("params", {}).get("reconfiguration", {})),
        raw=doc,
    )


def scenario_to_json(scenario):
    return json.dumps(scenario.raw, sort_keys=True, indent=1) + "\n"


def load_scenario(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"malformed scenario file {path}: {exc}") from exc
    return scenario_from_dict(doc)


def save_scenario(scenario, path):
    with open(path, "w") as fh:
        fh.write(scenario_to_json(scenario))


def save_allocation(alloc, path):
    with open(path, "w") as fh:
        json.dump(alloc.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_allocation(path):
    with open(path) as fh:
        return Allocation.from_dict(json.load(fh))
