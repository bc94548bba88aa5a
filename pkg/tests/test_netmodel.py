import numpy as np
import pytest

from sliceopt.netmodel import (
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
    check_feasibility,
    slice_ap_reservation,
    slice_link_reservation,
    validate_slice_partition,
)


def two_user_topology(cap_a=10.0, cap_b=10.0, ap_cap=5.0):
    nodes = [
        Node("dc", "data-center"),
        Node("r1", "router"),
        Node("ap1", "access-point"),
        Node("ap2", "access-point"),
    ]
    links = [
        Link("a", "dc", "r1", cap_a),
        Link("b", "r1", "ap1", cap_b),
        Link("c", "r1", "ap2", cap_b),
    ]
    aps = [AccessPoint("ap1", ap_cap), AccessPoint("ap2", ap_cap)]
    users = [
        UserSpec(
            "u1",
            "s1",
            downlinks=[Downlink("u1w1", "ap1")],
            paths=[Path("u1", "p1", ("a", "b"), "u1w1")],
        ),
        UserSpec(
            "u2",
            "s1",
            downlinks=[Downlink("u2w1", "ap2")],
            paths=[Path("u2", "p1", ("a", "c"), "u2w1")],
        ),
    ]
    return NetworkTopology(nodes, links, aps, users)


def test_link_reservation_single_path():
    topo = two_user_topology()
    slc = SliceSpec("s1", "j1", users=["u1"])
    alloc = Allocation(r={("u1", "p1"): 5.0})
    res = slice_link_reservation(alloc, slc, topo)
    assert res[topo.link_index["a"]] == 5.0
    assert res[topo.link_index["b"]] == 5.0
    assert res[topo.link_index["c"]] == 0.0


def test_link_reservation_shared_link():
    topo = two_user_topology()
    slc = SliceSpec("s1", "j1", users=["u1", "u2"])
    alloc = Allocation(r={("u1", "p1"): 3.0, ("u2", "p1"): 4.0})
    res = slice_link_reservation(alloc, slc, topo)
    assert res[topo.link_index["a"]] == 7.0


def test_link_reservation_empty_slice():
    topo = two_user_topology()
    slc = SliceSpec("s0", "j1", users=[])
    assert np.all(slice_link_reservation(Allocation(), slc, topo) == 0.0)


def test_ap_reservation():
    topo = two_user_topology()
    s1 = SliceSpec("s1", "j1", users=["u1"])
    s2 = SliceSpec("s2", "j1", users=["u2"])
    alloc = Allocation(t={("u1", "u1w1"): 2.0, ("u2", "u2w1"): 1.5})
    r1 = slice_ap_reservation(alloc, s1, topo)
    r2 = slice_ap_reservation(alloc, s2, topo)
    assert r1[topo.ap_index["ap1"]] == 2.0
    assert r1[topo.ap_index["ap2"]] == 0.0  # only its own paths are counted
    assert r2[topo.ap_index["ap2"]] == 1.5
    assert np.all(slice_ap_reservation(Allocation(), SliceSpec("s3", "j1", users=[]), topo) == 0.0)


def test_reservation_decomposition():
    # every r_k^p lands on exactly |links| link entries and one AP entry
    topo = two_user_topology()
    slc = SliceSpec("s1", "j1", users=["u1", "u2"])
    rng = np.random.default_rng(3)
    alloc = Allocation(
        r={("u1", "p1"): rng.uniform(0, 3), ("u2", "p1"): rng.uniform(0, 3)},
        t={("u1", "u1w1"): rng.uniform(0, 2), ("u2", "u2w1"): rng.uniform(0, 2)},
    )
    link_total = slice_link_reservation(alloc, slc, topo).sum()
    expected = sum(v * len(topo.path(k, p).links) for (k, p), v in alloc.r.items())
    assert link_total == pytest.approx(expected, abs=1e-12)
    assert slice_ap_reservation(alloc, slc, topo).sum() == pytest.approx(sum(alloc.t.values()))


def test_unknown_ids_raise():
    topo = two_user_topology()
    slc = SliceSpec("s1", "j1", users=["u1"])
    with pytest.raises(ScenarioError):
        slice_link_reservation(Allocation(r={("u9", "p1"): 1.0}), slc, topo)
    with pytest.raises(ScenarioError):
        slice_link_reservation(Allocation(r={("u1", "p9"): 1.0}), slc, topo)


def test_feasibility_boundary_cases():
    topo = two_user_topology(cap_a=10.0)
    slc = SliceSpec("s1", "j1", users=["u1", "u2"])
    ten = TenantSpec("j1", slices=["s1"])
    alloc = Allocation(r={("u1", "p1"): 10.0})
    rep = check_feasibility(alloc, topo, [slc], [ten], tol=1e-9)
    assert rep.feasible
    slack_a = [row for row in rep.rows if row.kind == "link-capacity" and row.id == "a"][0]
    assert slack_a.slack == pytest.approx(0.0, abs=1e-12)

    rep2 = check_feasibility(Allocation(r={("u1", "p1"): 10.5}), topo, [slc], [ten], tol=1e-9)
    assert not rep2.feasible
    bad = rep2.violations()
    assert any(row.kind == "link-capacity" and row.id in ("a", "b") for row in bad)


def test_feasibility_minimum_rate():
    topo = two_user_topology()
    slc = SliceSpec("s1", "j1", users=["u1", "u2"], min_rate=6.0)
    ten = TenantSpec("j1", slices=["s1"])
    rep = check_feasibility(Allocation(r={("u1", "p1"): 5.0}), topo, [slc], [ten])
    assert not rep.feasible
    assert any(row.kind == "slice-min-rate" for row in rep.violations())


def test_feasibility_capacity_monotone():
    # decreasing any reservation never flips a feasible capacity row infeasible
    topo = two_user_topology()
    slc = SliceSpec("s1", "j1", users=["u1", "u2"])
    ten = TenantSpec("j1", slices=["s1"])
    rng = np.random.default_rng(11)
    for _ in range(20):
        r = {("u1", "p1"): rng.uniform(0, 6), ("u2", "p1"): rng.uniform(0, 6)}
        t = {("u1", "u1w1"): rng.uniform(0, 4), ("u2", "u2w1"): rng.uniform(0, 4)}
        base = check_feasibility(Allocation(r, t), topo, [slc], [ten])
        cap_ok = all(row.slack >= 0 for row in base.rows if "capacity" in row.kind)
        if not cap_ok:
            continue
        shrunk = Allocation({k: v * rng.uniform(0, 1) for k, v in r.items()},
                            {k: v * rng.uniform(0, 1) for k, v in t.items()})
        after = check_feasibility(shrunk, topo, [slc], [ten])
        assert all(row.slack >= 0 for row in after.rows if "capacity" in row.kind)


def test_structural_validation():
    with pytest.raises(ScenarioError):
        NetworkTopology([Node("dc", "data-center")], [Link("a", "dc", "nope", 1.0)], [], [])
    with pytest.raises(ScenarioError):
        NetworkTopology([Node("dc", "data-center"), Node("r", "router")],
                        [Link("a", "dc", "r", -1.0)], [], [])
    with pytest.raises(ScenarioError):
        SliceSpec("s", "j", users=[], beta=1.5)
    with pytest.raises(ScenarioError):
        SliceSpec("s", "j", users=[], scenarios=[(["u1"], 0.5), (["u2"], 0.4)])
    with pytest.raises(ScenarioError):
        TenantSpec("j", slices=[], psi=0.0)


def test_path_chain_validation():
    nodes = [Node("dc", "data-center"), Node("r1", "router"), Node("ap1", "access-point")]
    links = [Link("a", "dc", "r1", 1.0), Link("b", "r1", "ap1", 1.0)]
    aps = [AccessPoint("ap1", 1.0)]
    bad = UserSpec("u", "s", [Downlink("w", "ap1")], [Path("u", "p", ("b", "a"), "w")])
    with pytest.raises(ScenarioError):
        NetworkTopology(nodes, links, aps, [bad])


def test_slice_partition_disjoint():
    s1 = SliceSpec("s1", "j1", users=[])
    s2 = SliceSpec("s2", "j2", users=[])
    t1 = TenantSpec("j1", slices=["s1"])
    t2 = TenantSpec("j2", slices=["s2"])
    validate_slice_partition([s1, s2], [t1, t2])
    with pytest.raises(ScenarioError):
        validate_slice_partition([s1, s2], [t1, TenantSpec("j2", slices=["s1", "s2"])])


def test_presence_weights():
    s = SliceSpec("s1", "j1", users=["u1", "u2"],
                  scenarios=[(["u1"], 0.25), (["u1", "u2"], 0.75)])
    w = s.presence_weights()
    assert w["u1"] == pytest.approx(1.0)
    assert w["u2"] == pytest.approx(0.75)
    assert SliceSpec("s2", "j1", users=["u3"]).presence_weights() == {"u3": 1.0}


def test_allocation_roundtrip():
    alloc = Allocation(r={("u1", "p1"): 1.5}, t={("u1", "w1"): 0.25})
    again = Allocation.from_dict(alloc.to_dict())
    assert again.r == alloc.r and again.t == alloc.t
    with pytest.raises(ScenarioError):
        Allocation(r={("u1", "p1"): -0.5})
    with pytest.raises(ScenarioError):
        Allocation(r={("u1", "p1"): float("nan")})
