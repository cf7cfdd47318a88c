import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vzsim import policy
from vzsim.observations import ContainerObservation, LoadObservation
from vzsim.policy import Action, ClusterView, ContainerView, NodeView
from vzsim.ubc import MemoryProfile, UbcTable, new_table

SMALL = MemoryProfile.from_mib("64MiB", 60, 64, 64, 66)
BIG = MemoryProfile.from_mib("128MiB", 100, 128, 128, 132)
LADDER = (SMALL, BIG)
GiB2 = 2048 * 256


def _obs(cid="c", oom_held=0, priv_held=0, oom_fail=0, priv_fail=0, prof=SMALL, t=0.0):
    table = new_table(prof)
    table.oomguarpages.held = oom_held
    table.privvmpages.held = priv_held
    table.oomguarpages.failcnt = oom_fail
    table.privvmpages.failcnt = priv_fail
    return ContainerObservation(t, "n", cid, table)


def test_score_components_and_overall():
    prev = _obs(oom_fail=3, priv_fail=7)
    curr = _obs(oom_held=SMALL.oomguarpages_barrier // 2,
                priv_held=SMALL.privvmpages_barrier // 4, oom_fail=3, priv_fail=9)
    s = policy.mem_score(prev, curr)
    assert s.normalized() == (0.0, 1.0, 0.5, 0.25)
    assert s.overall == 1.0


def test_usage_clamps_at_one():
    s = policy.mem_score(_obs(), _obs(oom_held=10**6, priv_held=10**6))
    assert s.normalized()[2:] == (1.0, 1.0)
    assert s.components[2].raw > 1


def test_zero_barrier_rejected():
    t = UbcTable()
    o = ContainerObservation(0, "n", "c", t)
    with pytest.raises(policy.BarrierZero):
        policy.mem_score(o, o)


def test_mismatched_containers_rejected():
    with pytest.raises(ValueError):
        policy.mem_score(_obs("a"), _obs("b"))


@pytest.mark.parametrize("frac, stressed", [(0.79, False), (0.80, False), (0.81, True)])
def test_threshold_is_strict(frac, stressed):
    held = round(frac * SMALL.privvmpages_barrier)
    s = policy.mem_score(_obs(), _obs(priv_held=held))
    verdict = policy.mem_overload_check(s, {"threshold": 0.80})
    assert bool(verdict) is stressed


def test_missing_threshold():
    s = policy.mem_score(_obs(), _obs())
    with pytest.raises(policy.MissingThreshold):
        policy.mem_overload_check(s, {})


@settings(max_examples=200, deadline=None)
@given(held=st.integers(0, 40000), priv=st.integers(0, 40000),
       dfail=st.integers(0, 3), dpriv=st.integers(0, 3))
def test_overall_is_bounded_max(held, priv, dfail, dpriv):
    s = policy.mem_score(_obs(), _obs(oom_held=held, priv_held=priv,
                                      oom_fail=dfail, priv_fail=dpriv))
    assert 0.0 <= s.overall <= 1.0
    assert s.overall == max(s.normalized())


def test_ar1_coefficient():
    assert policy.ar1_coefficient([0.5, 0.5, 0.5]) == pytest.approx(1.0)
    assert policy.ar1_coefficient([0.8, 0.4, 0.2]) == pytest.approx((0.32 + 0.08) / (0.64 + 0.16))
    assert policy.ar1_coefficient([0.0, 0.0]) == 1.0
    assert policy.ar1_coefficient([0.3]) == 1.0


def test_cpu_check_predicts_short_idle():
    assert policy.cpu_overload_check([0.95, 0.95], {"threshold": 0.10})
    assert not policy.cpu_overload_check([0.2, 0.3], {"threshold": 0.10})


def _view(host_cts, other_cts=(), busy_other=False, host_ram=GiB2):
    host = NodeView("hn1", host_ram, host_ram, containers=tuple(host_cts))
    other = NodeView("hn2", GiB2, GiB2, busy=busy_other, containers=tuple(other_cts))
    return ClusterView({"hn1": host, "hn2": other}, LADDER)


def _ct(cid, node="hn1", prof=SMALL, held=0):
    t = new_table(prof)
    t.oomguarpages.held = held
    return ContainerView(cid, node, t)


def test_raise_limits_in_place_when_host_has_room():
    c = _ct("ct1")
    out = policy.mem_resolve(c, _view([c]), {})
    assert (out.action, out.target, out.profile) == (Action.RAISED_LIMITS, "hn1", "128MiB")


def test_migrate_when_host_lacks_headroom():
    c = _ct("ct1")
    filler = ContainerView("fill", "hn1", new_table(MemoryProfile("f", 1, 2 * GiB2 - 64 * 256
                                                                  - 10, 10**7, 10**7)))
    out = policy.mem_resolve(c, _view([c, filler]), {})
    assert (out.action, out.source, out.target) == (Action.MIGRATION_REQUESTED, "hn1", "hn2")


def test_busy_target_is_skipped():
    c = _ct("ct1")
    filler = ContainerView("fill", "hn1", new_table(MemoryProfile("f", 1, 2 * GiB2, 10**7,
                                                                  10**7)))
    out = policy.mem_resolve(c, _view([c, filler], busy_other=True), {})
    assert out.action is Action.UNRESOLVED


def test_top_of_ladder_is_unresolved_without_replication():
    c = _ct("ct1", prof=BIG)
    out = policy.mem_resolve(c, _view([c]), {})
    assert out.action is Action.UNRESOLVED
    assert out.reason == "no larger profile"


def test_replicates_when_all_members_are_hot():
    c = _ct("ct1", prof=BIG, held=BIG.oomguarpages_barrier)
    out = policy.mem_resolve(c, _view([c]), {"replicate": True, "replication_threshold": 0.5})
    assert (out.action, out.target) == (Action.REPLICATION_REQUESTED, "hn2")


def test_node_resolve_moves_heaviest_that_fits():
    a = _ct("a", held=100)
    b = _ct("b", held=500)
    host = NodeView("hn1", 1000, 0, resident_used=900, containers=(a, b))
    other = NodeView("hn2", 1000, 0, resident_used=400)
    view = ClusterView({"hn1": host, "hn2": other})
    out = policy.node_resolve(host, view, threshold=0.8)
    assert (out.container_id, out.target) == ("a", "hn2")   # b would push hn2 to 0.9


def test_mem_policy_node_verdict():
    pol = policy.MemDefaultPolicy()
    hot = LoadObservation(0, "n", 100, 0, 90, 0, 0.0)
    cool = LoadObservation(0, "n", 100, 0, 50, 0, 0.0)
    assert pol.node_verdict([hot], {"threshold": 0.8})
    assert not pol.node_verdict([cool], {"threshold": 0.8})


def test_repository_selection_and_priority():
    policies, resolvers = policy.default_repositories()
    assert [r for r, _ in policies.active()] == ["mem"]
    policies.set_active({"cpu": "auto_regressive_order_1"})
    assert [r for r, _ in policies.active()] == ["cpu"]
    with pytest.raises(policy.UnknownPolicy):
        policies.activate("mem", "nope")

    class Low(policy.MemResolver):
        resolver_id = "low"

    class High(policy.MemResolver):
        resolver_id = "high"

    resolvers.register(Low(), priority=1)
    resolvers.register(High(), priority=99)
    assert [r.resolver_id for r in resolvers.for_resource("mem")] == ["high", "default", "low"]


def test_uncommitted_with_unlimited_guarantee():
    t = UbcTable()
    node = NodeView("n", 10, 10, containers=(ContainerView("c", "n", t),))
    assert node.uncommitted == -math.inf
