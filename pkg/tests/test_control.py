import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vzsim import control, policy
from vzsim.control import ActLater, Monitor, NodeHierarchy
from vzsim.eventloop import EventLoop
from vzsim.observations import ActionKind, ActionRequest, ContainerObservation, LoadObservation
from vzsim.ubc import MemoryProfile, new_table

SMALL = MemoryProfile.from_mib("64MiB", 60, 64, 64, 66)
BIG = MemoryProfile.from_mib("128MiB", 100, 128, 128, 132)


def _load(node, t, containers=(), ram=1000, used=0, cpu=0.0):
    cts = {}
    for cid, table in containers:
        cts[cid] = ContainerObservation(t, node, cid, table)
    return LoadObservation(t, node, ram, ram, used, 0, cpu, cts)


# hierarchy

def test_unknown_node_rejected():
    h = NodeHierarchy()
    with pytest.raises(control.UnknownNode):
        h.record_observation(_load("x", 0))


def test_ring_buffer_keeps_newest():
    h = NodeHierarchy(capacity=3)
    h.register_node("n")
    for t in range(5):
        h.record_observation(_load("n", t, [("c", new_table(SMALL))]))
    assert [o.timestamp for o in h.node_history("n")] == [2, 3, 4]
    assert [o.timestamp for o in h.container_history("c")] == [2, 3, 4]
    h.set_capacity(2)
    assert len(h.node_history("n")) == 2


def test_container_follows_migration():
    h = NodeHierarchy()
    h.register_node("a")
    h.register_node("b")
    h.record_observation(_load("a", 1, [("c", new_table(SMALL))]))
    h.record_observation(_load("b", 2, [("c", new_table(SMALL))]))
    h.record_observation(_load("a", 3))
    assert h.container_node("c") == "b"
    assert len(h.container_history("c")) == 2


def test_visitors_count_and_find_max():
    h = NodeHierarchy()
    for n in ("a", "b"):
        h.register_node(n)
    small, big = new_table(SMALL), new_table(SMALL)
    small.oomguarpages.held = 10
    big.oomguarpages.held = 99
    h.record_observation(_load("a", 0, [("c1", small)]))
    h.record_observation(_load("b", 0, [("c2", big), ("c3", new_table(SMALL))]))
    counter = control.CountingVisitor()
    assert control.visit(h, counter) == 6
    assert counter.counts == {"datacentre": 1, "node": 2, "container": 3}
    assert control.visit(h, control.MaxUsageVisitor()) == "c2"


def test_visitor_can_stop_siblings():
    h = NodeHierarchy()
    for n in ("a", "b", "c"):
        h.register_node(n)

    class FirstOnly(control.HierarchyVisitor):
        def __init__(self):
            self.seen = []

        def visit_enter(self, entity):
            if entity.kind == "node":
                self.seen.append(entity.name)
            return True

        def visit_leave(self, entity):
            return entity.kind != "node"

    v = FirstOnly()
    h.accept(v)
    assert v.seen == ["a"]


# actlater

class FakeExecutor(control.TransferExecutor):
    def __init__(self):
        self.running = {}
        self.started = []

    def start_transfer(self, req, done):
        self.started.append(req.request_id)
        self.running[req.request_id] = (req, done)

    def is_busy(self, node_id):
        return False

    def finish(self, rid, ok=True):
        _, done = self.running.pop(rid)
        done(ok, "" if ok else "boom")


def _transfer(rid, src, dst, kind=ActionKind.MIGRATE):
    return ActionRequest(kind, f"ct{rid}", src, dst, None, rid)


def test_non_transfers_rejected():
    q = ActLater(FakeExecutor())
    with pytest.raises(ValueError):
        q.submit(ActionRequest(ActionKind.ADJUST_UBC, "c", "a", "a", "p", 1))


def test_head_blocks_queue():
    ex = FakeExecutor()
    q = ActLater(ex)
    q.submit(_transfer(1, "a", "b"))
    q.submit(_transfer(2, "c", "d"))    # disjoint nodes, still waits
    assert ex.started == [1]
    ex.finish(1)
    assert ex.started == [1, 2]


def test_done_twice_is_an_error():
    ex = FakeExecutor()
    q = ActLater(ex)
    q.submit(_transfer(1, "a", "b"))
    _, done = ex.running[1]
    done(True)
    with pytest.raises(RuntimeError):
        done(True)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_random_submissions_fifo_and_disjoint(seed):
    rng = random.Random(seed)
    nodes = ["n1", "n2", "n3", "n4"]
    ex = FakeExecutor()
    q = ActLater(ex)
    submitted = []
    rid = 0
    while rid < 100 or ex.running:
        if rid < 100 and rng.random() < 0.6:
            rid += 1
            src, dst = rng.sample(nodes, 2)
            q.submit(_transfer(rid, src, dst, rng.choice([ActionKind.MIGRATE, ActionKind.REPLICATE])))
            submitted.append(rid)
        elif ex.running:
            ex.finish(rng.choice(sorted(ex.running)), ok=rng.random() < 0.8)
        in_flight = [r for r, _ in ex.running.values()]
        used = [n for r in in_flight for n in r.nodes]
        assert len(used) == len(set(used))
    assert ex.started == submitted
    assert q.dispatched == submitted


# monitor

def _monitor(profiles=(SMALL, BIG), active=None, states=None):
    h = NodeHierarchy()
    pols, res = policy.default_repositories(
        states or {("mem", "default"): {"threshold": 0.8}}, active)
    adjusted = []
    ex = FakeExecutor()
    q = ActLater(ex)
    mon = Monitor(h, pols, res, q, profiles=profiles, adjust=adjusted.append,
                  clock=lambda: 5.0)
    return h, mon, adjusted, ex


def _stressed(prof=SMALL):
    table = new_table(prof)
    table.privvmpages.held = prof.privvmpages_barrier
    return table


def test_monitor_raises_limits_once_until_fresh_observation():
    h, mon, adjusted, _ = _monitor()
    h.register_node("hn1")
    h.register_node("hn2")
    h.record_observation(_load("hn1", 1, [("ct", _stressed())], ram=512 * 1024))
    h.record_observation(_load("hn2", 1, ram=512 * 1024))
    issued = mon.run_stress_check()
    assert [r.kind for r in issued] == [ActionKind.ADJUST_UBC]
    assert adjusted[0].payload == "128MiB"
    assert mon.run_stress_check() == []             # same stale sample
    assert mon.evaluate() == mon.evaluate()         # pure


def test_monitor_migration_then_follow_up():
    h, mon, adjusted, ex = _monitor()
    h.register_node("hn1")
    h.register_node("hn2")
    fill = new_table(MemoryProfile("fill", 1, 2000 - 1, 10**6, 10**6))
    h.record_observation(_load("hn1", 1, [("ct", _stressed()), ("fill", fill)], ram=1000))
    h.record_observation(_load("hn2", 1, ram=512 * 1024))
    issued = mon.run_stress_check()
    assert [r.kind for r in issued] == [ActionKind.MIGRATE]
    assert mon.run_stress_check() == []             # pending transfer
    ex.finish(issued[0].request_id)
    kinds = [(e.kind, e.outcome) for e in mon.action_log]
    assert kinds == [("MigrationRequested", "issued"), ("Migrate", "started"),
                     ("Migrate", "succeeded"), ("RaisedLimits", "issued")]
    assert adjusted[-1].source == "hn2"


def test_monitor_logs_unresolved():
    h, mon, adjusted, _ = _monitor(profiles=(SMALL,))
    h.register_node("hn1")
    h.record_observation(_load("hn1", 1, [("ct", _stressed())]))
    assert mon.run_stress_check() == []
    assert [(e.kind, e.outcome) for e in mon.action_log] == [("Unresolved", "unresolved")]


def test_monitor_reschedules_on_interval_change():
    from vzsim.config import ConfigManager, ConfigTree
    loop = EventLoop()
    h, mon, _, _ = _monitor()
    cfg = ConfigManager(ConfigTree({"server/policy/overload": {"check_interval": 12}}))
    mon.clock = lambda: loop.now / 1000
    mon.attach(loop, cfg)
    # the change lands after the old next-check time, so the next check is now
    loop.call_at(30_000, lambda: cfg.set_value("server/policy/overload", "check_interval", 5))
    loop.run_until(50_000)
    assert mon.check_times == [12, 24, 30, 35, 40, 45, 50]
