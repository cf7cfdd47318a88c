import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vzsim.simkernel import kernel as kmod
from vzsim.simkernel import memory
from vzsim.simkernel.kernel import SimKernel, SimulationHalted
from vzsim.simkernel.memory import (ContainerState, HardwareNodeState, ProcessRole,
                                    SimProcess)
from vzsim.ubc import MemoryProfile, UbcTable, mib_to_pages


def _profile(name, oomguar, priv=10**6):
    return MemoryProfile(name, oomguar, max(oomguar, 1), priv, priv)


def test_touch_evicts_least_recent_first():
    node = HardwareNodeState("n", ram=10, swap=10)
    old = SimProcess(1, None, private_pages=6)
    new = SimProcess(2, None, private_pages=6)
    memory.attach_process(node, None, old)
    memory.attach_process(node, None, new)
    memory.touch_pages(node, None, old, 6, now=1)
    res = memory.touch_pages(node, None, new, 6, now=2)
    assert res is memory.TouchResult.SWAPPED_OTHERS
    assert (old.resident_pages, old.swapped_pages) == (4, 2)
    assert new.resident_pages == 6
    assert (node.resident_used, node.swap_used) == (10, 2)


def test_touch_reports_oom_when_pools_full():
    node = HardwareNodeState("n", ram=4, swap=0)
    p = SimProcess(1, None, private_pages=5)
    memory.attach_process(node, None, p)
    assert memory.touch_pages(node, None, p, 5) is memory.TouchResult.OOM_TRIGGERED
    assert node.resident_used == 0


def test_badness_factors():
    base = SimProcess(1, "c", virtual_pages=400)
    assert memory.oom_badness(base, 0).points == 400
    root = SimProcess(2, "c", virtual_pages=400, is_root=True)
    assert memory.oom_badness(root, 0).points == 100
    nice = SimProcess(3, "c", virtual_pages=400, niceness=10)
    assert memory.oom_badness(nice, 0).points == 600
    aged = SimProcess(4, "c", virtual_pages=400, start_time=0)
    assert memory.oom_badness(aged, 0, now=1000).points == 200   # 1 + log2(2)
    parent = SimProcess(5, "c", virtual_pages=400)
    assert memory.oom_badness(parent, 0, children_pages=100).points == 450


def test_init_is_immune():
    init = SimProcess(1, "c", role=ProcessRole.INIT)
    with pytest.raises(memory.ImmuneProcess):
        memory.oom_badness(init, 5)


def _build(specs):
    """specs: list of (oomguar, [process sizes])."""
    node = HardwareNodeState("n", ram=10**6, swap=0)
    cts = []
    pid = 1
    for i, (guar, sizes) in enumerate(specs):
        ct = ContainerState(f"c{i}", "n", UbcTable())
        ct.ubc.oomguarpages.barrier = guar
        node.tables[ct.container_id] = ct.ubc
        for size in sizes:
            p = SimProcess(pid, ct.container_id, virtual_pages=size, private_pages=size)
            pid += 1
            memory.attach_process(node, ct, p)
            ct.ubc.privvmpages.add(size)
            memory.touch_pages(node, ct, p, size)
        cts.append(ct)
    return node, cts


container_specs = st.lists(
    st.tuples(st.integers(0, 300), st.lists(st.integers(1, 120), min_size=1, max_size=5)),
    min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(specs=container_specs)
def test_victim_has_maximal_excess(specs):
    node, cts = _build(specs)
    excess = {c.container_id: c.ubc.oom_usage_pages() - c.ubc.oomguarpages.barrier
              for c in cts}
    eligible = {cid: e for cid, e in excess.items() if e >= 0}
    fails_before = {c.container_id: c.ubc.oomguarpages.failcnt for c in cts}
    if not eligible:
        with pytest.raises(memory.NoKillableProcess):
            memory.oom_kill(node, cts)
        return
    owner = {pid: c for c in cts for pid in c.processes}
    pid = memory.oom_kill(node, cts)
    victim_ct = owner[pid]
    assert excess[victim_ct.container_id] == max(eligible.values())
    assert excess[victim_ct.container_id] >= 0
    for c in cts:
        bumped = c.ubc.oomguarpages.failcnt - fails_before[c.container_id]
        assert bumped == (1 if c is victim_ct else 0)
    assert pid not in node.processes


def _kernel(ram_mib, swap_mib=0):
    k = SimKernel()
    k.add_node("n", mib_to_pages(ram_mib), mib_to_pages(swap_mib))
    return k


def test_kernel_spawn_charges_and_touches():
    k = _kernel(64)
    ct = k.add_container("c", "n", MemoryProfile.from_mib("p", 10, 20, 20, 20))
    p = k.spawn(ct, "x", ProcessRole.OTHER, virtual_pages=512, private_pages=256)
    assert p is not None
    assert ct.ubc.privvmpages.held == 256
    assert ct.ubc.oomguarpages.held == 256
    assert k.nodes["n"].resident_used == 256
    k.check_invariants()
    k.exit_process(ct, p)
    assert ct.ubc.privvmpages.held == 0
    assert k.nodes["n"].resident_used == 0
    k.check_invariants()


def test_kernel_spawn_denied_returns_none():
    k = _kernel(64)
    ct = k.add_container("c", "n", MemoryProfile.from_mib("p", 1, 1, 1, 1))
    assert k.spawn(ct, "x", ProcessRole.OTHER, virtual_pages=512, private_pages=512) is None
    assert ct.ubc.privvmpages.failcnt == 1
    assert not ct.processes


def test_overcommitted_node_kills_over_guarantee_container():
    k = _kernel(8)
    greedy = k.add_container("greedy", "n", MemoryProfile.from_mib("g", 1, 8, 8, 8))
    modest = k.add_container("modest", "n", MemoryProfile.from_mib("m", 4, 8, 8, 8))
    kills = []
    k.on_exit("greedy", lambda ct, p, why: kills.append((ct.container_id, why)))
    k.on_exit("modest", lambda ct, p, why: kills.append((ct.container_id, why)))
    k.spawn(modest, "m", ProcessRole.OTHER, virtual_pages=768, private_pages=768)
    k.spawn(greedy, "g1", ProcessRole.OTHER, virtual_pages=1024, private_pages=1024)
    k.spawn(greedy, "g2", ProcessRole.OTHER, virtual_pages=512, private_pages=512)
    assert kills == [("greedy", "oom")]
    assert greedy.ubc.oomguarpages.failcnt == 1
    assert modest.ubc.oomguarpages.failcnt == 0
    k.check_invariants()


def test_no_killable_process_halts():
    k = _kernel(1)
    ct = k.add_container("c", "n", MemoryProfile.from_mib("p", 4, 4, 4, 4))
    k.spawn(ct, "a", ProcessRole.OTHER, virtual_pages=200, private_pages=200)
    with pytest.raises(SimulationHalted):
        k.spawn(ct, "b", ProcessRole.OTHER, virtual_pages=200, private_pages=200)


def test_invariant_check_catches_leak():
    k = _kernel(16)
    ct = k.add_container("c", "n", MemoryProfile.from_mib("p", 8, 8, 8, 8))
    k.spawn(ct, "a", ProcessRole.OTHER, virtual_pages=10, private_pages=10)
    k.nodes["n"].resident_used += 1
    with pytest.raises(kmod.InvariantViolation):
        k.check_invariants()


def test_boot_container_sizes():
    k = _kernel(256)
    ct = k.add_container("c", "n", MemoryProfile.from_mib("p", 100, 128, 128, 132))
    kmod.boot_container(k, ct, [kmod.DATABASE_SERVICE])
    assert ct.ubc.privvmpages.held == mib_to_pages(1 + 1 + 1 + 3 + 10)
    assert any(p.role is ProcessRole.INIT for p in ct.processes.values())


def test_rehost_moves_pages():
    k = SimKernel()
    k.add_node("a", 1000, 0)
    k.add_node("b", 1000, 1000)
    ct = k.add_container("c", "a", _profile("p", 100))
    k.spawn(ct, "x", ProcessRole.OTHER, virtual_pages=300, private_pages=300)
    memory.rehost(ct, k.nodes["a"], k.nodes["b"])
    assert ct.host == "b"
    assert k.nodes["a"].resident_used == 0
    assert k.nodes["b"].resident_used == 300
    k.check_invariants()
