import csv
import dataclasses

import pytest

from vzsim import agent, report, scenario
from vzsim.config import ConfigTree
from vzsim.eventloop import EventLoop
from vzsim.observations import ActionKind, ActionRequest, CommandError
from vzsim.simkernel.kernel import InvariantViolation, SimKernel, boot_container
from vzsim.simulation import Simulation, run_scenario
from vzsim.ubc import MemoryProfile, mib_to_pages

SMALL = MemoryProfile.from_mib("64MiB", 60, 64, 64, 66)
BIG = MemoryProfile.from_mib("128MiB", 100, 128, 128, 132)


def _two_nodes():
    loop = EventLoop()
    k = SimKernel(clock=lambda: loop.now)
    k.add_node("a", mib_to_pages(512), 0)
    k.add_node("b", mib_to_pages(512), 0)
    ct = k.add_container("ct", "a", SMALL)
    boot_container(k, ct)
    return loop, k, ct


def test_migration_moves_container_after_transfer_time():
    loop, k, ct = _two_nodes()
    mig = agent.Migrator(k, loop, checkpoint_pages=256, transfer_rate=256)
    results = []
    mig.migrate(ct, "b", lambda ok, why: results.append((ok, why)))
    assert k.nodes["a"].busy_with_transfer and k.nodes["b"].busy_with_transfer
    with pytest.raises(CommandError, match="transferring"):
        mig.migrate(ct, "b", lambda ok, why: None)
    pages = ct.ubc.oomguarpages.held                # includes the checkpoint process
    loop.run_until(pages * 1000 // 256 + 1)
    assert results == [(True, "")]
    assert ct.host == "b"
    assert not k.nodes["a"].busy_with_transfer
    assert k.nodes["a"].resident_used == 0
    assert not any(p.name == "vzcheckpoint" for p in ct.processes.values())
    k.check_invariants()


def test_migration_fails_without_checkpoint_headroom():
    loop, k, ct = _two_nodes()
    mig = agent.Migrator(k, loop, checkpoint_pages=mib_to_pages(80))
    results = []
    mig.migrate(ct, "b", lambda ok, why: results.append((ok, why)))
    assert results == [(False, "insufficient memory for checkpoint")]
    assert ct.host == "a"
    assert not k.nodes["a"].busy_with_transfer
    assert ct.ubc.privvmpages.failcnt == 1


def test_agent_adjust_and_unknown_container():
    loop, k, ct = _two_nodes()
    ag = agent.NodeAgent("a", k, agent.Migrator(k, loop), {"128MiB": BIG})
    done = []
    ag.execute(ActionRequest(ActionKind.ADJUST_UBC, "ct", "a", "a", "128MiB"),
               lambda ok, why: done.append(ok))
    assert done == [True]
    assert ct.ubc.privvmpages.barrier == BIG.privvmpages_barrier
    with pytest.raises(CommandError) as e:
        ag.execute(ActionRequest(ActionKind.ADJUST_UBC, "zz", "a", "a", "128MiB"),
                   lambda ok, why: None)
    assert e.value.code == "UnknownContainer"


def test_agent_observation_reports_tables():
    loop, k, ct = _two_nodes()
    ag = agent.NodeAgent("a", k, agent.Migrator(k, loop), {})
    obs = ag.observe(2000)
    assert obs.timestamp == 2.0
    assert obs.containers["ct"].ubc == ct.ubc
    assert obs.containers["ct"].ubc is not ct.ubc          # a snapshot
    assert obs.resident_used == k.nodes["a"].resident_used


def test_same_seed_same_trace():
    spec = scenario.load("test1").with_overrides(horizon=20)
    a, b = run_scenario(spec), run_scenario(spec)
    assert a.trace == b.trace
    c = run_scenario(spec.with_overrides(seed=99))
    assert c.trace != a.trace


def test_golden_runs_finish_before_horizon():
    for name in ("test0", "test1", "test2", "test3"):
        res = run_scenario(scenario.load(name))
        assert len(res.outcomes) == 360
        assert res.end_ms < res.spec.horizon * 1000


def test_leak_fault_is_caught():
    with pytest.raises(InvariantViolation):
        Simulation(scenario.load("test0"), inject_fault="leak").run()


def test_test3_migrates_then_raises():
    res = run_scenario(scenario.load("test3"))
    issued = res.issued_actions()
    assert [a[0] for a in issued] == ["MigrationRequested", "RaisedLimits"]
    assert issued[0][2:4] == ("hn1", "hn2")
    assert issued[1][2] == "hn2"


def test_replication_when_ladder_is_exhausted():
    base = scenario.load("test2")
    # without keep-alive each request opens a new connection, so the replica gets a share
    containers = tuple(
        dataclasses.replace(c, web_server=dataclasses.replace(c.web_server,
                                                              keepalive_enabled=False))
        if c.web_server else c for c in base.containers)
    spec = dataclasses.replace(
        base, ladder=("64MiB",), containers=containers,
        manager=dataclasses.replace(base.manager, replicate=True, replication_threshold=0.5))
    res = run_scenario(spec)
    kinds = [a[0] for a in res.issued_actions()]
    assert "ReplicationRequested" in kinds
    assert any(c for c in res.trace if c[1] == "replicate_done")
    served_by = {o.container_id for o in res.outcomes if o.ok}
    assert served_by == {"ct1891", "ct1891-r1"}


def test_networked_mode_handshakes_and_reports():
    sim = Simulation(scenario.load("test2").with_overrides(mode="networked"))
    res = sim.run()
    assert all(ep.ready for ep in sim.endpoints.values())
    kinds = {k for _, _, k in sim.server.received}
    assert {"Register", "GetConfigSection", "AddConfigObserver", "ReportLoad",
            "CommandResult"} <= kinds
    assert [a[0] for a in res.issued_actions()] == ["RaisedLimits"]


def test_runtime_override_changes_sampling_period():
    sim = Simulation(scenario.load("test2").with_overrides(horizon=60))
    sim.apply_layer_at(20, ConfigTree({"client": {"frequency": 4}}))
    sim.run()
    assert sim.samplers["hn1"].period_ms == 4000


def test_write_run_artifacts(tmp_path):
    res = run_scenario(scenario.load("test2"))
    s = report.write_run(res, tmp_path)
    for name in ("summary.txt", "summary.csv", "summary.json", "trace.csv", "requests.csv",
                 "series.csv", "actions.csv", "plot.csv"):
        assert (tmp_path / name).is_file()
    with open(tmp_path / "requests.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == s.requests == 360
    times = [int(r["response_ms"]) for r in rows]
    assert s.max_ms == max(times) and s.min_ms == min(times)
    assert s.avg_ms == pytest.approx(sum(times) / len(times))
    loaded = report.load_summary(tmp_path)
    assert loaded["throughput"] == s.throughput
    with pytest.raises(report.MissingArtifacts):
        report.load_summary(tmp_path / "nothing")


def test_throughput_definition():
    from vzsim.simkernel.prefork import RequestOutcome
    outs = [RequestOutcome(0, 500, True), RequestOutcome(100, 2000, True)]
    assert report.throughput(outs) == pytest.approx(1.0)
    assert report.throughput([]) == 0.0
