import copy

import pytest
import yaml

from vzsim import scenario
from vzsim.scenario import ScenarioError

BASE = {
    "name": "tiny",
    "nodes": [{"id": "hn1", "ram": 256, "swap": 256}],
    "profiles": [{"name": "64MiB", "oomguarpages": 60, "vmguarpages": 64,
                  "privvmpages": [64, 66]}],
    "ladder": ["64MiB"],
    "containers": [{"id": "ct1", "host": "hn1", "profile": "64MiB",
                    "web_server": {"keepalive_timeout": 5}}],
    "workloads": [{"target": "ct1", "threads": 2}],
}


def _with(**changes):
    d = copy.deepcopy(BASE)
    d.update(changes)
    return d


def test_bundled_golden_scenarios_load():
    names = scenario.bundled_scenarios()
    assert {"test0", "test1", "test2", "test3"} <= set(names)
    for name in names:
        assert scenario.load(name).name == name


@pytest.mark.parametrize("name, profile, threshold, frequency, ramp", [
    ("test0", "128MiB", 0.80, 10, 2),
    ("test1", "64MiB", 0.80, 10, 2),
    ("test2", "64MiB", 0.80, 10, 2),
    ("test3", "64MiB", 0.70, 2, 36),
])
def test_golden_parameters(name, profile, threshold, frequency, ramp):
    s = scenario.load(name)
    web = next(c for c in s.containers if c.web_server)
    assert web.profile == profile
    cfg = web.web_server
    assert (cfg.start_servers, cfg.min_spare, cfg.max_spare, cfg.max_clients) == (4, 2, 4, 128)
    assert cfg.keepalive_enabled and cfg.keepalive_timeout_ms == 5000
    (w,) = s.workloads
    assert (w.threads, w.loop_count, w.requests_per_loop, w.ramp_up) == (9, 5, 8, ramp)
    assert s.manager.states["mem/default"]["threshold"] == threshold
    assert s.manager.frequency == frequency
    assert s.profiles["64MiB"].privvmpages_limit == 66 * 256
    assert s.profiles["128MiB"].oomguarpages_barrier == 100 * 256


def test_mib_converted_to_pages():
    s = scenario.parse(BASE)
    assert s.nodes[0].ram == 256 * 256
    assert s.profiles["64MiB"].vmguarpages_barrier == 64 * 256
    assert s.containers[0].web_server.keepalive_timeout_ms == 5000
    assert s.containers[0].database is True


@pytest.mark.parametrize("data, needle", [
    ([], "mapping"),
    (_with(bogus=1), "unknown keys"),
    (_with(mode="tcp"), "mode"),
    (_with(nodes=[{"id": "a", "ram": 1}, {"id": "a", "ram": 1}]), "duplicate node"),
    (_with(ladder=["nope"]), "unknown profile"),
    (_with(containers=[{"id": "c", "host": "elsewhere", "profile": "64MiB"}]), "unknown host"),
    (_with(workloads=[{"target": "ghost"}]), "unknown target"),
    (_with(workloads=[{"target": "ct1", "threads": 0}]), "positive"),
    (_with(profiles=[{"name": "x", "oomguarpages": 1, "vmguarpages": 1,
                      "privvmpages": [2, 1]}]), "exceeds"),
    (_with(manager={"check_interval": 0}), "positive"),
    (_with(horizon=-1), "horizon"),
])
def test_invalid_scenarios(data, needle):
    with pytest.raises(ScenarioError, match=needle):
        scenario.parse(data)


def test_workload_needs_web_server():
    d = _with(containers=[{"id": "ct1", "host": "hn1", "profile": "64MiB"}])
    with pytest.raises(ScenarioError, match="no web server"):
        scenario.parse(d)


def test_overrides():
    s = scenario.parse(BASE)
    o = s.with_overrides(seed=7, mode="networked", manager=True, horizon=30)
    assert (o.seed, o.mode, o.manager.enabled, o.horizon) == (7, "networked", True, 30)
    assert o.workloads[0].rng_seed == 7
    with pytest.raises(ScenarioError):
        s.with_overrides(horizon=0)


def test_load_from_path_and_bad_yaml(tmp_path):
    good = tmp_path / "mine.scenario"
    good.write_text(yaml.safe_dump(BASE))
    assert scenario.load(str(good)).name == "tiny"
    bad = tmp_path / "bad.scenario"
    bad.write_text("nodes: [unclosed\n")
    with pytest.raises(ScenarioError):
        scenario.load(str(bad))
    with pytest.raises(ScenarioError, match="no such scenario"):
        scenario.load("does-not-exist")
