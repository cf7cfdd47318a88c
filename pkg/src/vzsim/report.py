"""Run summaries, CSV artifacts and cross-run comparison."""

from __future__ import annotations

import bisect
import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .control import ACTION_LOG_HEADER
from .simkernel.prefork import RequestOutcome
from .simulation import SERIES_HEADER, TRACE_HEADER, RunResult

SUMMARY_FIELDS = ("requests", "avg_ms", "min_ms", "max_ms", "stddev_ms", "err_pct",
                  "throughput", "fail_count")
PLOT_HEADER = ["n", "completed_ms", "response_ms", "ok", "running_avg_ms",
               "running_median_ms", "running_stddev_ms", "running_throughput"]


class MissingArtifacts(FileNotFoundError):
    pass


@dataclass(frozen=True)
class Summary:
    scenario: str
    requests: int
    avg_ms: float
    min_ms: int
    max_ms: int
    stddev_ms: float
    err_pct: float
    throughput: float           # completed requests per second
    fail_count: int
    actions: dict

    def as_dict(self) -> dict:
        return asdict(self)


def throughput(outcomes: Sequence[RequestOutcome]) -> float:
    """Requests per second between the first request sent and the last response."""
    if not outcomes:
        return 0.0
    start = min(o.issued_at for o in outcomes)
    end = max(o.completed_at for o in outcomes)
    if end <= start:
        return math.inf
    return len(outcomes) * 1000.0 / (end - start)


def summarize(scenario: str, outcomes: Sequence[RequestOutcome], fail_count: int,
              action_log: Iterable = ()) -> Summary:
    times = [o.response_ms for o in outcomes]
    actions: dict[str, int] = {}
    for e in action_log:
        if e.outcome == "issued":
            actions[e.kind] = actions.get(e.kind, 0) + 1
    if not times:
        return Summary(scenario, 0, 0.0, 0, 0, 0.0, 0.0, 0.0, fail_count, actions)
    errors = sum(1 for o in outcomes if not o.ok)
    return Summary(scenario, len(times), statistics.fmean(times), min(times), max(times),
                   statistics.pstdev(times), 100.0 * errors / len(times),
                   throughput(outcomes), fail_count, actions)


def summarize_run(result: RunResult) -> Summary:
    return summarize(result.spec.name, result.outcomes, result.fail_count, result.action_log)


def plot_rows(outcomes: Sequence[RequestOutcome]) -> list[list]:
    """Per-response series with running statistics, in completion order."""
    rows = []
    ordered = sorted(outcomes, key=lambda o: (o.completed_at, o.seq))
    if not ordered:
        return rows
    start = min(o.issued_at for o in ordered)
    sorted_times: list[int] = []
    total = 0.0
    total_sq = 0.0
    for n, o in enumerate(ordered, 1):
        t = o.response_ms
        bisect.insort(sorted_times, t)
        total += t
        total_sq += t * t
        mean = total / n
        var = max(0.0, total_sq / n - mean * mean)
        mid = n // 2
        median = sorted_times[mid] if n % 2 else (sorted_times[mid - 1] + sorted_times[mid]) / 2
        elapsed = o.completed_at - start
        rate = n * 1000.0 / elapsed if elapsed > 0 else 0.0
        rows.append([n, o.completed_at, t, int(o.ok), f"{mean:.3f}", median,
                     f"{math.sqrt(var):.3f}", f"{rate:.4f}"])
    return rows


def format_summary(s: Summary) -> str:
    lines = [
        f"scenario    {s.scenario}",
        f"requests    {s.requests}",
        f"Avg         {s.avg_ms:.1f} ms",
        f"Min         {s.min_ms} ms",
        f"Max         {s.max_ms} ms",
        f"StdDev      {s.stddev_ms:.1f} ms",
        f"Err%        {s.err_pct:.2f}",
        f"Throughput  {s.throughput:.3f} req/s",
        f"FailCount   {s.fail_count}",
    ]
    if s.actions:
        lines.append("actions     " + ", ".join(f"{k}={v}" for k, v in sorted(s.actions.items())))
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_run(result: RunResult, out_dir: str | Path) -> Summary:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = summarize_run(result)
    (out / "summary.txt").write_text(format_summary(s), encoding="utf-8")
    _write_csv(out / "summary.csv", ("scenario",) + SUMMARY_FIELDS,
               [[s.scenario] + [getattr(s, f) for f in SUMMARY_FIELDS]])
    payload = s.as_dict()
    payload["expect"] = dict(result.spec.expect)
    payload["seed"] = result.spec.seed
    payload["mode"] = result.spec.mode
    (out / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    _write_csv(out / "trace.csv", TRACE_HEADER, result.trace)
    _write_csv(out / "requests.csv",
               ["seq", "thread", "container", "issued_ms", "completed_ms", "response_ms", "ok"],
               ([o.seq, o.client, o.container_id, o.issued_at, o.completed_at, o.response_ms,
                 int(o.ok)] for o in sorted(result.outcomes, key=lambda o: o.seq)))
    _write_csv(out / "series.csv", SERIES_HEADER, result.series)
    _write_csv(out / "actions.csv", ACTION_LOG_HEADER, (e.as_row() for e in result.action_log))
    _write_csv(out / "plot.csv", PLOT_HEADER, plot_rows(result.outcomes))
    return s


def load_summary(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise MissingArtifacts(f"{run_dir}: no summary.json")
    return json.loads(path.read_text(encoding="utf-8"))


# comparison

_METRICS = {"throughput": "throughput", "fail_count": "fail_count", "err_pct": "err_pct",
            "max_ms": "max_ms", "avg_ms": "avg_ms"}


@dataclass(frozen=True)
class Check:
    subject: str
    metric: str
    relation: str           # "<" or ">"
    other: str
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs < self.rhs if self.relation == "<" else self.lhs > self.rhs

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.metric}({self.subject})={self.lhs:g} {self.relation} "
                f"{self.metric}({self.other})={self.rhs:g}")


def compare(run_dirs: Sequence[str | Path]) -> tuple[list[str], list[Check]]:
    """Pairwise orderings, plus the expectations each scenario declares."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    runs = {}
    for d in run_dirs:
        s = load_summary(d)
        runs[s["scenario"]] = s
    lines = []
    names = list(runs)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            for metric in ("throughput", "fail_count", "err_pct"):
                x, y = runs[a][metric], runs[b][metric]
                rel = "<" if x < y else ">" if x > y else "=="
                lines.append(f"{metric}: {a}={x:g} {rel} {b}={y:g}")
    checks = []
    for name, s in runs.items():
        for metric, rels in sorted((s.get("expect") or {}).items()):
            if metric not in _METRICS:
                continue
            for key, rel in (("less_than", "<"), ("greater_than", ">")):
                for other in rels.get(key, ()):
                    if other in runs:
                        checks.append(Check(name, metric, rel, other, s[_METRICS[metric]],
                                            runs[other][_METRICS[metric]]))
    return lines, checks
