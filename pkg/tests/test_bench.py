import csv
import io
import json
import statistics
import time

import pytest
from click.testing import CliRunner
from hypothesis import given, settings
from hypothesis import strategies as st

from edgestream.agent import Agent, AgentConfig
from edgestream.bench import (
    BenchReport, CompareError, SourceConfig, collect, compare, describe, expected_outputs, load_csv,
    load_query, produce, synth_elec,
)
from edgestream.bench.report import box_rows, compare_sets, pct_diff
from edgestream.cli import main
from edgestream.codec import decode_tuple
from edgestream.coordinator import CoordinatorConfig, CoordinatorServer
from edgestream.errors import SchemaError
from edgestream.model import ELEC_SCHEMA
from edgestream.pacing import TokenBucket, tuple_budget


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t

    def sleep(self, s):
        self.t += s


# -- synthetic data ---------------------------------------------------------------

def test_synth_has_exact_row_count(tmp_path):
    path = synth_elec(45_312, 7, tmp_path / "elec.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(ELEC_SCHEMA.names)
    assert len(rows) - 1 == 45_312


def test_synth_is_deterministic_per_seed():
    assert synth_elec(500, 11) == synth_elec(500, 11)
    assert synth_elec(500, 11) != synth_elec(500, 12)


def test_single_synthetic_row_decodes(tmp_path):
    path = synth_elec(1, 3, tmp_path / "one.csv")
    payloads, skipped = load_csv(path)
    assert skipped == 0 and len(payloads) == 1
    t = decode_tuple(payloads[0], ELEC_SCHEMA)
    row = next(csv.DictReader(open(path, newline="")))
    assert t.values == (row["Date"], int(row["Day"]), int(row["Period"]), *(float(row[n]) for n in ELEC_SCHEMA.names[3:]))


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        synth_elec(0)


def test_malformed_rows_are_skipped_and_counted(tmp_path):
    text = synth_elec(4, 1).splitlines()
    text.insert(2, "1996-05-07,x,1,0.1,0.1,0.1,0.1,0.1")  # Day is not an integer
    text.insert(3, "1996-05-07,1,1")  # too few columns
    path = tmp_path / "bad.csv"
    path.write_text("\n".join(text) + "\n")
    payloads, skipped = load_csv(path)
    assert (len(payloads), skipped) == (4, 2)


def test_csv_arity_must_match_schema(tmp_path):
    path = tmp_path / "narrow.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        load_csv(path)


# -- pacing -----------------------------------------------------------------------

def test_source_config_validation_and_budget():
    with pytest.raises(ValueError):
        SourceConfig("x.csv", rate=0)
    assert SourceConfig("x.csv", rate=125, duration=10).budget == 1250
    assert SourceConfig("x.csv", rate=125, count=7).budget == 7
    assert tuple_budget(125, None, None) is None


@pytest.mark.parametrize("rate", [125, 500, 1000])
def test_token_bucket_emits_rate_times_duration(rate):
    clock = FakeClock()
    bucket = TokenBucket(rate, clock=clock, sleep=clock.sleep)
    n = 0
    while True:
        bucket.take()
        if clock.t > 10.0:
            break
        n += 1
    assert abs(n - rate * 10) <= 1


def test_token_bucket_capacity_bounds_a_burst():
    clock = FakeClock()
    bucket = TokenBucket(100, clock=clock, sleep=clock.sleep)
    clock.t = 60.0  # a long stall accrues at most one second of tokens
    start = clock.t
    for _ in range(100):
        bucket.take()
    assert clock.t == start
    bucket.take()
    assert clock.t > start


def test_token_bucket_wall_clock_accuracy():
    bucket = TokenBucket(500)
    t0 = time.monotonic()
    for _ in range(500):
        bucket.take()
    assert 500 / (time.monotonic() - t0) == pytest.approx(500, rel=0.01)


# -- statistics and comparison -----------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1e6, allow_nan=False), min_size=2, max_size=200))
def test_describe_matches_statistics_module(xs):
    d = describe(xs)
    assert d["count"] == len(xs)
    assert d["mean"] == pytest.approx(statistics.fmean(xs), rel=1e-9, abs=1e-9)
    assert d["stddev"] == pytest.approx(statistics.stdev(xs), rel=1e-6, abs=1e-6)
    q1, q2, q3 = statistics.quantiles(xs, n=4, method="inclusive")
    assert (d["q1"], d["p50"], d["q3"]) == pytest.approx((q1, q2, q3), rel=1e-9, abs=1e-9)
    assert (d["min"], d["max"]) == (min(xs), max(xs))


def report(mode="native", rate=125.0, opt=50.0, query="evaluation", **kw):
    return BenchReport(mode=mode, rate=rate, query=query, query_id="q1",
                       opt_us={"op0": {"count": 3, "mean": opt, "p50": opt}},
                       busy_fraction={"op0": {"mean": 0.1}},
                       throughput_tps={"op0": rate, "query": rate},
                       latency_ms={"count": 3, "mean": 2.0, "p50": 2.0, "min": 1, "q1": 1.5, "q3": 2.5,
                                   "max": 3}, **kw)


def test_identical_reports_compare_to_zero():
    rows = compare(report(), report())
    assert rows and all(r["diff_pct"] == 0.0 for r in rows)


def test_compare_uses_relative_difference():
    native, sandbox = report(opt=40.0), report(mode="sandbox", opt=50.0)
    row = next(r for r in compare(native, sandbox) if r["metric"] == "opt_mean_us[op0]")
    assert row["diff_pct"] == pytest.approx((50.0 - 40.0) / 40.0 * 100)
    assert pct_diff(0.0, 1.0) is None


def test_compare_refuses_mismatched_runs():
    with pytest.raises(CompareError):
        compare(report(rate=125.0), report(rate=500.0))
    with pytest.raises(CompareError):
        compare(report(), report(query="other"))
    with pytest.raises(CompareError):
        compare_sets([report(rate=125.0)], [report(rate=500.0)])


def test_comparison_has_one_block_per_rate():
    base = [report(rate=r) for r in (1000.0, 125.0, 500.0)]
    cand = [report(mode="sandbox", rate=r) for r in (125.0, 500.0, 1000.0)]
    rows = compare_sets(base, cand)
    assert [r["rate"] for r in rows][:: len(rows) // 3] == [125.0, 500.0, 1000.0]
    box = box_rows(base + cand)
    assert {(r["mode"], r["rate"]) for r in box} == {(m, r) for m in ("native", "sandbox")
                                                      for r in (125.0, 500.0, 1000.0)}


def write_run(tmp_path, windows, opt_rows, latency, stages=None, emitted=10):
    (tmp_path / "run.json").write_text(json.dumps({
        "mode": "native", "rate": 125, "query": "evaluation", "query_id": "q1", "duration_s": 1,
        "stages": stages or [["source", "p"], ["op0", "a"], ["op1", "b"], ["sink", "z"]],
        "source": {"emitted": emitted, "achieved_rate": 125.0}, "expected_delivered": 4}))
    with open(tmp_path / "windows-x.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "query_id", "stage", "window_start", "window_end", "tuples_in", "tuples_out",
                    "opt_sum", "queue_depth", "busy_fraction", "first_ts", "last_ts"])
        w.writerows(windows)
    with open(tmp_path / "opt-x.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "stage", "mode", "t_before_ns", "t_after_ns", "opt_ns"])
        w.writerows(opt_rows)
    with open(tmp_path / "latency-x.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "ingress_ts_ns", "egress_ts_ns", "latency_ns"])
        w.writerows(latency)


def test_collect_accounts_for_every_emitted_tuple(tmp_path):
    s = 1_000_000_000
    write_run(tmp_path, [
        ["p", "q1", "source", 0, s, 0, 10, 0, 0, 0.0, 0, 9 * s // 10],
        ["a", "q1", "op0", 0, s, 10, 5, 1000, 0, 1e-6, 0, 9 * s // 10],
        ["b", "q1", "op1", 0, s, 5, 5, 500, 0, 5e-7, s // 10, 9 * s // 10],
        ["z", "q1", "sink", 0, s, 4, 0, 0, 0, 0.0, s // 10, 9 * s // 10],
        ["z", "q2", "sink", 0, s, 99, 0, 0, 0, 0.0, 0, s],  # another query
    ], [["q1", "op0", "native", 0, 2000, 2000], ["q1", "op0", "native", 0, 4000, 4000]],
        [["q1", 0, 3_000_000, 3_000_000], ["q1", 0, 1_000_000, 1_000_000]])
    rep = collect(tmp_path)
    assert (rep.emitted, rep.delivered, rep.filtered, rep.lost) == (10, 4, 5, 1)
    assert rep.emitted == rep.delivered + rep.filtered + rep.lost
    assert rep.opt_us["op0"]["mean"] == pytest.approx(3.0)
    assert rep.latency_ms["mean"] == pytest.approx(2.0)
    assert rep.throughput_tps["op0"] == pytest.approx(9 / 0.9)
    assert not rep.partial
    assert BenchReport.load(tmp_path) == rep
    assert (tmp_path / "stages.csv").read_text().startswith("stage,node_id,tuples_in")


def test_collect_marks_missing_stages_partial(tmp_path):
    write_run(tmp_path, [["a", "q1", "op0", 0, 10, 1, 1, 0, 0, 0.0, 1, 2]], [], [])
    rep = collect(tmp_path)
    assert rep.partial and set(rep.missing) == {"source", "op1", "sink"}


# -- end to end -------------------------------------------------------------------

@pytest.fixture
def local_cluster(tmp_path):
    server = CoordinatorServer(CoordinatorConfig(listen="127.0.0.1:0", heartbeat_interval=0.2)).start()
    started = []

    def spawn(**kw):
        on_deliver = kw.pop("on_deliver", None)
        a = Agent(AgentConfig(server.url, metrics_dir=str(tmp_path), **kw), on_deliver=on_deliver).start()
        started.append(a)
        return a

    yield server, spawn
    for a in started:
        if not a._stop.is_set():
            a.stop()
    server.stop()


def test_full_file_is_emitted_then_ends(local_cluster, tmp_path):
    server, spawn = local_cluster
    spawn(node_id="w1"), spawn(node_id="w2")
    got = []
    sink = spawn(node_id="z", kind="sink", sink_name="bench-sink", on_deliver=lambda q, p: got.append(p))
    path = synth_elec(45_312, 7, tmp_path / "elec.csv")
    cfg = SourceConfig(str(path), rate=60_000)
    summary = produce(cfg, server.url, query=load_query(), mode="native")
    assert summary["emitted"] == 45_312 and summary["skipped_rows"] == 0
    payloads, _ = load_csv(path)
    expected = expected_outputs(load_query(), payloads)
    assert _wait(lambda: all(s.completed for s in sink.stages.values()) and sink.stages, 30)
    assert len(got) == len(expected)
    assert [p[:4] + p[12:] for p in got] == [p[:4] + p[12:] for p in expected]


def test_backpressure_slows_the_source_without_loss(local_cluster, tmp_path):
    server, spawn = local_cluster
    for i in (1, 2):
        spawn(node_id=f"w{i}", queue_size=20, socket_buffer=4096)
    got = []

    def slow(q, p):
        got.append(p)
        time.sleep(0.004)  # at most ~250 T/s

    spawn(node_id="z", kind="sink", sink_name="out", on_deliver=slow, queue_size=20,
                 socket_buffer=4096)
    path = synth_elec(300, 5, tmp_path / "elec.csv")
    query = {"source": "elec", "sink": {"name": "out"}, "execution": "native",
             "operators": [{"kind": "projection", "keep": ["Date", "Period"]}]}
    cfg = SourceConfig(str(path), rate=1000, count=2000, loop=True)
    summary = produce(cfg, server.url, query=query, mode="native", timeout=60, queue_size=20, socket_buffer=4096)
    assert summary["achieved_rate"] < 1000 * 0.6
    assert _wait(lambda: len(got) == 2000, 20)
    assert summary["emitted"] == len(got) == 2000


def _wait(pred, timeout):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(0.05)
    return pred()


# -- CLI --------------------------------------------------------------------------

def test_cli_synth_is_deterministic(tmp_path):
    runner = CliRunner()
    a = runner.invoke(main, ["bench", "synth", "--rows", "5", "--seed", "2"])
    b = runner.invoke(main, ["bench", "synth", "--rows", "5", "--seed", "2"])
    assert a.exit_code == 0 and a.output == b.output
    assert len(list(csv.reader(io.StringIO(a.output)))) == 6


def test_cli_compare_refuses_different_rates(tmp_path):
    for name, rep in (("a", report(rate=125.0)), ("b", report(mode="sandbox", rate=500.0))):
        (tmp_path / name).mkdir()
        (tmp_path / name / "report.json").write_text(json.dumps(rep.to_doc()))
    result = CliRunner().invoke(main, ["bench", "compare", str(tmp_path / "a"), str(tmp_path / "b")])
    assert result.exit_code != 0 and "refused" in result.output


def test_cli_compare_prints_per_rate_table(tmp_path):
    for name, rep in (("a", report(rate=125.0)), ("b", report(mode="sandbox", rate=125.0, opt=60.0))):
        (tmp_path / name).mkdir()
        (tmp_path / name / "report.json").write_text(json.dumps(rep.to_doc()))
    result = CliRunner().invoke(main, ["bench", "compare", str(tmp_path / "a"), str(tmp_path / "b"),
                                       "--out", str(tmp_path / "cmp")])
    assert result.exit_code == 0, result.output
    assert "opt_mean_us[op0]" in result.output and "20.000" in result.output
    assert (tmp_path / "cmp" / "compare.csv").exists() and (tmp_path / "cmp" / "box.csv").exists()


def test_cli_agent_requires_a_coordinator(monkeypatch):
    monkeypatch.delenv("EDGESTREAM_COORDINATOR", raising=False)
    result = CliRunner().invoke(main, ["agent"])
    assert result.exit_code == 2
