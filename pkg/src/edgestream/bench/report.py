"""Turning raw run files into reports, and reports into comparison tables.

Raw files written by agents (one set per node, ``<kind>-<node>.csv``):

``opt``      query_id, stage, mode, t_before_ns, t_after_ns, opt_ns
``windows``  node_id, query_id, stage, window_start, window_end, tuples_in, tuples_out,
             opt_sum, queue_depth, busy_fraction, first_ts, last_ts
``latency``  query_id, ingress_ts_ns, egress_ts_ns, latency_ns

plus ``run.json`` from the runner.  A report is written as ``report.json``
with ``stages.csv`` alongside.
"""
from __future__ import annotations

import csv
import glob
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

STAGE_COLUMNS = ("stage", "node_id", "tuples_in", "tuples_out", "throughput_tps", "opt_count", "opt_mean_us",
                 "opt_p50_us", "opt_p95_us", "opt_p99_us", "opt_stddev_us", "busy_mean", "busy_max")
COMPARE_COLUMNS = ("rate", "metric", "baseline", "candidate", "diff_pct")
BOX_COLUMNS = ("mode", "rate", "metric", "min", "q1", "median", "q3", "max")


class CompareError(ValueError):
    """The two reports do not describe the same experiment."""


def describe(values) -> dict:
    """count, mean, p50, p95, p99, stddev, min, q1, q3, max of a sample."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return {"count": 0}
    q = np.percentile(a, [0, 25, 50, 75, 95, 99, 100])
    return {"count": int(a.size), "mean": float(a.mean()), "p50": float(q[2]), "p95": float(q[4]),
            "p99": float(q[5]), "stddev": float(a.std(ddof=1)) if a.size > 1 else 0.0,
            "min": float(q[0]), "q1": float(q[1]), "q3": float(q[3]), "max": float(q[6])}


@dataclass
class BenchReport:
    mode: str
    rate: float
    query: str
    query_id: str
    opt_us: dict = field(default_factory=dict)  # stage -> describe()
    latency_ms: dict = field(default_factory=dict)
    latency_calibrated: bool = True
    throughput_tps: dict = field(default_factory=dict)  # stage -> T/s, plus "query"
    busy_fraction: dict = field(default_factory=dict)  # stage -> describe() over windows
    stages: dict = field(default_factory=dict)  # stage -> {"node_id", "tuples_in", "tuples_out"}
    emitted: int = 0
    delivered: int = 0
    filtered: int = 0
    lost: int = 0
    expected_delivered: int | None = None
    achieved_rate: float | None = None
    duration_s: float | None = None
    partial: bool = False
    missing: list = field(default_factory=list)
    energy_j: float | None = None  # filled from external meter logs, never measured here

    def to_doc(self) -> dict:
        return asdict(self)

    @classmethod
    def from_doc(cls, doc: dict) -> "BenchReport":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})

    @classmethod
    def load(cls, path) -> "BenchReport":
        if os.path.isdir(path):
            path = os.path.join(path, "report.json")
        with open(path, encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def _rows(pattern: str):
    for path in sorted(glob.glob(pattern)):
        with open(path, newline="", encoding="utf-8") as fh:
            yield from csv.DictReader(fh)


def collect(run_dir) -> BenchReport:
    """Merge a run directory's raw files into a BenchReport and write it out."""
    with open(os.path.join(run_dir, "run.json"), encoding="utf-8") as fh:
        run = json.load(fh)
    qid = run["query_id"]
    order = run["stages"]  # [[stage, node_id], ...] in stream order

    opt: dict = {}
    for r in _rows(os.path.join(run_dir, "opt-*.csv")):
        if r["query_id"] == qid:
            opt.setdefault(r["stage"], []).append(int(r["opt_ns"]) / 1e3)

    win: dict = {}
    for r in _rows(os.path.join(run_dir, "windows-*.csv")):
        if r["query_id"] != qid:
            continue
        w = win.setdefault(r["stage"], {"in": 0, "out": 0, "first": None, "last": None, "busy": []})
        w["in"] += int(r["tuples_in"])
        w["out"] += int(r["tuples_out"])
        if r["first_ts"]:
            f, last = int(r["first_ts"]), int(r["last_ts"])
            w["first"] = f if w["first"] is None else min(w["first"], f)
            w["last"] = last if w["last"] is None else max(w["last"], last)
        if int(r["tuples_in"]) or int(r["tuples_out"]):
            w["busy"].append(float(r["busy_fraction"]))

    latency = [int(r["latency_ns"]) / 1e6 for r in _rows(os.path.join(run_dir, "latency-*.csv"))
               if r["query_id"] == qid]

    rep = BenchReport(mode=run["mode"], rate=float(run["rate"]), query=run["query"], query_id=qid,
                      latency_calibrated=bool(run.get("same_host", True)),
                      expected_delivered=run.get("expected_delivered"),
                      achieved_rate=run.get("source", {}).get("achieved_rate"),
                      duration_s=run.get("duration_s"), energy_j=run.get("energy_j"))

    def rate_of(w, n):
        if n < 2 or w["first"] is None or w["last"] <= w["first"]:
            return 0.0
        return (n - 1) / ((w["last"] - w["first"]) / 1e9)

    for stage, node in order:
        w = win.get(stage)
        if w is None:
            rep.missing.append(stage)
            continue
        n = w["out"] if stage == "source" else w["in"]
        rep.throughput_tps[stage] = rate_of(w, n)
        rep.stages[stage] = {"node_id": node, "tuples_in": w["in"], "tuples_out": w["out"]}
        if w["busy"] and stage not in ("source", "sink"):
            rep.busy_fraction[stage] = describe(w["busy"])
        if stage in opt:
            rep.opt_us[stage] = describe(opt[stage])
    rep.partial = bool(rep.missing)

    ops = [s for s, _ in order if s not in ("source", "sink") and s in win]
    if ops:
        first = win[ops[0]]
        # the final inputs may be filtered before the last stage, so take the latest stage activity
        lasts = [win[s]["last"] for s in ops if win[s]["last"] is not None]
        if first["first"] is not None and lasts and max(lasts) > first["first"]:
            rep.throughput_tps["query"] = (first["in"] - 1) / ((max(lasts) - first["first"]) / 1e9)
    rep.latency_ms = describe(latency)

    rep.emitted = int(run.get("source", {}).get("emitted", win.get("source", {}).get("out", 0)))
    rep.delivered = win["sink"]["in"] if "sink" in win else len(latency)
    # selections legitimately drop tuples; only the rest counts as loss
    rep.filtered = sum(win[s]["in"] - win[s]["out"] for s in ops)
    rep.lost = rep.emitted - rep.delivered - rep.filtered
    write_report(rep, run_dir)
    return rep


def write_report(rep: BenchReport, out_dir) -> None:
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(rep.to_doc(), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "stages.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(STAGE_COLUMNS)
        for stage, info in rep.stages.items():
            o = rep.opt_us.get(stage, {})
            b = rep.busy_fraction.get(stage, {})
            w.writerow([stage, info["node_id"], info["tuples_in"], info["tuples_out"],
                        round(rep.throughput_tps.get(stage, 0.0), 3), o.get("count", 0),
                        *(round(o[k], 3) if k in o else "" for k in ("mean", "p50", "p95", "p99", "stddev")),
                        *(round(b[k], 6) if k in b else "" for k in ("mean", "max"))])


def _metrics(rep: BenchReport) -> dict:
    out = {}
    for stage, d in sorted(rep.opt_us.items()):
        out[f"opt_mean_us[{stage}]"] = d.get("mean")
        out[f"opt_p50_us[{stage}]"] = d.get("p50")
    for stage, d in sorted(rep.busy_fraction.items()):
        out[f"busy_mean[{stage}]"] = d.get("mean")
    for stage, v in sorted(rep.throughput_tps.items()):
        out[f"throughput_tps[{stage}]"] = v
    out["latency_mean_ms"] = rep.latency_ms.get("mean")
    out["latency_p50_ms"] = rep.latency_ms.get("p50")
    if rep.energy_j is not None:
        out["energy_j"] = rep.energy_j
    return out


def pct_diff(base, cand):
    if base is None or cand is None:
        return None
    if base == cand:
        return 0.0
    if base == 0:
        return None
    return (cand - base) / base * 100.0


def compare(baseline: BenchReport, candidate: BenchReport) -> list[dict]:
    """Per-metric percentage difference of ``candidate`` relative to ``baseline``."""
    if baseline.query != candidate.query:
        raise CompareError(f"different queries: {baseline.query!r} vs {candidate.query!r}")
    if baseline.rate != candidate.rate:
        raise CompareError(f"different rates: {baseline.rate} vs {candidate.rate}")
    a, b = _metrics(baseline), _metrics(candidate)
    return [{"rate": baseline.rate, "metric": k, "baseline": a[k], "candidate": b.get(k),
             "diff_pct": pct_diff(a[k], b.get(k))} for k in a]


def compare_sets(baselines, candidates) -> list[dict]:
    """Pair reports by rate and stack their comparisons, one block per rate."""
    by_rate = {r.rate: r for r in candidates}
    rows = []
    for base in sorted(baselines, key=lambda r: r.rate):
        if base.rate not in by_rate:
            raise CompareError(f"no candidate report at rate {base.rate}")
        rows.extend(compare(base, by_rate[base.rate]))
    return rows


def box_rows(reports) -> list[dict]:
    """Five-number summaries per (mode, rate), the data behind a boxplot."""
    rows = []
    for rep in sorted(reports, key=lambda r: (r.rate, r.mode)):
        series = {f"opt_us[{s}]": d for s, d in sorted(rep.opt_us.items())}
        series.update({f"busy_fraction[{s}]": d for s, d in sorted(rep.busy_fraction.items())})
        if rep.latency_ms.get("count"):
            series["latency_ms"] = rep.latency_ms
        for metric, d in series.items():
            rows.append({"mode": rep.mode, "rate": rep.rate, "metric": metric,
                         **{k: d.get(k) for k in ("min", "q1", "p50", "q3", "max")}})
            rows[-1]["median"] = rows[-1].pop("p50")
    return rows


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def format_table(rows, columns) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_csv(rows, columns, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
