"""Command line: ``edgestream coordinator | agent | bench ...``."""
from __future__ import annotations

import glob
import json
import logging
import os
import sys

import click

from .agent import AgentConfig, run_agent
from .bench import report as reports
from .bench.runner import load_query, produce, run_eval
from .bench.source import PRESET_RATES, SourceConfig
from .bench.synth import synth_elec
from .coordinator import load_config, serve


def _logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@click.group()
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def main(log_level):
    """Edge stream processing with sandboxed operators."""
    _logging(log_level)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="JSON config file.")
@click.option("--listen", help="host:port for the HTTP API.")
@click.option("--heartbeat-interval", type=float)
@click.option("--failure-threshold", type=int)
@click.option("--activation-threshold", type=int)
@click.option("--replay-buffer", type=int)
def coordinator(config_path, **flags):
    """Run the coordinator HTTP server (EDGESTREAM_* env vars are honoured)."""
    cfg = load_config(config_path, **{k: v for k, v in flags.items() if v is not None})
    click.echo(f"coordinator on http://{cfg.listen}", err=True)
    serve(cfg)


@main.command()
@click.option("--coordinator", "coordinator_url", help="Coordinator URL [env EDGESTREAM_COORDINATOR].")
@click.option("--data-port", type=int, help="TCP port for inbound streams [env EDGESTREAM_DATA_PORT].")
@click.option("--node-id", help="Stable node id [env EDGESTREAM_NODE_ID].")
@click.option("--capacity", type=int, help="Operator slots [env EDGESTREAM_CAPACITY].")
@click.option("--metrics-dir", type=click.Path(file_okay=False), help="Raw metric files [env EDGESTREAM_METRICS_DIR].")
@click.option("--host", default=None, help="Address other nodes use to reach this one.")
def agent(coordinator_url, data_port, node_id, capacity, metrics_dir, host):
    """Run a worker agent until interrupted."""
    try:
        cfg = AgentConfig.from_env(coordinator=coordinator_url, data_port=data_port, node_id=node_id,
                                   capacity=capacity, metrics_dir=metrics_dir, host=host)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    sys.exit(run_agent(cfg))


@main.group()
def bench():
    """Benchmark harness."""


@bench.command()
@click.option("--rows", type=int, default=45_312, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Output file (stdout when omitted).")
def synth(rows, seed, out):
    """Write a synthetic ELEC-schema CSV."""
    if rows <= 0:
        raise click.BadParameter("must be positive", param_hint="--rows")
    if out:
        synth_elec(rows, seed, out)
    else:
        click.echo(synth_elec(rows, seed), nl=False)


@bench.command("produce")
@click.option("--csv", "csv_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--rate", type=float, default=125.0, show_default=True, help="Tuples per second.")
@click.option("--mode", type=click.Choice(["sandbox", "native"]), default="sandbox", show_default=True)
@click.option("--coordinator", "coordinator_url", required=True)
@click.option("--query", "query_path", type=click.Path(exists=True, dir_okay=False),
              help="Query file to register; the canned evaluation query with --eval-query.")
@click.option("--eval-query", is_flag=True, help="Register the canned evaluation query.")
@click.option("--duration", type=float, help="Seconds to emit (rate x duration tuples).")
@click.option("--count", type=int, help="Number of tuples to emit.")
@click.option("--loop", is_flag=True, help="Cycle the file until the bound is reached.")
@click.option("--metrics-dir", type=click.Path(file_okay=False))
def produce_cmd(csv_path, rate, mode, coordinator_url, query_path, eval_query, duration, count, loop, metrics_dir):
    """Join a coordinator as the source and emit a CSV at a paced rate."""
    cfg = SourceConfig(csv_path, rate=rate, duration=duration, count=count, loop=loop)
    query = load_query(query_path) if (query_path or eval_query) else None
    summary = produce(cfg, coordinator_url, query=query, mode=mode, metrics_dir=metrics_dir)
    click.echo(json.dumps(summary, indent=2))


def _summary_line(rep) -> str:
    opt = ", ".join(f"{s} {d['mean']:.1f}us" for s, d in sorted(rep.opt_us.items()) if d.get("count"))
    lat = rep.latency_ms.get("mean")
    return (f"{rep.mode:7s} {rep.rate:7.0f} T/s  achieved {rep.achieved_rate or 0:8.2f}  "
            f"query {rep.throughput_tps.get('query', 0):8.2f} T/s  latency "
            f"{'n/a' if lat is None else f'{lat:.2f} ms'}  OPT {opt}  "
            f"emitted {rep.emitted} delivered {rep.delivered} filtered {rep.filtered} lost {rep.lost}"
            f"{'  PARTIAL' if rep.partial else ''}")


@bench.command("run-eval")
@click.option("--rate", "rates", type=float, multiple=True,
              help=f"Input rate in T/s; repeatable (default: {', '.join(map(str, PRESET_RATES))}).")
@click.option("--mode", type=click.Choice(["sandbox", "native", "both"]), default="both", show_default=True)
@click.option("--duration", type=float, default=10.0, show_default=True, help="Seconds per run.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="bench-runs", show_default=True)
@click.option("--csv", "csv_path", type=click.Path(exists=True, dir_okay=False),
              help="Input data (synthetic ELEC rows when omitted).")
@click.option("--query", "query_path", type=click.Path(exists=True, dir_okay=False),
              help="Query file (the canned evaluation query when omitted).")
@click.option("--heartbeat-interval", type=float, default=0.5, show_default=True)
def run_eval_cmd(rates, mode, duration, out_dir, csv_path, query_path, heartbeat_interval):
    """Run the evaluation query on a local coordinator with two worker processes."""
    modes = ["native", "sandbox"] if mode == "both" else [mode]
    for rate in rates or PRESET_RATES:
        for m in modes:
            rep = run_eval(rate, m, duration, out_dir, query=query_path, csv_path=csv_path,
                           heartbeat_interval=heartbeat_interval)
            click.echo(_summary_line(rep))
    if len(modes) == 2:
        _emit_comparison(os.path.join(out_dir, "native-*"), os.path.join(out_dir, "sandbox-*"), out_dir)


def _load_reports(target: str):
    """A report file, a run directory, or a directory/glob of run directories."""
    if os.path.isfile(target):
        return [reports.BenchReport.load(target)]
    if os.path.isfile(os.path.join(target, "report.json")):
        return [reports.BenchReport.load(target)]
    pattern = target if any(ch in target for ch in "*?[") else os.path.join(target, "*")
    found = [reports.BenchReport.load(p) for p in sorted(glob.glob(pattern))
             if os.path.isfile(os.path.join(p, "report.json"))]
    if not found:
        raise click.BadParameter(f"no reports under {target}")
    return found


def _emit_comparison(a: str, b: str, out_dir: str | None) -> None:
    base, cand = _load_reports(a), _load_reports(b)
    try:
        rows = reports.compare_sets(base, cand)
    except reports.CompareError as exc:
        raise click.ClickException(f"comparison refused: {exc}") from None
    box = reports.box_rows(base + cand)
    click.echo(f"percentage difference of {cand[0].mode} relative to {base[0].mode}, per rate")
    click.echo(reports.format_table(rows, reports.COMPARE_COLUMNS))
    click.echo("")
    click.echo("distribution per mode and rate")
    click.echo(reports.format_table(box, reports.BOX_COLUMNS))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        reports.write_csv(rows, reports.COMPARE_COLUMNS, os.path.join(out_dir, "compare.csv"))
        reports.write_csv(box, reports.BOX_COLUMNS, os.path.join(out_dir, "box.csv"))


@bench.command("compare")
@click.argument("baseline")
@click.argument("candidate")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Also write compare.csv and box.csv here.")
def compare_cmd(baseline, candidate, out_dir):
    """Percentage differences of CANDIDATE relative to BASELINE (report files or run directories)."""
    _emit_comparison(baseline, candidate, out_dir)


if __name__ == "__main__":
    main()
