"""Command line entry point: validate, run, compare and inspect traces."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .engine import run_scenario
from .metrics import IncomparableRuns, compare, format_table, read_trace, write_trace
from .scenario import SHIPPED, Scenario, ScenarioError, load_scenario, shipped_path

EXIT_INVALID = 2


def _resolve(path: str) -> Path:
    """A scenario file, or the name of a shipped scenario."""
    p = Path(path)
    if not p.exists() and path in SHIPPED:
        return shipped_path(path)
    return p


def _load(path: str) -> Scenario:
    try:
        return load_scenario(_resolve(path))
    except ScenarioError as exc:
        for line in exc.lines():
            click.echo(line, err=True)
        sys.exit(EXIT_INVALID)


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Simulate key delivery across SDN-controlled QKD domains."""


@main.command()
@click.argument("scenario")
def validate(scenario: str) -> None:
    """Check a scenario's schema and topology."""
    path = _resolve(scenario)
    try:
        sc = load_scenario(path)
    except ScenarioError as exc:
        for line in exc.lines():
            click.echo(line, err=True)
        readable = path.is_file()
        sys.exit(1 if readable and not _is_syntax_error(exc) else EXIT_INVALID)
    click.echo(
        f"{path}: ok ({len(sc.topology.domains)} domains, {len(sc.topology.nodes)} nodes, "
        f"{len(sc.topology.links)} links)"
    )


def _is_syntax_error(exc: ScenarioError) -> bool:
    return any("YAML syntax error" in msg for _, msg in exc.diagnostics)


@main.command()
@click.argument("scenario")
@click.option("--seed", type=int, envvar="QKDSDN_SEED", default=None, help="Override the scenario seed.")
@click.option("--model", type=click.Choice(["hierarchical", "distributed"]), default=None)
@click.option("--trace", "trace_out", type=click.Path(dir_okay=False), default=None)
@click.option("--report", "report_out", type=click.Path(dir_okay=False), default=None)
def run(scenario: str, seed: int | None, model: str | None, trace_out: str | None, report_out: str | None) -> None:
    """Run one scenario and write its trace and report."""
    sc = _load(scenario)
    try:
        eng = run_scenario(sc, seed=seed, model=model)
    except ValueError as exc:
        click.echo(f"{scenario}: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    report = eng.report()
    if trace_out:
        write_trace(eng.trace, trace_out)
    if report_out:
        Path(report_out).write_text(report.to_json() + "\n")
    delivered = sum(1 for r in report.requests.values() if r.outcome == "Delivered")
    click.echo(
        f"{sc.name} [{eng.model}] seed={eng.seed}: {delivered}/{len(report.requests)} delivered, "
        f"{len(eng.trace)} messages, trace sha256 {eng.trace_hash()[:16]}"
    )


@main.command("compare")
@click.argument("scenario")
@click.option("--models", default="hierarchical,distributed", show_default=True)
@click.option("--seed", type=int, envvar="QKDSDN_SEED", default=None)
def compare_cmd(scenario: str, models: str, seed: int | None) -> None:
    """Run both integration models on one scenario and tabulate the metrics."""
    names = [m.strip() for m in models.split(",") if m.strip()]
    if sorted(names) != ["distributed", "hierarchical"]:
        raise click.BadParameter("expected hierarchical,distributed", param_hint="--models")
    sc = _load(scenario)
    reports = {}
    for name in names:
        try:
            reports[name] = run_scenario(sc.with_model(name), seed=seed).report()
        except ValueError as exc:
            click.echo(f"{scenario}: {exc}", err=True)
            sys.exit(EXIT_INVALID)
    try:
        rows = compare(reports["hierarchical"], reports["distributed"])
    except IncomparableRuns as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    click.echo(format_table(rows))
    click.echo("")
    click.echo("control messages per request:")
    for rid in sorted(reports["hierarchical"].requests):
        h = reports["hierarchical"].requests[rid]
        d = reports["distributed"].requests.get(rid)
        click.echo(
            f"  request {rid}: hierarchical={h.control_messages} ({h.outcome})"
            + (f" distributed={d.control_messages} ({d.outcome})" if d else "")
        )


@main.command()
@click.argument("trace_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--request", "request_id", type=int, required=True)
def trace(trace_file: str, request_id: int) -> None:
    """Print the message sequence of one request."""
    records = [r for r in read_trace(trace_file) if r.request_id == request_id]
    if not records:
        click.echo(f"no messages for request {request_id}", err=True)
        sys.exit(1)
    for r in records:
        line = f"{r.time:12.6f}  {r.plane}  {r.sender:>8} -> {r.receiver:<8} {r.type}"
        click.echo(line + (f"  {r.detail}" if r.detail else ""))


if __name__ == "__main__":
    main()
