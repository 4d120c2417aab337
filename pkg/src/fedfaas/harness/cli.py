"""``fedfaas-harness run <scenario-file> [--seed N] [--report out]``."""

from __future__ import annotations

import json

import click

from .federation import ScenarioAborted
from .scenario import ScenarioError, ScenarioSpec, run_scenario


@click.group()
def main():
    """Multi-site federation test bed."""


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, help="override the scenario's seed")
@click.option("--report", "report_file", type=click.Path(dir_okay=False), help="write the JSON report here")
@click.option("--keep-workdir", is_flag=True, help="leave logs and storage behind for inspection")
def run(scenario_file, seed, report_file, keep_workdir):
    """Run one scenario; exit 1 if any assertion fails."""
    try:
        spec = ScenarioSpec.load(scenario_file)
    except (ScenarioError, ValueError) as exc:
        raise click.UsageError(f"{scenario_file}: {exc}") from None
    try:
        report = run_scenario(spec, seed=seed, keep_workdir=keep_workdir)
    except ScenarioAborted as exc:
        click.echo(f"aborted: {exc}", err=True)
        raise SystemExit(2) from None
    for a in report.assertions:
        click.echo(f"{'PASS' if a.passed else 'FAIL'}  {a.id}  {a.detail}")
    click.echo(f"{report.name}: {'passed' if report.passed else 'FAILED'} "
               f"({len(report.assertions) - len(report.failures())}/{len(report.assertions)})")
    if report_file:
        with open(report_file, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    raise SystemExit(0 if report.passed else 1)


if __name__ == "__main__":
    main()
