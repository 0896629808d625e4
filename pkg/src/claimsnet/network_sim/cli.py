"""Command line: run scenarios, verify logs, inspect claim sets, print reports."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from ..audit_log import AuditLog
from ..claims_provider import ClaimSet
from ..envelope import EnvelopeError, KeyDirectory, SignedEnvelope, canonicalize, parse_canonical
from .library import BUILDERS, scenario, scenario_path
from .runner import run_scenario
from .scenario import ConfigInvalid, ScenarioConfig


def _load_scenario(ref: str) -> ScenarioConfig:
    path = Path(ref)
    if path.exists():
        return ScenarioConfig.load(path)
    if ref in BUILDERS:
        return scenario(ref) if not scenario_path(ref).exists() else ScenarioConfig.load(scenario_path(ref))
    raise click.BadParameter(f"no scenario file or built-in named {ref!r}", param_hint="--scenario")


def _find_keys(start: Path, explicit: str | None) -> KeyDirectory | None:
    if explicit:
        return KeyDirectory.from_wire(json.loads(Path(explicit).read_text()))
    for parent in [start.parent, *start.parents]:
        candidate = parent / "keys.json"
        if candidate.exists():
            return KeyDirectory.from_wire(json.loads(candidate.read_text()))
    return None


@click.group()
def main() -> None:
    """Simulated claims exchange network for Travel Rule compliance."""


@main.command()
@click.option("--scenario", "scenario_ref", required=True, help="Scenario file or built-in name.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--parallel/--sequential", default=None, help="Step independent nodes concurrently.")
def run(scenario_ref: str, seed: int | None, out_dir: str, parallel: bool | None) -> None:
    """Run a scenario and write trace, report, logs and stores under OUT."""
    try:
        config = _load_scenario(scenario_ref)
    except ConfigInvalid as exc:
        raise click.ClickException(f"invalid scenario: {exc}") from exc
    result = run_scenario(config, seed, parallel=parallel, out_dir=out_dir)
    failed = {name: v for name, v in result.checks.items() if v}
    for row in result.reports:
        reason = f" ({row['reason']})" if row["reason"] else ""
        click.echo(f"{row['vasp_id']:<10} {row['transfer_id']:<6} {row['state']}{reason}")
    click.echo(f"{len(result.trace)} trace events, {len(result.messages)} messages -> {out_dir}")
    for name, problems in failed.items():
        click.echo(f"check {name} FAILED: {problems[0]}", err=True)
    if failed:
        sys.exit(1)


@main.command("verify-log")
@click.argument("log_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--keys", "keys_file", default=None, help="keys.json (default: nearest one above the log).")
def verify_log(log_file: str, keys_file: str | None) -> None:
    """Exit 0 when LOG_FILE's hash chain and signatures verify, else 1."""
    keys = _find_keys(Path(log_file).resolve(), keys_file)
    if keys is None:
        click.echo("no keys.json found; pass --keys", err=True)
        sys.exit(1)
    log = AuditLog.load(log_file, keys)
    if log.verify_chain():
        click.echo(f"OK {len(log)} entries, head {log.head_hash.hex()}")
        sys.exit(0)
    click.echo("FAIL chain does not verify")
    sys.exit(1)


@main.command("inspect-claim")
@click.argument("claim_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--keys", "keys_file", default=None, help="keys.json (default: nearest one above the file).")
def inspect_claim(claim_file: str, keys_file: str | None) -> None:
    """Pretty-print each claim set in CLAIM_FILE and re-verify its signature."""
    keys = _find_keys(Path(claim_file).resolve(), keys_file) or KeyDirectory()
    ok = True
    lines = [ln for ln in Path(claim_file).read_bytes().splitlines() if ln.strip()]
    for ln in lines:
        try:
            env = SignedEnvelope.from_wire(parse_canonical(ln))
            cs = ClaimSet.from_envelope(env)
        except (EnvelopeError, ValueError, KeyError) as exc:
            click.echo(f"unreadable claim set: {exc}")
            ok = False
            continue
        pub = keys.get(cs.issuer_id)
        good = pub is not None and cs.verify(pub)
        ok &= good
        click.echo(f"claim set {cs.claimset_id}  issuer {cs.issuer_id}  subject {cs.subject_id}")
        click.echo(f"  signature: {'valid' if good else 'INVALID'}")
        for claim in cs.claims:
            click.echo(f"  - {claim.statement['sentence']}")
            click.echo(f"    attributes {json.dumps(claim.attributes, sort_keys=True)}")
            click.echo(f"    via {', '.join(claim.algo_refs)}; expires {claim.expires_at}")
        for ref, why in sorted(cs.failures.items()):
            click.echo(f"  ! {ref}: {why}")
    sys.exit(0 if ok and lines else 1)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Emit the canonical report document.")
def report(run_dir: str, as_json: bool) -> None:
    """Print the per-transfer compliance report of a finished run."""
    doc = parse_canonical(Path(run_dir, "report.json").read_bytes().rstrip(b"\n"))
    if as_json:
        click.echo(canonicalize(doc).decode())
        return
    click.echo(f"scenario {doc['scenario']} seed {doc['seed']}")
    for row in doc["transfers"]:
        click.echo(
            f"{row['transfer_id']:<6} {row['vasp_id']:<10} {row['role']:<11} {row['state']:<14}"
            f" reason={row['reason'] or '-'} groups={len(row['packet_field_groups'])}/5"
            f" receipts={len(row['receipt_hashes'])}"
        )
        for h in row["receipt_hashes"]:
            click.echo(f"       receipt {h}")
    ledger = doc["ledger"]
    click.echo(f"ledger total {ledger['total']} (minted {ledger['minted']})")
    for name, problems in doc["checks"].items():
        click.echo(f"check {name}: {'ok' if not problems else 'FAILED ' + problems[0]}")


if __name__ == "__main__":
    main()
