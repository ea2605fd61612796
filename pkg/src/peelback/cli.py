"""Operator command line.

One binary, six verbs:

  run <scenario.yaml>      play a scenario, save the world, print the report
  deanon run ...           file and run a recovery case against a saved world
  probe run ... / audit    probe an exit relay / show probe accounting
  ledger show              the public ledger view, or the disclosed one
  db search / db stats     query the flow-record database
  report                   re-render the saved world's report

Every verb except `run` operates on a world saved by an earlier `run`
(`--state`, default peelback.world).  Exit status: 0 on success (for `run`,
all audits passing), 1 when the operation fails or an audit fails, 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from typing import Sequence

from .deanon import RESULT_REFUSED
from .errors import ProtocolError
from .sim.engine import SimError, SimWorld
from .sim.scenario import ScenarioError, load_scenario

__all__ = ["cli", "main"]

DEFAULT_STATE = "peelback.world"


def _window(text: str) -> tuple[int, int]:
    start, _, end = text.partition(":")
    try:
        lo, hi = int(start), int(end)
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be START:END seconds, got {text!r}")
    if lo > hi:
        raise argparse.ArgumentTypeError("window start is after its end")
    return lo, hi


def _dest(text: str) -> tuple[str, int]:
    ip, _, port = text.rpartition(":")
    if not ip:
        raise argparse.ArgumentTypeError(f"dest must be ip:port, got {text!r}")
    try:
        return ip, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peelback", description="accountable anonymity network toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="play a scenario file")
    p_run.add_argument("scenario", help="scenario YAML path")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--state", default=DEFAULT_STATE, help="where to save the played world")
    p_run.add_argument("--report", default=None, help="also write the report to this file")

    p_deanon = sub.add_parser("deanon", help="identity recovery")
    deanon_sub = p_deanon.add_subparsers(dest="subcommand", required=True)
    p_dr = deanon_sub.add_parser("run", help="file a case and run the pipeline")
    p_dr.add_argument("--state", default=DEFAULT_STATE)
    p_dr.add_argument("--dest", type=_dest, required=True, help="flow destination ip:port")
    p_dr.add_argument("--exit", dest="exit_party", required=True, help="exit relay party id")
    p_dr.add_argument("--at", type=int, required=True, help="query time, seconds")
    p_dr.add_argument("--reason", required=True, help="case reasoning, sealed until disclosure")
    p_dr.add_argument("--window", type=_window, default=None, help="flow window START:END seconds")
    p_dr.add_argument("--lea", default=None, help="requesting authority (default: first)")

    p_probe = sub.add_parser("probe", help="exit relay probing")
    probe_sub = p_probe.add_subparsers(dest="subcommand", required=True)
    p_pr = probe_sub.add_parser("run", help="commit to and run one probe")
    p_pr.add_argument("--state", default=DEFAULT_STATE)
    p_pr.add_argument("--exit", dest="exit_party", required=True, help="exit relay party id")
    p_pr.add_argument("--authority", default=None, help="probing authority (default: first)")
    p_pr.add_argument("--dest", default="198.51.100.7:8443", help="probe destination ip:port")
    p_pr.add_argument("--duration", type=int, default=600, help="committed timeframe length, seconds")
    p_pa = probe_sub.add_parser("audit", help="probe accounting across authorities")
    p_pa.add_argument("--state", default=DEFAULT_STATE)

    p_ledger = sub.add_parser("ledger", help="translucent ledger views")
    ledger_sub = p_ledger.add_subparsers(dest="subcommand", required=True)
    p_ls = ledger_sub.add_parser("show", help="print a ledger view")
    p_ls.add_argument("--state", default=DEFAULT_STATE)
    group = p_ls.add_mutually_exclusive_group()
    group.add_argument("--public", action="store_true", help="pre-disclosure view (default)")
    group.add_argument("--disclosed", action="store_true", help="view after the delay")
    p_ls.add_argument("--at", type=int, default=None, help="disclosure clock, seconds")

    p_db = sub.add_parser("db", help="flow-record database")
    db_sub = p_db.add_subparsers(dest="subcommand", required=True)
    p_ds = db_sub.add_parser("search", help="find stored flow records")
    p_ds.add_argument("--state", default=DEFAULT_STATE)
    p_ds.add_argument("--dest", type=_dest, required=True, help="destination ip:port")
    p_ds.add_argument("--exit", dest="exit_party", required=True, help="exit relay party id")
    p_ds.add_argument("--window", type=_window, required=True, help="time window START:END seconds")
    p_dt = db_sub.add_parser("stats", help="database totals")
    p_dt.add_argument("--state", default=DEFAULT_STATE)

    p_report = sub.add_parser("report", help="re-render a saved world's report")
    p_report.add_argument("--state", default=DEFAULT_STATE)

    return parser


def _load_world(path: str, out) -> SimWorld | None:
    try:
        return SimWorld.load(path)
    except FileNotFoundError:
        print(f"no saved world at {path} (run a scenario first)", file=out)
        return None
    except ProtocolError as exc:
        print(f"cannot load {path}: {exc}", file=out)
        return None


def _resolve_exit(world: SimWorld, party: str, out) -> bool:
    if party not in world.relays:
        known = ", ".join(sorted(world.relays))
        print(f"unknown relay '{party}' (relays: {known})", file=out)
        return False
    return True


def _cmd_run(args, out) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError:
        print(f"scenario file not found: {args.scenario}", file=out)
        return 2
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=out)
        return 2
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    world = SimWorld(scenario)
    world.run()
    report = world.report()
    text = report.render()
    print(text, end="", file=out)
    world.save(args.state)
    print(f"# world saved to {args.state}", file=out)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    return report.exit_status


def _cmd_deanon_run(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    if not _resolve_exit(world, args.exit_party, out):
        return 1
    lea = args.lea or next(iter(world.scenario.parties.leas), None)
    if lea is None or lea not in world.clients:
        print(f"unknown authority '{lea}'", file=out)
        return 1
    dest_ip, dest_port = args.dest
    window = args.window or (0, args.at)
    outcome = world.run_recovery(
        args.at * 1000, lea, dest_ip, dest_port, args.exit_party, window, args.reason
    )
    for line in outcome.log:
        print(f"  {line}", file=out)
    print(outcome.describe(), file=out)
    for sub in outcome.candidates:
        if sub is not outcome:
            print(f"  candidate: {sub.describe()}", file=out)
    world.save(args.state)
    return 1 if outcome.result == RESULT_REFUSED else 0


def _cmd_probe_run(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    if not _resolve_exit(world, args.exit_party, out):
        return 1
    authority = args.authority or next(iter(world.scenario.parties.probe_authorities()), None)
    if authority is None or authority not in world.clients:
        print(f"unknown authority '{authority}'", file=out)
        return 1
    result = world.run_probe_round(
        world.clock_ms + 1000,
        authority,
        args.exit_party,
        dest=args.dest,
        duration_s=args.duration,
    )
    world.save(args.state)
    if result is None:
        print(f"probe aborted: no circuit through {args.exit_party}; commitment voided", file=out)
        return 1
    if result.passed:
        print(f"probe passed: {args.exit_party} served and preserved the committed flow", file=out)
        return 0
    blame = f" ({result.failed_check})" if result.failed_check else " (not attributable)"
    print(f"probe failed{blame}: exit {args.exit_party}", file=out)
    return 1


def _cmd_probe_audit(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    audit = world.probe_audit
    if not audit.results:
        print("no probes recorded", file=out)
        return 0
    for i, result in enumerate(audit.results):
        party = world._key_to_party.get(result.exit_id_key, result.exit_id_key.hex()[:12])
        verdict = "pass" if result.passed else f"fail:{result.failed_check or 'unattributed'}"
        print(f"probe[{i}] exit={party} prober={result.prober} result={verdict}", file=out)
    for key in sorted(audit.removed):
        party = world._key_to_party.get(key, key.hex()[:12])
        reporters = ",".join(sorted(audit.fault_reporters(key)))
        print(f"removed {party} on reports from {reporters}", file=out)
    return 0


def _cmd_ledger_show(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    ledger = world.ledger
    if args.disclosed:
        now = args.at if args.at is not None else world.clock_ms // 1000
        view = ledger.disclose(now)
        print(f"disclosure as of t={view.as_of}s (delay {view.delay}s)", file=out)
        for item in view.items:
            if item["disclosed"]:
                print(
                    f"case {item['case_id']} record={item['record_hash'][:16]} "
                    f"filer={item['filer']} reasoning={item['reasoning']!r} "
                    f"probe={item['probe']}",
                    file=out,
                )
            else:
                print(
                    f"case {item['case_id']} record={item['record_hash'][:16]} "
                    f"sealed ({item['sealed_reason']})",
                    file=out,
                )
        return 0
    view = ledger.public_view()
    for block in view["blocks"]:
        kinds = ",".join(block["event_kinds"]) or "-"
        print(
            f"block {block['height']} t={block['timestamp']}s events=[{kinds}] "
            f"state={block['state_root'][:16]}",
            file=out,
        )
    for case in view["cases"]:
        print(
            f"case {case['case_id']} record={case['record_hash'][:16]} "
            f"accepted={case['accepted']} probe={case['probe']}",
            file=out,
        )
    print(view["stats"], file=out)
    return 0


def _cmd_db_search(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    if not _resolve_exit(world, args.exit_party, out):
        return 1
    dest_ip, dest_port = args.dest
    exit_ip = world.relays[args.exit_party].exit_store.exit_ip
    found = world.dbs[0].search(dest_ip, dest_port, exit_ip, args.window)
    for stored in found:
        r = stored.record
        print(
            f"{r.dest_ip}:{r.dest_port} at t={r.timestamp}s via {r.exit_ip} "
            f"batch={stored.batch_digest.hex()[:16]}",
            file=out,
        )
    print(f"{len(found)} record(s)", file=out)
    return 0


def _cmd_db_stats(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    for db in world.dbs:
        stats = db.stats()
        line = " ".join(f"{key}={stats[key]}" for key in sorted(stats))
        print(line, file=out)
    return 0


def _cmd_report(args, out) -> int:
    world = _load_world(args.state, out)
    if world is None:
        return 1
    report = world.report()
    print(report.render(), end="", file=out)
    return report.exit_status


def cli(argv: Sequence[str] | None = None, out=None) -> int:
    """Parse argv and run one command; returns the process exit status."""
    out = out or sys.stdout
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        if args.command == "run":
            return _cmd_run(args, out)
        if args.command == "deanon":
            return _cmd_deanon_run(args, out)
        if args.command == "probe":
            if args.subcommand == "run":
                return _cmd_probe_run(args, out)
            return _cmd_probe_audit(args, out)
        if args.command == "ledger":
            return _cmd_ledger_show(args, out)
        if args.command == "db":
            if args.subcommand == "search":
                return _cmd_db_search(args, out)
            return _cmd_db_stats(args, out)
        return _cmd_report(args, out)
    except (SimError, ProtocolError) as exc:
        print(f"error: {exc}", file=out)
        return 1


def main() -> None:
    sys.exit(cli())
