"""Walkthrough: probing an exit that silently drops flow records.

An authority commits to a probe on the ledger, runs real-looking traffic
through the suspect exit, then reveals the commitment and judges the
recovery. An honest exit passes; a record-dropping exit cannot produce the
archived record it was supposed to keep. Run with
`python3 demos/catch_a_dropper.py`.
"""

from peelback.probing import probe_statistics
from peelback.sim import SimWorld, parse_scenario


def scenario(with_dropper: bool) -> dict:
    doc = {
        "seed": 7003,
        "name": "dropper-demo",
        "parties": {
            "clients": 1,
            "relays": {"entry": 1, "middle": 1, "exit": 1},
            "consortium": {"size": 5, "threshold": 3, "key_bits": 1024},
        },
        "schedule": [
            {"at": 60_000, "action": "probe", "authority": "lea-1", "exit": "exit-0"},
        ],
    }
    if with_dropper:
        doc["faults"] = [{"party": "exit-0", "kind": "drop_records"}]
    return doc


def play(with_dropper: bool) -> None:
    tag = "record-dropping" if with_dropper else "honest"
    print(f"--- probing an {tag} exit ---")
    world = SimWorld(parse_scenario(scenario(with_dropper)))
    world.run()
    result = world.probe_results[0]
    print(f"commitment on chain: {result.commitment.hex()[:16]}...")
    if result.passed:
        print("verdict: pass, the archived record matched the probe traffic")
    else:
        print(f"verdict: FAIL on check '{result.failed_check}', "
              f"attributable to the probed exit: {result.relay_fault}")
    accepted, probes, real = probe_statistics(world.ledger)
    print(f"ledger balance: accepted={accepted} probes={probes} real={real}")
    print()


def main() -> None:
    play(with_dropper=False)
    play(with_dropper=True)
    print("a failed probe is a finding against the exit, not a harness bug:")
    world = SimWorld(parse_scenario(scenario(True)))
    world.run()
    report = world.report()
    print(f"  exit status {report.exit_status}, "
          f"probe_relay_faults={report.probe_relay_faults}")


if __name__ == "__main__":
    main()
