"""Walkthrough: anonymous traffic, then one lawful recovery.

Three clients build circuits and browse; their exit flow records migrate
into the archive; a requesting authority recovers exactly one certified
address with a committee vote on the record. Run with
`python3 demos/recover_identity.py`.
"""

from peelback.sim import SimWorld, parse_scenario

SCENARIO = {
    "seed": 7002,
    "name": "recovery-demo",
    "parties": {
        "clients": 3,
        "relays": {"entry": 1, "middle": 2, "exit": 1},
        "consortium": {"size": 5, "threshold": 3, "key_bits": 1024},
    },
    "schedule": [
        {"at": 1_000, "action": "build_circuit", "client": "client-0", "label": "alice"},
        {"at": 2_000, "action": "build_circuit", "client": "client-1", "label": "bob"},
        {"at": 3_000, "action": "build_circuit", "client": "client-2", "label": "carol"},
        {"at": 5_000, "action": "open_flow", "circuit": "alice", "dest": "93.184.216.34:443"},
        {"at": 6_000, "action": "open_flow", "circuit": "bob", "dest": "198.18.0.9:8443"},
        {"at": 7_000, "action": "open_flow", "circuit": "carol", "dest": "203.0.113.77:80"},
        {"at": 9_000, "action": "close_circuit", "circuit": "alice"},
        {"at": 9_100, "action": "close_circuit", "circuit": "bob"},
        {"at": 9_200, "action": "close_circuit", "circuit": "carol"},
        {"at": 12_000, "action": "migrate", "flush_after": 1},
        {
            "at": 60_000,
            "action": "deanonymize",
            "lea": "lea-1",
            "exit": "exit-0",
            "dest": "198.18.0.9:8443",
            "window": [5, 8],
            "reason": "warrant 2026-014",
            "label": "who-reached-198.18.0.9",
        },
    ],
}


def main() -> None:
    world = SimWorld(parse_scenario(SCENARIO))
    world.run()
    print("ground truth this run (the harness knows, the pipeline must earn):")
    for label, truth in world.circuits.items():
        print(f"  circuit {label}: client at {truth.client_ip}, path {' > '.join(truth.path)}")

    name, outcome = world.outcomes[0]
    print(f"\nrecovery '{name}' steps:")
    for line in outcome.log:
        print(f"  {line}")
    print(f"\nresult: {outcome.describe()}")
    truth = world.circuits["bob"]
    match = "matches" if outcome.certified_ip == truth.client_ip else "DOES NOT MATCH"
    print(f"certified address {match} the true client behind 'bob'")

    print("\nrun report:")
    print(world.report().render(), end="")


if __name__ == "__main__":
    main()
